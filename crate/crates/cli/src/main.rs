mod jobs;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rankdebias::data::GenConfig;
use rankdebias::pipeline::{DatasetSpec, ExperimentConfig, SweepSpec};

use jobs::{Job, Mode, Role, Split};

/// Output root used when `--out` is not given.
const OUT_ENV: &str = "RANKDEBIAS_OUT";

/// Exit code 2 for bad usage or inputs, 1 for failures while running.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure::Runtime(msg.into())
    }
}

impl From<rankdebias::Error> for Failure {
    fn from(e: rankdebias::Error) -> Self {
        use rankdebias::Error as E;
        let msg = e.to_string();
        match e {
            E::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => Failure::Usage(msg),
            E::InvalidArgument(_) | E::Shape { .. } | E::Format { .. } | E::Json(_) => Failure::Usage(msg),
            E::Io { .. } | E::NonFinite { .. } | E::DegenerateSpectrum(_) | E::Diverged { .. } => Failure::Runtime(msg),
        }
    }
}

#[derive(Parser)]
#[command(name = "rankdebias", version, about = "Rank diagnostics and two-stage debiasing on biased datasets")]
struct Cli {
    /// Repeat for more log output (info, debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest a biased dataset directory.
    #[command(subcommand)]
    Data(DataCommand),
    /// Contrastive pretraining of a biased or main encoder.
    Pretrain(PretrainArgs),
    /// Error-set mining with the biased encoder and upweighted training on the main one.
    Debias(DebiasArgs),
    /// Singular spectrum, effective rank and reordered correlation of encoder outputs.
    Spectrum(SpectrumArgs),
    /// Cross-product sweep with model selection.
    Sweep(SweepArgs),
    /// Supervised training with optional rank regularization.
    Erm(ErmArgs),
    /// Re-run the job recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Synthetic ColorPoints data with an unbiased test split.
    Gen(GenArgs),
    /// Colored MNIST from IDX files.
    Cmnist(CmnistArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Output directory [default: $RANKDEBIAS_OUT/<command>-<hash>, or ./runs/...].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    /// Generator settings as JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    n_test: usize,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    bias_ratio: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    input_dim: Option<usize>,
    #[arg(long)]
    modes: Option<usize>,
    #[arg(long)]
    color_scale: Option<f64>,
    #[arg(long)]
    color_noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct CmnistArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Test IDX pair, re-tinted with uniformly random colors.
    #[arg(long, requires = "test_labels")]
    test_images: Option<PathBuf>,
    #[arg(long, requires = "test_images")]
    test_labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0.99)]
    bias_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

/// Settings shared by the training commands. Precedence: flags, then the
/// `--config` file, then built-in defaults.
#[derive(Args)]
struct TrainArgs {
    /// Experiment config JSON (partial configs are filled with defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory from `data gen` / `data cmnist`; overrides the config's dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seed [default: first entry of the config's seeds].
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long, value_enum)]
    role: Role,
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct DebiasArgs {
    /// Biased encoder checkpoint (`encoder.bin` from `pretrain --role biased`).
    #[arg(long)]
    biased: PathBuf,
    /// Main encoder checkpoint.
    #[arg(long)]
    main: PathBuf,
    #[arg(long)]
    lambda_up: Option<f64>,
    #[arg(long, value_enum, default_value = "linear-eval")]
    mode: Mode,
    #[arg(long)]
    label_fraction: Option<f64>,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct SpectrumArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Singular values written to spectrum.csv.
    #[arg(long, default_value_t = 100)]
    top: usize,
    #[arg(long, default_value_t = usize::MAX)]
    max_rows: usize,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct ErmArgs {
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep spec JSON: experiment, base config, and value lists.
    #[arg(long)]
    spec: PathBuf,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct ReplayArgs {
    manifest: PathBuf,
    #[command(flatten)]
    out: OutArgs,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl TrainArgs {
    fn resolve(&self) -> Result<(ExperimentConfig, u64), Failure> {
        let mut cfg: ExperimentConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(dir) = &self.data {
            cfg.dataset = DatasetSpec::directory(dir)?;
        }
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.base_lr, self.lr);
        set(&mut cfg.temperature, self.temperature);
        let seed = self.seed.or_else(|| cfg.seeds.first().copied()).unwrap_or(0);
        cfg.seeds = vec![seed];
        Ok((cfg, seed))
    }
}

fn build_job(command: Command) -> Result<(Job, Option<PathBuf>), Failure> {
    let checked = |cfg: ExperimentConfig| -> Result<ExperimentConfig, Failure> {
        cfg.validate()?;
        Ok(cfg)
    };
    Ok(match command {
        Command::Data(DataCommand::Gen(a)) => {
            let mut gen: GenConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => GenConfig::default(),
            };
            set(&mut gen.n, a.n);
            set(&mut gen.classes, a.classes);
            set(&mut gen.bias_ratio, a.bias_ratio);
            set(&mut gen.noise, a.noise);
            set(&mut gen.input_dim, a.input_dim);
            set(&mut gen.modes, a.modes);
            set(&mut gen.color_scale, a.color_scale);
            set(&mut gen.color_noise, a.color_noise);
            set(&mut gen.seed, a.seed);
            gen.validate()?;
            (Job::DataGen { gen, n_test: a.n_test }, a.out.out)
        }
        Command::Data(DataCommand::Cmnist(a)) => (
            Job::DataCmnist {
                images: a.images,
                labels: a.labels,
                test_images: a.test_images,
                test_labels: a.test_labels,
                bias_ratio: a.bias_ratio,
                seed: a.seed,
            },
            a.out.out,
        ),
        Command::Pretrain(a) => {
            let (mut config, seed) = a.train.resolve()?;
            set(&mut config.lambda_reg, a.lambda_reg);
            let config = checked(config)?;
            (Job::Pretrain { role: a.role, config, seed }, a.out.out)
        }
        Command::Debias(a) => {
            let (mut config, seed) = a.train.resolve()?;
            set(&mut config.lambda_up, a.lambda_up);
            set(&mut config.label_fraction, a.label_fraction);
            let config = checked(config)?;
            (
                Job::Debias {
                    biased: a.biased,
                    main: a.main,
                    mode: a.mode,
                    config,
                    seed,
                },
                a.out.out,
            )
        }
        Command::Spectrum(a) => {
            let (config, seed) = a.train.resolve()?;
            let config = checked(config)?;
            (
                Job::Spectrum {
                    checkpoint: a.checkpoint,
                    split: a.split,
                    top: a.top,
                    max_rows: a.max_rows,
                    config,
                    seed,
                },
                a.out.out,
            )
        }
        Command::Erm(a) => {
            let (mut config, seed) = a.train.resolve()?;
            set(&mut config.lambda_reg, a.lambda_reg);
            let config = checked(config)?;
            (Job::Erm { config, seed }, a.out.out)
        }
        Command::Sweep(a) => {
            let spec: SweepSpec = read_json(&a.spec)?;
            spec.base.validate()?;
            (Job::Sweep { spec }, a.out.out)
        }
        Command::Replay(a) => {
            let recorded = manifest::load(&a.manifest)?;
            let now = manifest::combined_input_hash(&manifest::hash_inputs(&recorded.job.input_files())?);
            if now != recorded.input_hash {
                return Err(Failure::usage(format!(
                    "{}: inputs changed since the manifest was written (input hash {now}, recorded {})",
                    a.manifest.display(),
                    recorded.input_hash
                )));
            }
            (recorded.job, a.out.out)
        }
    })
}

fn default_out(job: &Job) -> Result<PathBuf, Failure> {
    let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let stamp = manifest::Stamp::new(job)?;
    Ok(root.join(format!("{}-{}", job.name(), &stamp.manifest_hash[..12])))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (job, out) = build_job(cli.command)?;
    let dir = match out {
        Some(d) => d,
        None => default_out(&job)?,
    };
    let m = job.run(&dir)?;
    println!("wrote {} (manifest {})", dir.display(), &m.manifest_hash[..12]);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
