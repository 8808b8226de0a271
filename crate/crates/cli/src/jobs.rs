//! Resolved, serializable units of work. A manifest stores its job, so a
//! replay runs exactly what the original invocation ran.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rankdebias::data::{
    cmnist_from_idx, gen_colorpoints, label_fraction_split, make_unbiased_testset, BiasedDataset, GenConfig,
};
use rankdebias::nn::{checkpoint, DenseNet};
use rankdebias::pipeline::{
    debiased_linear_eval, error_set_quality, evaluate, finetune_semisup, identify_error_set,
    pretrain_with_log, run_erm, run_sweep, select, write_sweep_csv, DatasetSpec, ExperimentConfig,
    MetricsReport, SweepRow, SweepSpec, TrainLog,
};
use rankdebias::rng::stream_key;
use rankdebias::spectral::{
    auto_correlation, cluster_reorder, effective_rank, mean_effective_rank, normalized_spectrum,
    svd_values, RANK_BATCH,
};

use crate::manifest::{Manifest, Stamp};
use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    /// Contrastive loss plus the rank penalty.
    Biased,
    /// Contrastive loss only.
    Main,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    LinearEval,
    Semisup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Job {
    DataGen {
        gen: GenConfig,
        n_test: usize,
    },
    DataCmnist {
        images: PathBuf,
        labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        bias_ratio: f64,
        seed: u64,
    },
    Pretrain {
        role: Role,
        config: ExperimentConfig,
        seed: u64,
    },
    Debias {
        biased: PathBuf,
        main: PathBuf,
        mode: Mode,
        config: ExperimentConfig,
        seed: u64,
    },
    Spectrum {
        checkpoint: PathBuf,
        split: Split,
        top: usize,
        max_rows: usize,
        config: ExperimentConfig,
        seed: u64,
    },
    Erm {
        config: ExperimentConfig,
        seed: u64,
    },
    Sweep {
        spec: SweepSpec,
    },
}

fn dataset_files(spec: &DatasetSpec) -> Vec<PathBuf> {
    match spec {
        DatasetSpec::ColorPoints { .. } => Vec::new(),
        DatasetSpec::Cmnist {
            images,
            labels,
            test_images,
            test_labels,
            ..
        } => vec![
            images.clone(),
            labels.clone(),
            test_images.clone(),
            test_labels.clone(),
        ],
        DatasetSpec::Directory { path, .. } => ["train", "test"]
            .iter()
            .flat_map(|part| {
                ["meta.json", "inputs.csv", "labels.csv"]
                    .iter()
                    .map(move |f| path.join(part).join(f))
            })
            .collect(),
    }
}

fn checkpoint_files(p: &Path) -> Vec<PathBuf> {
    vec![p.to_path_buf(), checkpoint::sidecar_path(p)]
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::DataGen { .. } => "data-gen",
            Job::DataCmnist { .. } => "data-cmnist",
            Job::Pretrain { .. } => "pretrain",
            Job::Debias { .. } => "debias",
            Job::Spectrum { .. } => "spectrum",
            Job::Erm { .. } => "erm",
            Job::Sweep { .. } => "sweep",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Job::DataGen { gen, .. } => Some(gen.seed),
            Job::DataCmnist { seed, .. }
            | Job::Pretrain { seed, .. }
            | Job::Debias { seed, .. }
            | Job::Spectrum { seed, .. }
            | Job::Erm { seed, .. } => Some(*seed),
            Job::Sweep { .. } => None,
        }
    }

    /// Files whose contents determine the job's outputs.
    pub fn input_files(&self) -> Vec<PathBuf> {
        match self {
            Job::DataGen { .. } => Vec::new(),
            Job::DataCmnist {
                images,
                labels,
                test_images,
                test_labels,
                ..
            } => [Some(images), Some(labels), test_images.as_ref(), test_labels.as_ref()]
                .into_iter()
                .flatten()
                .cloned()
                .collect(),
            Job::Pretrain { config, .. } | Job::Erm { config, .. } => dataset_files(&config.dataset),
            Job::Debias {
                biased,
                main,
                config,
                ..
            } => {
                let mut v = dataset_files(&config.dataset);
                v.extend(checkpoint_files(biased));
                v.extend(checkpoint_files(main));
                v
            }
            Job::Spectrum {
                checkpoint, config, ..
            } => {
                let mut v = dataset_files(&config.dataset);
                v.extend(checkpoint_files(checkpoint));
                v
            }
            Job::Sweep { spec } => dataset_files(&spec.base.dataset),
        }
    }

    /// Runs the job into `dir` and writes its manifest there.
    pub fn run(&self, dir: &Path) -> Result<Manifest, Failure> {
        let stamp = Stamp::new(self)?;
        fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
        let hash = stamp.manifest_hash.clone();
        let mut out = Outputs::new(dir);
        let result = match self {
            Job::DataGen { gen, n_test } => data_gen(gen, *n_test, &mut out),
            Job::DataCmnist {
                images,
                labels,
                test_images,
                test_labels,
                bias_ratio,
                seed,
            } => data_cmnist(
                images,
                labels,
                test_images.as_deref().zip(test_labels.as_deref()),
                *bias_ratio,
                *seed,
                &mut out,
            ),
            Job::Pretrain { role, config, seed } => pretrain(*role, config, *seed, &hash, &mut out),
            Job::Debias {
                biased,
                main,
                mode,
                config,
                seed,
            } => debias(biased, main, *mode, config, *seed, &hash, &mut out),
            Job::Spectrum {
                checkpoint,
                split,
                top,
                max_rows,
                config,
                seed,
            } => spectrum(checkpoint, *split, *top, *max_rows, config, *seed, &hash, &mut out),
            Job::Erm { config, seed } => erm(config, *seed, &hash, &mut out),
            Job::Sweep { spec } => sweep(spec, &hash, &mut out),
        };
        // The manifest is written even when the job failed part-way, so
        // partial outputs (e.g. a diverged training log) stay attributable.
        let manifest = stamp.finish(self, dir, &out.written)?;
        result.map(|()| manifest)
    }
}

struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Failure::runtime(format!("{}: {e}", parent.display())))?;
        }
        fs::write(&p, contents).map_err(|e| Failure::runtime(format!("{}: {e}", p.display())))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
        self.write(name, text)
    }

    fn dataset(&mut self, name: &str, ds: &BiasedDataset) -> Result<(), Failure> {
        ds.save_dir(&self.path(name))?;
        for f in ["inputs.csv", "labels.csv", "meta.json"] {
            self.written.push(format!("{name}/{f}"));
        }
        Ok(())
    }

    fn checkpoint(&mut self, name: &str, net: &DenseNet, training: serde_json::Value) -> Result<(), Failure> {
        let p = self.path(name);
        checkpoint::save(&p, net, training)?;
        self.written.push(name.to_string());
        let side = checkpoint::sidecar_path(Path::new(name));
        self.written.push(side.to_string_lossy().into_owned());
        Ok(())
    }
}

#[derive(Serialize)]
struct DataSummary {
    n: usize,
    classes: usize,
    bias_ratio: f64,
    aligned: usize,
    conflicting: usize,
    /// `group_counts[y][b]`.
    group_counts: Vec<Vec<usize>>,
    n_test: Option<usize>,
}

fn summarize(train: &BiasedDataset, test: Option<&BiasedDataset>) -> DataSummary {
    DataSummary {
        n: train.len(),
        classes: train.num_classes(),
        bias_ratio: train.bias_ratio(),
        aligned: train.aligned_count(),
        conflicting: train.len() - train.aligned_count(),
        group_counts: train.group_counts().0,
        n_test: test.map(BiasedDataset::len),
    }
}

fn print_summary(s: &DataSummary) {
    println!(
        "n = {}, C = {}, r = {}, aligned = {}, conflicting = {}",
        s.n, s.classes, s.bias_ratio, s.aligned, s.conflicting
    );
    for (y, row) in s.group_counts.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        println!("  y = {y}: {}", cells.join(" "));
    }
    if let Some(n) = s.n_test {
        println!("unbiased test set: {n}");
    }
}

fn data_gen(gen: &GenConfig, n_test: usize, out: &mut Outputs) -> Result<(), Failure> {
    // Same construction as a generated `DatasetSpec`, so `--data DIR` and an
    // inline spec with the same seed see identical data.
    let train = gen_colorpoints(gen)?;
    let test_seed = stream_key(gen.seed, "test");
    let test = make_unbiased_testset(
        &gen_colorpoints(&GenConfig {
            n: n_test,
            seed: test_seed,
            ..gen.clone()
        })?,
        test_seed,
    )?;
    out.dataset("train", &train)?;
    out.dataset("test", &test)?;
    let s = summarize(&train, Some(&test));
    out.json("summary.json", &s)?;
    print_summary(&s);
    Ok(())
}

fn data_cmnist(
    images: &Path,
    labels: &Path,
    test: Option<(&Path, &Path)>,
    r: f64,
    seed: u64,
    out: &mut Outputs,
) -> Result<(), Failure> {
    let train = cmnist_from_idx(images, labels, r, seed)?;
    out.dataset("train", &train)?;
    let test = match test {
        Some((ti, tl)) => {
            let test_seed = stream_key(seed, "test");
            let t = make_unbiased_testset(&cmnist_from_idx(ti, tl, 1.0, test_seed)?, test_seed)?;
            out.dataset("test", &t)?;
            Some(t)
        }
        None => None,
    };
    let s = summarize(&train, test.as_ref());
    out.json("summary.json", &s)?;
    print_summary(&s);
    Ok(())
}

fn pretrain(role: Role, config: &ExperimentConfig, seed: u64, hash: &str, out: &mut Outputs) -> Result<(), Failure> {
    config.validate()?;
    let (train, _) = config.dataset.materialize(seed)?;
    let lambda_reg = match role {
        Role::Biased => config.lambda_reg,
        Role::Main => 0.0,
    };
    let mut log = TrainLog::default();
    let trained = pretrain_with_log(train.inputs(), &config.augment_config(), config, lambda_reg, seed, &mut log);
    out.write("log.csv", log.to_csv())?;
    let (encoder, projection) = trained?;
    let meta = serde_json::json!({
        "manifest": hash,
        "role": role,
        "lambda_reg": lambda_reg,
        "seed": seed,
        "epochs": log.epochs.len(),
    });
    out.checkpoint("encoder.bin", &encoder, meta.clone())?;
    out.checkpoint("projection.bin", &projection, meta)?;
    if let Some(last) = log.epochs.last() {
        println!("{} epochs, final loss {:.6}, eff_rank {:.6}", log.epochs.len(), last.loss, last.eff_rank);
    }
    Ok(())
}

fn load_encoder(path: &Path, input_dim: usize, what: &str) -> Result<DenseNet, Failure> {
    let (net, _) = checkpoint::load(path)?;
    if net.input_dim() != input_dim {
        return Err(Failure::usage(format!(
            "{}: {what} encoder has layer dims {:?} (input {}), but the dataset has {input_dim} input features",
            path.display(),
            net.dims(),
            net.input_dim()
        )));
    }
    Ok(net)
}

fn write_indices(out: &mut Outputs, name: &str, indices: &[usize]) -> Result<(), Failure> {
    let mut text = String::from("index\n");
    for k in indices {
        writeln!(text, "{k}").expect("string write");
    }
    out.write(name, text)
}

#[derive(Serialize)]
struct DebiasReport<'a> {
    manifest: &'a str,
    mode: Mode,
    lambda_up: f64,
    label_fraction: f64,
    labeled: usize,
    error_set_size: usize,
    metrics: MetricsReport,
}

fn debias(
    biased: &Path,
    main: &Path,
    mode: Mode,
    config: &ExperimentConfig,
    seed: u64,
    hash: &str,
    out: &mut Outputs,
) -> Result<(), Failure> {
    config.validate()?;
    let (train, test) = config.dataset.materialize(seed)?;
    let biased = load_encoder(biased, train.input_dim(), "biased")?;
    let main = load_encoder(main, train.input_dim(), "main")?;
    let (dl, _) = label_fraction_split(&train, config.label_fraction, seed)?;
    let error_set = identify_error_set(&biased, &dl, &config.probe, seed)?;
    let mut model = debiased_linear_eval(&main, &dl, &error_set, config.lambda_up, &config.probe, seed)?;
    if mode == Mode::Semisup {
        model = finetune_semisup(&model, &dl, &error_set, config.lambda_up, &config.semisup, seed)?;
    }
    let (p, r) = error_set_quality(&error_set.indices, &dl)?;
    let metrics = evaluate(&model, &test)?.with_error_set_quality(p, r);
    print_metrics(&metrics);
    write_indices(out, "error_set.csv", &error_set.indices)?;
    out.json(
        "metrics.json",
        &DebiasReport {
            manifest: hash,
            mode,
            lambda_up: config.lambda_up,
            label_fraction: config.label_fraction,
            labeled: dl.len(),
            error_set_size: error_set.len(),
            metrics,
        },
    )
}

fn print_metrics(m: &MetricsReport) {
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.2}"));
    println!(
        "unbiased {:.2}  conflict {}  aligned {}  eff_rank {:.4}  precision {}  recall {}",
        m.unbiased_acc,
        pct(m.bias_conflict_acc),
        pct(m.bias_aligned_acc),
        m.effective_rank,
        pct(m.precision),
        pct(m.recall)
    );
}

#[derive(Serialize)]
struct SpectrumSummary<'a> {
    manifest: &'a str,
    rows: usize,
    dims: usize,
    effective_rank: f64,
    /// Mean over consecutive row batches, as in the training monitors.
    batch_effective_rank: f64,
    /// Original feature index of each row/column of `correlation.csv`.
    order: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
fn spectrum(
    ckpt: &Path,
    split: Split,
    top: usize,
    max_rows: usize,
    config: &ExperimentConfig,
    seed: u64,
    hash: &str,
    out: &mut Outputs,
) -> Result<(), Failure> {
    let (train, test) = config.dataset.materialize(seed)?;
    let ds = match split {
        Split::Train => train,
        Split::Test => test,
    };
    let encoder = load_encoder(ckpt, ds.input_dim(), "checkpoint")?;
    let rows = ds.len().min(max_rows);
    let ds = if rows < ds.len() {
        ds.select(&(0..rows).collect::<Vec<_>>())
    } else {
        ds
    };
    let z = encoder.predict(ds.inputs())?;
    let sigma = svd_values(z.view())?;
    let rho = effective_rank(&sigma)?;
    let normalized = normalized_spectrum(&sigma)?;
    let mut text = String::from("index,singular_value,normalized\n");
    for (k, (s, n)) in sigma.values().iter().zip(&normalized).take(top).enumerate() {
        writeln!(text, "{k},{s:.12e},{n:.12e}").expect("string write");
    }
    out.write("spectrum.csv", text)?;

    let corr = auto_correlation(z.view())?;
    let order = cluster_reorder(&corr);
    let reordered = corr.permuted(&order);
    let mut text = String::new();
    for row in reordered.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.12e}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    out.write("correlation.csv", text)?;

    let summary = SpectrumSummary {
        manifest: hash,
        rows,
        dims: z.ncols(),
        effective_rank: rho,
        batch_effective_rank: mean_effective_rank(z.view(), RANK_BATCH)?,
        order,
    };
    out.json("summary.json", &summary)?;
    println!("effective_rank = {rho:e}");
    Ok(())
}

#[derive(Serialize)]
struct ErmReport<'a> {
    manifest: &'a str,
    lambda_reg: f64,
    error_set_size: usize,
    metrics: &'a MetricsReport,
}

fn erm(config: &ExperimentConfig, seed: u64, hash: &str, out: &mut Outputs) -> Result<(), Failure> {
    config.validate()?;
    let o = run_erm(config, seed)?;
    print_metrics(&o.report);
    out.write("log.csv", o.log.to_csv())?;
    write_indices(out, "error_set.csv", &o.error_set.indices)?;
    let meta = serde_json::json!({"manifest": hash, "lambda_reg": config.lambda_reg, "seed": seed});
    out.checkpoint("encoder.bin", &o.model.encoder, meta.clone())?;
    out.checkpoint("head.bin", o.model.head.net(), meta)?;
    out.json(
        "metrics.json",
        &ErmReport {
            manifest: hash,
            lambda_reg: config.lambda_reg,
            error_set_size: o.error_set.len(),
            metrics: &o.report,
        },
    )
}

pub const SUMMARY_COLUMNS: [&str; 15] = [
    "config_hash",
    "r",
    "lambda_reg",
    "lambda_up",
    "tau",
    "seeds",
    "conflict_acc_mean",
    "conflict_acc_std",
    "aligned_acc_mean",
    "aligned_acc_std",
    "unbiased_acc_mean",
    "unbiased_acc_std",
    "eff_rank_mean",
    "precision_mean",
    "recall_mean",
];

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// One line per configuration (successful seeds only), in first-seen order.
fn summary_csv(rows: &[SweepRow]) -> String {
    let mut text = SUMMARY_COLUMNS.join(",") + "\n";
    let mut seen: Vec<&str> = Vec::new();
    for r in rows.iter().filter(|r| r.ok()) {
        if seen.contains(&r.config_hash.as_str()) {
            continue;
        }
        seen.push(&r.config_hash);
        let group: Vec<&SweepRow> = rows.iter().filter(|g| g.ok() && g.config_hash == r.config_hash).collect();
        let col = |f: fn(&SweepRow) -> f64| mean_std(&group.iter().map(|g| f(g)).collect::<Vec<_>>());
        let (cm, cs) = col(|g| g.conflict_acc);
        let (am, as_) = col(|g| g.aligned_acc);
        let (um, us) = col(|g| g.unbiased_acc);
        let (em, _) = col(|g| g.eff_rank);
        let (pm, _) = col(|g| g.precision);
        let (rm, _) = col(|g| g.recall);
        writeln!(
            text,
            "{},{:e},{:e},{:e},{:e},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.config_hash,
            r.r,
            r.lambda_reg,
            r.lambda_up,
            r.tau,
            group.len(),
            cm,
            cs,
            am,
            as_,
            um,
            us,
            em,
            pm,
            rm
        )
        .expect("string write");
    }
    text
}

fn sweep(spec: &SweepSpec, hash: &str, out: &mut Outputs) -> Result<(), Failure> {
    let rows = run_sweep(spec)?;
    let mut csv = Vec::new();
    write_sweep_csv(&rows, &mut csv).expect("in-memory write");
    out.write("sweep.csv", csv)?;
    out.write("summary.csv", summary_csv(&rows))?;
    let selection = select(&rows);
    out.json(
        "selection.json",
        &serde_json::json!({"manifest": hash, "experiment": spec.experiment, "selected": selection}),
    )?;
    let failed: Vec<&SweepRow> = rows.iter().filter(|r| !r.ok()).collect();
    println!("{} jobs, {} failed", rows.len(), failed.len());
    for s in &selection {
        println!(
            "r = {}, tau = {}: {} (lambda_reg {}, lambda_up {}), conflict {:.2}, unbiased {:.2}",
            s.r, s.tau, s.config_hash, s.lambda_reg, s.lambda_up, s.mean_conflict_acc, s.mean_unbiased_acc
        );
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::runtime(format!(
            "{} of {} sweep jobs failed; first: seed {} ({})",
            failed.len(),
            rows.len(),
            failed[0].seed,
            failed[0].status
        )))
    }
}
