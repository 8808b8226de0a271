//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Criteria 4-10 train real models and take several
//! minutes on one core.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use rankdebias::data::{AugmentConfig, VectorAugment};
use rankdebias::losses::{cross_entropy, debias_loss, nt_xent, ContrastiveBatch, UpweightSpec};
use rankdebias::pipeline::{
    bias_metric, pretrain_biased, pretrain_main, rank_trajectory, run_ablation, run_erm,
    run_semisup, DatasetSpec, ExperimentConfig, ProbeConfig,
};
use rankdebias::rng;
use rankdebias::spectral::{effective_rank, svd_values};

const SEEDS: [u64; 4] = [0, 1, 2, 3];
const RATIOS: [f64; 4] = [0.95, 0.98, 0.99, 0.995];

type FdInstance = fn(u64) -> f64;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_list(xs: &[f64], digits: usize) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.digits$}")).collect();
    format!("[{}]", parts.join(", "))
}

fn color_points(noise: f64, modes: usize, color_scale: f64) -> DatasetSpec {
    DatasetSpec::ColorPoints {
        n: 10_000,
        n_test: 2000,
        classes: 10,
        bias_ratio: 0.99,
        noise,
        input_dim: 35,
        modes,
        color_scale,
        color_noise: 0.05,
    }
}

/// Supervised MLP runs (criteria 4-7).
fn erm_config(l2: f64, dataset: DatasetSpec) -> ExperimentConfig {
    ExperimentConfig {
        hidden: vec![64, 64],
        latent_dim: 32,
        epochs: 50,
        warmup_epochs: 1,
        base_lr: 1e-3,
        l2,
        dataset,
        ..ExperimentConfig::default()
    }
}

/// Contrastive pretraining runs (criteria 8-10).
fn pretrain_config() -> ExperimentConfig {
    ExperimentConfig {
        lambda_reg: 0.3,
        lambda_up: 50.0,
        augment: Some(AugmentConfig::Vector(VectorAugment {
            noise_std: 0.1,
            dropout: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
        })),
        hidden: vec![64, 64],
        latent_dim: 32,
        projection_hidden: 32,
        projection_dim: 16,
        epochs: 30,
        warmup_epochs: 1,
        base_lr: 1e-3,
        l2: 1e-4,
        probe: ProbeConfig {
            iterations: 10_000,
            lr: 0.01,
            batch_size: 256,
            l2: 0.0,
        },
        dataset: color_points(0.15, 4, 6.0),
        ..ExperimentConfig::default()
    }
}

fn spectral_oracle() -> Verdict {
    let start = Instant::now();
    let mut r = rng::stream(2024, "svd-oracle");
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let m = support::random_matrix(&mut r);
        let ours = effective_rank(&svd_values(m.view()).unwrap()).unwrap();
        let oracle = support::oracle_entropy(&support::oracle_singular_values(&m));
        worst = worst.max((ours - oracle).abs());
    }
    let mut identity_exact = true;
    for (r, c) in [(1, 1), (7, 3), (16, 16), (40, 64), (64, 64)] {
        let m = Array2::from_shape_fn((r, c), |(i, j)| f64::from(u8::from(i == j)));
        let rho = effective_rank(&svd_values(m.view()).unwrap()).unwrap();
        identity_exact &= rho == (r.min(c) as f64).ln();
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-9 && identity_exact && secs < 10.0,
        format!("max |diff| {worst:.2e} over 200 matrices, identity exact: {identity_exact}, {secs:.2} s"),
    )
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let checks: [(&str, FdInstance); 5] = [
        ("rank_loss", support::rank_loss_fd),
        ("nt_xent", support::nt_xent_fd),
        ("cross_entropy", support::cross_entropy_fd),
        ("debias_loss", support::debias_loss_fd),
        ("stage1 composite", support::stage1_composite_fd),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, instance) in checks {
        let worst = (0..100).map(instance).fold(0.0, f64::max);
        pass &= worst < support::TOL;
        parts.push(format!("{name} {worst:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    verdict(pass, format!("worst relative error over 100 instances: {}; {secs:.1} s", parts.join(", ")))
}

fn degenerate_identities() -> Verdict {
    let mut parts = Vec::new();

    let mut worst: f64 = 0.0;
    for n in [2usize, 3, 8, 64] {
        let h = Array2::from_elem((2 * n, 5), 0.7);
        let loss = nt_xent(&ContrastiveBatch::new(h.view(), 0.5).unwrap()).unwrap().loss;
        worst = worst.max((loss - ((2 * n - 1) as f64).ln()).abs());
    }
    let ntx = worst <= 1e-12;
    parts.push(format!("nt_xent vs ln(2n-1) {worst:.1e}"));

    let mut r = rng::stream(3, "identity-ce");
    let logits = support::gaussian(50, 7, &mut r) * 3.0;
    let labels: Vec<usize> = (0..50).map(|k| (k * 3) % 7).collect();
    let ce = cross_entropy(logits.view(), &labels).unwrap();
    let db = debias_loss(logits.view(), &labels, &UpweightSpec::new(vec![], 1.0).unwrap()).unwrap();
    let ce_same = ce.loss.to_bits() == db.loss.to_bits()
        && ce.grad.iter().zip(&db.grad).all(|(a, b)| a.to_bits() == b.to_bits());
    parts.push(format!("unit upweight == cross-entropy bitwise: {ce_same}"));

    let cfg = ExperimentConfig {
        epochs: 3,
        warmup_epochs: 1,
        hidden: vec![32],
        latent_dim: 16,
        projection_hidden: 16,
        projection_dim: 8,
        lambda_reg: 0.0,
        dataset: DatasetSpec::ColorPoints {
            n: 1000,
            n_test: 200,
            classes: 10,
            bias_ratio: 0.99,
            noise: 0.15,
            input_dim: 35,
            modes: 4,
            color_scale: 6.0,
            color_noise: 0.05,
        },
        ..ExperimentConfig::default()
    };
    let (train, _) = cfg.dataset.materialize(11).unwrap();
    let aug = cfg.augment_config();
    let biased = pretrain_biased(train.inputs(), &aug, &cfg, 11).unwrap();
    let main = pretrain_main(train.inputs(), &aug, &cfg, 11).unwrap();
    let same = biased == main;
    parts.push(format!("biased(lambda_reg 0) == main bitwise: {same}"));

    verdict(ntx && ce_same && same, parts.join("; "))
}

fn rank_and_accuracy_vs_bias() -> (Verdict, Verdict) {
    let start = Instant::now();
    let cfg = erm_config(3e-3, color_points(0.1, 8, 4.0));
    let mut rank = [0.0; 4];
    let mut acc = [0.0; 4];
    for &s in &SEEDS {
        for (k, row) in rank_trajectory(&cfg, &RATIOS, s, false).unwrap().iter().enumerate() {
            rank[k] += row.effective_rank / SEEDS.len() as f64;
            acc[k] += row.unbiased_acc / SEEDS.len() as f64;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let rank_monotone = rank.windows(2).all(|w| w[1] <= w[0]);
    let drop = (rank[0] - rank[3]) / rank[0];
    let c4 = verdict(
        rank_monotone && drop >= 0.10 && secs <= 900.0,
        format!(
            "4-seed mean effective rank over r {RATIOS:?}: {}, drop {:.1}%, {secs:.0} s",
            fmt_list(&rank, 3),
            100.0 * drop
        ),
    );
    let acc_strict = acc.windows(2).all(|w| w[1] < w[0]);
    let c5 = verdict(
        acc_strict && acc[3] < 0.5 * acc[0],
        format!(
            "4-seed mean unbiased accuracy: {}, ratio {:.2}",
            fmt_list(&acc, 2),
            acc[3] / acc[0]
        ),
    );
    (c4, c5)
}

fn rank_regularized_erm() -> (Verdict, Verdict) {
    let lambdas = [0.0, 0.003, 0.03];
    let seeds = [0u64, 1];
    let base = erm_config(1e-4, color_points(0.15, 4, 4.0));
    let mut conflict = [0.0; 3];
    let mut aligned = [0.0; 3];
    let mut precision = [0.0; 3];
    let mut recall = [0.0; 3];
    for (k, &l) in lambdas.iter().enumerate() {
        let cfg = ExperimentConfig {
            lambda_reg: l,
            ..base.clone()
        };
        for &s in &seeds {
            let m = run_erm(&cfg, s).unwrap().report;
            let w = 1.0 / seeds.len() as f64;
            conflict[k] += w * m.bias_conflict_acc.unwrap();
            aligned[k] += w * m.bias_aligned_acc.unwrap();
            precision[k] += w * m.precision.unwrap_or(0.0);
            recall[k] += w * m.recall.unwrap();
        }
    }
    let c6 = verdict(
        conflict[0] - conflict[2] >= 20.0 && aligned[0] - aligned[2] <= 10.0,
        format!(
            "lambda_reg {lambdas:?}, 2-seed means: conflict {}, aligned {}",
            fmt_list(&conflict, 1),
            fmt_list(&aligned, 1)
        ),
    );
    let c7 = verdict(
        recall[2] - recall[0] >= 30.0 && precision[0] - precision[2] <= 10.0,
        format!(
            "error-set recall {:.1} -> {:.1}, precision {:.1} -> {:.1} (lambda_reg 0 -> {})",
            recall[0], recall[2], precision[0], precision[2], lambdas[2]
        ),
    );
    (c6, c7)
}

fn ablation_ordering() -> Verdict {
    let cfg = pretrain_config();
    let runs: Vec<_> = SEEDS.iter().map(|&s| run_ablation(&cfg, s).unwrap()).collect();
    let base = mean(runs.iter().map(|o| o.baseline.bias_conflict_acc.unwrap()));
    let upw = mean(runs.iter().map(|o| o.upweight_main.bias_conflict_acc.unwrap()));
    let defund = mean(runs.iter().map(|o| o.defund.bias_conflict_acc.unwrap()));
    verdict(
        upw - base >= 2.0 && defund - upw >= 2.0,
        format!("4-seed mean conflict accuracy: baseline {base:.2}, upweight(main E) {upw:.2}, full {defund:.2}"),
    )
}

fn semisupervised() -> Verdict {
    let cfg = ExperimentConfig {
        label_fraction: 0.1,
        ..pretrain_config()
    };
    let runs: Vec<_> = SEEDS.iter().map(|&s| run_semisup(&cfg, s).unwrap()).collect();
    let ours = mean(runs.iter().map(|o| o.defund.bias_conflict_acc.unwrap()));
    let scratch = mean(runs.iter().map(|o| o.scratch_erm.bias_conflict_acc.unwrap()));
    verdict(
        ours - scratch >= 3.0,
        format!(
            "10% labels ({} samples), 4-seed mean conflict accuracy: debiased {ours:.2} vs scratch ERM {scratch:.2}",
            runs[0].labeled
        ),
    )
}

fn bias_metric_monotonicity() -> Verdict {
    let lambdas = [0.0, 0.1, 0.3, 1.0];
    let base = pretrain_config();
    let mut means = [0.0; 4];
    for &s in &SEEDS {
        let (train, test) = base.dataset.materialize(s).unwrap();
        let aug = base.augment_config();
        for (k, &l) in lambdas.iter().enumerate() {
            let cfg = ExperimentConfig {
                lambda_reg: l,
                ..base.clone()
            };
            let p = pretrain_biased(train.inputs(), &aug, &cfg, s).unwrap();
            means[k] += bias_metric(&p.encoder, &test, &cfg.probe, s).unwrap() / SEEDS.len() as f64;
        }
    }
    verdict(
        means.windows(2).all(|w| w[1] >= w[0]),
        format!("lambda_reg {lambdas:?}: 4-seed mean bias metric {}", fmt_list(&means, 3)),
    )
}

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_rankdebias"))
        .env_remove("RANKDEBIAS_OUT")
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
    }
}

const PIPELINE: &[&[&str]] = &[
    &["data", "gen", "--n", "1500", "--n-test", "500", "--seed", "2", "--out", "data"],
    &["pretrain", "--role", "biased", "--data", "data", "--config", "cfg.json", "--out", "pb"],
    &["pretrain", "--role", "main", "--data", "data", "--config", "cfg.json", "--out", "pm"],
    &[
        "debias", "--biased", "pb/encoder.bin", "--main", "pm/encoder.bin", "--data", "data",
        "--config", "cfg.json", "--mode", "semisup", "--label-fraction", "0.2", "--out", "db",
    ],
    &["spectrum", "--checkpoint", "pb/encoder.bin", "--data", "data", "--config", "cfg.json", "--out", "sp"],
    &["erm", "--data", "data", "--config", "cfg.json", "--lambda-reg", "0.01", "--out", "erm"],
    &["sweep", "--spec", "sweep.json", "--out", "sw"],
];

const OUT_DIRS: [&str; 7] = ["data", "pb", "pm", "db", "sp", "erm", "sw"];

/// Every file under `root`, with manifests stripped of their wall-clock block.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
                continue;
            }
            let rel = p.strip_prefix(root).unwrap().display().to_string();
            let mut bytes = fs::read(&p).unwrap();
            if p.file_name().is_some_and(|n| n == "manifest.json") {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v.as_object_mut().unwrap().remove("wall_clock");
                bytes = serde_json::to_vec(&v).unwrap();
            }
            out.insert(rel, bytes);
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn execute_pipeline(dir: &Path) -> Result<(), String> {
    let cfg = serde_json::json!({
        "epochs": 3, "warmup_epochs": 1, "hidden": [32], "latent_dim": 16,
        "projection_hidden": 16, "projection_dim": 8, "lambda_reg": 0.3, "lambda_up": 8,
        "probe": {"iterations": 300}, "semisup": {"iterations": 100}
    });
    fs::write(dir.join("cfg.json"), cfg.to_string()).map_err(|e| e.to_string())?;
    let mut base = cfg.clone();
    base["dataset"] = serde_json::json!({
        "kind": "color-points", "n": 500, "n_test": 300, "classes": 10, "bias_ratio": 0.95,
        "noise": 0.15, "input_dim": 19, "modes": 4
    });
    let sweep = serde_json::json!({
        "experiment": "erm", "base": base, "lambda_reg": [0.0, 0.1], "seeds": [0, 1]
    });
    fs::write(dir.join("sweep.json"), sweep.to_string()).map_err(|e| e.to_string())?;
    PIPELINE.iter().try_for_each(|args| cli(dir, args))
}

fn determinism() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    if let Err(e) = execute_pipeline(a.path()).and_then(|_| execute_pipeline(b.path())) {
        return verdict(false, e);
    }
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    let mut differing: Vec<&String> = sa.keys().filter(|k| sa.get(*k) != sb.get(*k)).collect();
    differing.extend(sb.keys().filter(|k| !sa.contains_key(*k)));

    // Replaying each recorded manifest reproduces that step's outputs.
    let mut replay_mismatch = Vec::new();
    for name in OUT_DIRS {
        let out = format!("replay-{name}");
        let manifest = format!("{name}/manifest.json");
        if let Err(e) = cli(a.path(), &["replay", &manifest, "--out", &out]) {
            return verdict(false, e);
        }
        let original = snapshot(&a.path().join(name));
        let replayed = snapshot(&a.path().join(&out));
        if original != replayed {
            replay_mismatch.push(name);
        }
    }
    let files = sa.len();
    verdict(
        differing.is_empty() && replay_mismatch.is_empty(),
        format!(
            "{files} files over {} CLI steps; differing between runs: {differing:?}; replay mismatches: {replay_mismatch:?}",
            PIPELINE.len()
        ),
    )
}

fn report(id: usize, name: &str, v: &Verdict, failed: &mut usize) {
    let tag = if v.pass { "PASS" } else { "FAIL" };
    println!("criterion {id:>2} [{name}] {tag}: {}", v.detail);
    if !v.pass {
        *failed += 1;
    }
}

fn main() {
    // Under `cargo test -- --list` and similar, only a listing is expected.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let start = Instant::now();
    let mut failed = 0;
    report(1, "spectral oracle", &spectral_oracle(), &mut failed);
    report(2, "gradient suite", &gradient_suite(), &mut failed);
    report(3, "degenerate identities", &degenerate_identities(), &mut failed);
    let (c4, c5) = rank_and_accuracy_vs_bias();
    report(4, "rank vs bias", &c4, &mut failed);
    report(5, "accuracy vs bias", &c5, &mut failed);
    let (c6, c7) = rank_regularized_erm();
    report(6, "rank regularization biases ERM", &c6, &mut failed);
    report(7, "error-set mining", &c7, &mut failed);
    report(8, "ablation ordering", &ablation_ordering(), &mut failed);
    report(9, "semi-supervised", &semisupervised(), &mut failed);
    report(10, "bias-metric monotonicity", &bias_metric_monotonicity(), &mut failed);
    report(11, "determinism", &determinism(), &mut failed);
    println!(
        "acceptance: {} of 11 criteria passed in {:.0} s",
        11 - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
