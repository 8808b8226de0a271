use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::experiments::{run_defund, run_erm, run_semisup};
use super::metrics::MetricsReport;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Supervised ERM with rank regularization; error set = training mistakes.
    #[default]
    Erm,
    /// Both stages with debiased linear evaluation.
    Defund,
    /// Both stages with semi-supervised finetuning on `label_fraction` labels.
    Semisup,
}

/// Cross-product sweep. An empty list keeps the base config's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub experiment: ExperimentKind,
    pub base: ExperimentConfig,
    pub bias_ratios: Vec<f64>,
    pub lambda_reg: Vec<f64>,
    pub lambda_up: Vec<f64>,
    pub temperature: Vec<f64>,
    pub seeds: Vec<u64>,
}

fn or_base<T: Copy>(list: &[T], base: T) -> Vec<T> {
    if list.is_empty() {
        vec![base]
    } else {
        list.to_vec()
    }
}

impl SweepSpec {
    /// Every `(config, seed)` job in a fixed order: r, lambda_reg, lambda_up,
    /// temperature, seed (last varies fastest).
    pub fn jobs(&self) -> Vec<(ExperimentConfig, u64)> {
        let b = &self.base;
        let mut out = Vec::new();
        for r in or_base(&self.bias_ratios, b.dataset.bias_ratio()) {
            for lr in or_base(&self.lambda_reg, b.lambda_reg) {
                for lu in or_base(&self.lambda_up, b.lambda_up) {
                    for t in or_base(&self.temperature, b.temperature) {
                        let seeds = if self.seeds.is_empty() {
                            b.seeds.clone()
                        } else {
                            self.seeds.clone()
                        };
                        for seed in seeds {
                            let cfg = ExperimentConfig {
                                lambda_reg: lr,
                                lambda_up: lu,
                                temperature: t,
                                dataset: b.dataset.with_bias_ratio(r),
                                seeds: vec![seed],
                                ..b.clone()
                            };
                            out.push((cfg, seed));
                        }
                    }
                }
            }
        }
        out
    }
}

/// First 16 hex digits of SHA-256 over the config's JSON with seeds removed,
/// so all seeds of one configuration share a hash.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let stripped = ExperimentConfig {
        seeds: Vec::new(),
        ..cfg.clone()
    };
    let json = serde_json::to_vec(&stripped).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub const SWEEP_COLUMNS: [&str; 13] = [
    "config_hash",
    "r",
    "lambda_reg",
    "lambda_up",
    "tau",
    "seed",
    "conflict_acc",
    "aligned_acc",
    "unbiased_acc",
    "eff_rank",
    "precision",
    "recall",
    "status",
];

/// One sweep job's outcome. Missing metrics (failed job, empty group,
/// empty error set) are NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config_hash: String,
    pub r: f64,
    pub lambda_reg: f64,
    pub lambda_up: f64,
    pub tau: f64,
    pub seed: u64,
    pub conflict_acc: f64,
    pub aligned_acc: f64,
    pub unbiased_acc: f64,
    pub eff_rank: f64,
    pub precision: f64,
    pub recall: f64,
    /// `"ok"` or the error message.
    pub status: String,
}

impl SweepRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

fn run_job(kind: ExperimentKind, cfg: &ExperimentConfig, seed: u64) -> Result<MetricsReport> {
    match kind {
        ExperimentKind::Erm => Ok(run_erm(cfg, seed)?.report),
        ExperimentKind::Defund => Ok(run_defund(cfg, seed)?.report),
        ExperimentKind::Semisup => Ok(run_semisup(cfg, seed)?.defund),
    }
}

fn row(
    kind: ExperimentKind,
    cfg: &ExperimentConfig,
    seed: u64,
    outcome: Result<MetricsReport>,
) -> SweepRow {
    let nan = f64::NAN;
    let mut row = SweepRow {
        config_hash: config_hash(cfg),
        r: cfg.dataset.bias_ratio(),
        lambda_reg: cfg.lambda_reg,
        // ERM never upweights, whatever the config says.
        lambda_up: match kind {
            ExperimentKind::Erm => 1.0,
            _ => cfg.lambda_up,
        },
        tau: cfg.temperature,
        seed,
        conflict_acc: nan,
        aligned_acc: nan,
        unbiased_acc: nan,
        eff_rank: nan,
        precision: nan,
        recall: nan,
        status: "ok".into(),
    };
    match outcome {
        Ok(m) => {
            row.conflict_acc = m.bias_conflict_acc.unwrap_or(nan);
            row.aligned_acc = m.bias_aligned_acc.unwrap_or(nan);
            row.unbiased_acc = m.unbiased_acc;
            row.eff_rank = m.effective_rank;
            row.precision = m.precision.unwrap_or(nan);
            row.recall = m.recall.unwrap_or(nan);
        }
        Err(e) => row.status = e.to_string(),
    }
    row
}

/// Runs every job (in parallel when threads are available) and returns rows
/// in job order.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    spec.base.validate()?;
    let jobs = spec.jobs();
    for (cfg, _) in &jobs {
        cfg.validate()?;
    }
    Ok(jobs
        .par_iter()
        .map(|(cfg, seed)| {
            log::info!("sweep job {} seed {seed}", config_hash(cfg));
            row(spec.experiment, cfg, *seed, run_job(spec.experiment, cfg, *seed))
        })
        .collect())
}

fn csv_field(v: f64) -> String {
    format!("{v:e}")
}

fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_sweep_csv(rows: &[SweepRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{}", SWEEP_COLUMNS.join(","))?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.config_hash,
            csv_field(r.r),
            csv_field(r.lambda_reg),
            csv_field(r.lambda_up),
            csv_field(r.tau),
            r.seed,
            csv_field(r.conflict_acc),
            csv_field(r.aligned_acc),
            csv_field(r.unbiased_acc),
            csv_field(r.eff_rank),
            csv_field(r.precision),
            csv_field(r.recall),
            csv_text(&r.status),
        )?;
    }
    Ok(())
}

/// Chosen configuration for one family (same r and tau).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub r: f64,
    pub tau: f64,
    pub config_hash: String,
    pub lambda_reg: f64,
    pub lambda_up: f64,
    pub mean_conflict_acc: f64,
    pub mean_unbiased_acc: f64,
    /// Seed-mean unbiased accuracy of the family's baseline
    /// (`lambda_reg = 0`, `lambda_up = 1`), if the sweep contains one.
    pub baseline_unbiased_acc: Option<f64>,
    /// False when no candidate beat the baseline and the rule fell back to
    /// the best conflict accuracy overall.
    pub improved: bool,
}

struct Aggregate {
    hash: String,
    r: f64,
    tau: f64,
    lambda_reg: f64,
    lambda_up: f64,
    conflict: f64,
    unbiased: f64,
}

fn best<'a>(xs: &[&'a Aggregate]) -> Option<&'a Aggregate> {
    xs.iter()
        .copied()
        .max_by(|a, b| a.conflict.total_cmp(&b.conflict))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Per family, the highest seed-mean conflict accuracy among configurations
/// whose unbiased accuracy beats the baseline's.
pub fn select(rows: &[SweepRow]) -> Vec<Selection> {
    let mut aggs: Vec<Aggregate> = Vec::new();
    let mut hashes: Vec<&str> = rows
        .iter()
        .filter(|r| r.ok())
        .map(|r| r.config_hash.as_str())
        .collect();
    hashes.dedup();
    let mut seen = std::collections::BTreeSet::new();
    for h in hashes {
        if !seen.insert(h) {
            continue;
        }
        let group: Vec<&SweepRow> = rows
            .iter()
            .filter(|r| r.ok() && r.config_hash == h)
            .collect();
        let first = group[0];
        let conflicts: Vec<f64> = group.iter().map(|r| r.conflict_acc).collect();
        let unbiased: Vec<f64> = group.iter().map(|r| r.unbiased_acc).collect();
        aggs.push(Aggregate {
            hash: h.to_string(),
            r: first.r,
            tau: first.tau,
            lambda_reg: first.lambda_reg,
            lambda_up: first.lambda_up,
            conflict: mean(&conflicts),
            unbiased: mean(&unbiased),
        });
    }
    let mut families: Vec<(f64, f64)> = Vec::new();
    for a in &aggs {
        if !families.iter().any(|&(r, t)| r == a.r && t == a.tau) {
            families.push((a.r, a.tau));
        }
    }
    families
        .into_iter()
        .filter_map(|(r, tau)| {
            let members: Vec<&Aggregate> =
                aggs.iter().filter(|a| a.r == r && a.tau == tau).collect();
            let baseline = members
                .iter()
                .find(|a| a.lambda_reg == 0.0 && a.lambda_up == 1.0)
                .map(|a| a.unbiased);
            let improved: Vec<&Aggregate> = match baseline {
                Some(base) => members
                    .iter()
                    .copied()
                    .filter(|a| a.unbiased > base)
                    .collect(),
                None => Vec::new(),
            };
            let (pick, ok) = match best(&improved) {
                Some(a) => (a, true),
                None => (best(&members)?, false),
            };
            Some(Selection {
                r,
                tau,
                config_hash: pick.hash.clone(),
                lambda_reg: pick.lambda_reg,
                lambda_up: pick.lambda_up,
                mean_conflict_acc: pick.conflict,
                mean_unbiased_acc: pick.unbiased,
                baseline_unbiased_acc: baseline,
                improved: ok,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(hash: &str, lr: f64, lu: f64, conflict: f64, unbiased: f64) -> SweepRow {
        SweepRow {
            config_hash: hash.into(),
            r: 0.99,
            lambda_reg: lr,
            lambda_up: lu,
            tau: 0.07,
            seed: 0,
            conflict_acc: conflict,
            aligned_acc: 90.0,
            unbiased_acc: unbiased,
            eff_rank: 1.0,
            precision: f64::NAN,
            recall: 0.0,
            status: "ok".into(),
        }
    }

    #[test]
    fn selection_prefers_improved_configs() {
        let rows = vec![
            row("base", 0.0, 1.0, 30.0, 50.0),
            row("a", 0.1, 4.0, 60.0, 55.0),
            row("b", 0.3, 8.0, 70.0, 45.0),
        ];
        let s = select(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].config_hash, "a");
        assert!(s[0].improved);
    }

    #[test]
    fn selection_falls_back_when_nothing_improves() {
        let rows = vec![
            row("base", 0.0, 1.0, 30.0, 60.0),
            row("b", 0.3, 8.0, 70.0, 45.0),
        ];
        let s = select(&rows);
        assert_eq!(s[0].config_hash, "b");
        assert!(!s[0].improved);
    }

    #[test]
    fn jobs_cover_cross_product() {
        let spec = SweepSpec {
            lambda_reg: vec![0.0, 0.5],
            seeds: vec![1, 2, 3],
            ..Default::default()
        };
        let jobs = spec.jobs();
        assert_eq!(jobs.len(), 6);
        assert_eq!(config_hash(&jobs[0].0), config_hash(&jobs[2].0));
        assert_ne!(config_hash(&jobs[0].0), config_hash(&jobs[3].0));
    }

    #[test]
    fn csv_header_and_nan() {
        let mut buf = Vec::new();
        write_sweep_csv(&[row("h", 0.0, 1.0, 1.0, 2.0)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), SWEEP_COLUMNS.join(","));
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields.len(), SWEEP_COLUMNS.len());
        assert_eq!(fields[10], "NaN");
    }
}
