use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::{error_set_quality, evaluate, MetricsReport};
use super::train::{
    debiased_linear_eval, erm_train, finetune_semisup, identify_error_set, pretrain_biased,
    pretrain_main, ErrorSet, Model, Pretrained, TrainLog,
};
use crate::data::{label_fraction_split, BiasedDataset};
use crate::error::Result;

pub struct ErmOutcome {
    pub model: Model,
    pub log: TrainLog,
    /// Test metrics, with precision/recall of `error_set` on the training set.
    pub report: MetricsReport,
    /// Training samples the trained model misclassifies.
    pub error_set: ErrorSet,
}

/// Supervised ERM with `cfg.lambda_reg` on the full biased training set.
pub fn run_erm(cfg: &ExperimentConfig, seed: u64) -> Result<ErmOutcome> {
    let (train, test) = cfg.dataset.materialize(seed)?;
    erm_on(&train, &test, cfg, cfg.lambda_reg, seed)
}

fn erm_on(
    train: &BiasedDataset,
    test: &BiasedDataset,
    cfg: &ExperimentConfig,
    lambda_reg: f64,
    seed: u64,
) -> Result<ErmOutcome> {
    let (model, log) = erm_train(train, cfg, lambda_reg, seed)?;
    let error_set = ErrorSet::from_predictions(model.predict(train.inputs())?, train.targets())?;
    let (p, r) = error_set_quality(&error_set.indices, train)?;
    let report = evaluate(&model, test)?.with_error_set_quality(p, r);
    Ok(ErmOutcome {
        model,
        log,
        report,
        error_set,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub bias_ratio: f64,
    pub effective_rank: f64,
    pub unbiased_acc: f64,
    pub bias_conflict_acc: Option<f64>,
    pub bias_aligned_acc: Option<f64>,
}

/// Plain ERM per bias ratio. With `reversed`, the bias label becomes the
/// training target (and vice versa).
pub fn rank_trajectory(
    cfg: &ExperimentConfig,
    ratios: &[f64],
    seed: u64,
    reversed: bool,
) -> Result<Vec<TrajectoryRow>> {
    ratios
        .iter()
        .map(|&r| {
            let spec = cfg.dataset.with_bias_ratio(r);
            let (mut train, mut test) = spec.materialize(seed)?;
            if reversed {
                train = train.swap_roles()?;
                test = test.swap_roles()?;
            }
            let out = erm_on(&train, &test, cfg, 0.0, seed)?;
            Ok(TrajectoryRow {
                bias_ratio: r,
                effective_rank: out.report.effective_rank,
                unbiased_acc: out.report.unbiased_acc,
                bias_conflict_acc: out.report.bias_conflict_acc,
                bias_aligned_acc: out.report.bias_aligned_acc,
            })
        })
        .collect()
}

pub struct DefundOutcome {
    pub biased: Pretrained,
    pub main: Pretrained,
    pub error_set: ErrorSet,
    pub model: Model,
    pub report: MetricsReport,
}

fn pretrain_pair(
    train: &BiasedDataset,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(Pretrained, Pretrained)> {
    let aug = cfg.augment_config();
    let biased = pretrain_biased(train.inputs(), &aug, cfg, seed)?;
    let main = pretrain_main(train.inputs(), &aug, cfg, seed)?;
    Ok((biased, main))
}

/// Both stages with debiased linear evaluation on the full labeled set.
pub fn run_defund(cfg: &ExperimentConfig, seed: u64) -> Result<DefundOutcome> {
    let (train, test) = cfg.dataset.materialize(seed)?;
    let (biased, main) = pretrain_pair(&train, cfg, seed)?;
    let error_set = identify_error_set(&biased.encoder, &train, &cfg.probe, seed)?;
    let model = debiased_linear_eval(
        &main.encoder,
        &train,
        &error_set,
        cfg.lambda_up,
        &cfg.probe,
        seed,
    )?;
    let (p, r) = error_set_quality(&error_set.indices, &train)?;
    let report = evaluate(&model, &test)?.with_error_set_quality(p, r);
    Ok(DefundOutcome {
        biased,
        main,
        error_set,
        model,
        report,
    })
}

/// Three arms sharing one pair of pretrained encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    /// Plain linear evaluation on the main encoder.
    pub baseline: MetricsReport,
    /// Upweighting with the error set mined from the main encoder.
    pub upweight_main: MetricsReport,
    /// Upweighting with the error set mined from the biased encoder.
    pub defund: MetricsReport,
}

pub fn run_ablation(cfg: &ExperimentConfig, seed: u64) -> Result<AblationOutcome> {
    let (train, test) = cfg.dataset.materialize(seed)?;
    let (biased, main) = pretrain_pair(&train, cfg, seed)?;
    let arm = |error_set: &ErrorSet, lambda_up: f64| -> Result<MetricsReport> {
        let model = debiased_linear_eval(
            &main.encoder,
            &train,
            error_set,
            lambda_up,
            &cfg.probe,
            seed,
        )?;
        let (p, r) = error_set_quality(&error_set.indices, &train)?;
        Ok(evaluate(&model, &test)?.with_error_set_quality(p, r))
    };
    let baseline = arm(&ErrorSet::empty(train.len()), 1.0)?;
    let e_main = identify_error_set(&main.encoder, &train, &cfg.probe, seed)?;
    let upweight_main = arm(&e_main, cfg.lambda_up)?;
    let e_biased = identify_error_set(&biased.encoder, &train, &cfg.probe, seed)?;
    let defund = arm(&e_biased, cfg.lambda_up)?;
    Ok(AblationOutcome {
        baseline,
        upweight_main,
        defund,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemisupOutcome {
    pub labeled: usize,
    pub defund: MetricsReport,
    /// Supervised ERM from random init on the same labeled subset.
    pub scratch_erm: MetricsReport,
}

/// Pretrains on every training input, then uses only a `cfg.label_fraction`
/// labeled subset: error set, debiased linear head, whole-model finetuning.
pub fn run_semisup(cfg: &ExperimentConfig, seed: u64) -> Result<SemisupOutcome> {
    let (train, test) = cfg.dataset.materialize(seed)?;
    let (dl, _du) = label_fraction_split(&train, cfg.label_fraction, seed)?;
    let (biased, main) = pretrain_pair(&train, cfg, seed)?;
    let error_set = identify_error_set(&biased.encoder, &dl, &cfg.probe, seed)?;
    let init = debiased_linear_eval(
        &main.encoder,
        &dl,
        &error_set,
        cfg.lambda_up,
        &cfg.probe,
        seed,
    )?;
    let model = finetune_semisup(&init, &dl, &error_set, cfg.lambda_up, &cfg.semisup, seed)?;
    let (p, r) = error_set_quality(&error_set.indices, &dl)?;
    let defund = evaluate(&model, &test)?.with_error_set_quality(p, r);
    let scratch = erm_on(&dl, &test, cfg, 0.0, seed)?;
    Ok(SemisupOutcome {
        labeled: dl.len(),
        defund,
        scratch_erm: scratch.report,
    })
}
