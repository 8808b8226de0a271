use serde::{Deserialize, Serialize};

use super::config::ProbeConfig;
use super::train::{fit_linear_head, Model};
use crate::data::{split, BiasedDataset};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, DenseNet};
use crate::spectral::{mean_effective_rank, RANK_BATCH};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub y: usize,
    pub b: usize,
    pub count: usize,
    pub correct: usize,
    /// Percent; `None` when the group has no samples.
    pub accuracy: Option<f64>,
}

/// Accuracies are percentages. Precision and recall are filled in only when
/// an error set was evaluated against ground-truth alignment flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bias_conflict_acc: Option<f64>,
    pub bias_aligned_acc: Option<f64>,
    pub unbiased_acc: f64,
    pub groups: Vec<GroupAccuracy>,
    pub effective_rank: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl MetricsReport {
    /// Attaches error-set quality; a NaN precision (empty set) stays `None`.
    pub fn with_error_set_quality(mut self, precision: f64, recall: f64) -> Self {
        self.precision = (!precision.is_nan()).then_some(precision);
        self.recall = Some(recall);
        self
    }
}

fn percent(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| 100.0 * correct as f64 / total as f64)
}

/// Scores `predictions` against `test`; the effective rank is supplied by
/// the caller.
pub(crate) fn report_from_predictions(
    predictions: &[usize],
    test: &BiasedDataset,
    effective_rank: f64,
) -> Result<MetricsReport> {
    if predictions.len() != test.len() {
        return Err(Error::shape("predictions", test.len(), predictions.len()));
    }
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let (c, cb) = (test.num_classes(), test.num_bias_classes());
    let mut count = vec![vec![0usize; cb]; c];
    let mut correct = vec![vec![0usize; cb]; c];
    let (mut al, mut al_ok, mut co, mut co_ok) = (0, 0, 0, 0);
    for k in 0..test.len() {
        let (y, b) = (test.targets()[k], test.biases()[k]);
        let ok = predictions[k] == y;
        count[y][b] += 1;
        correct[y][b] += usize::from(ok);
        if test.aligned()[k] {
            al += 1;
            al_ok += usize::from(ok);
        } else {
            co += 1;
            co_ok += usize::from(ok);
        }
    }
    let mut groups = Vec::with_capacity(c * cb);
    for y in 0..c {
        for b in 0..cb {
            groups.push(GroupAccuracy {
                y,
                b,
                count: count[y][b],
                correct: correct[y][b],
                accuracy: percent(correct[y][b], count[y][b]),
            });
        }
    }
    Ok(MetricsReport {
        bias_conflict_acc: percent(co_ok, co),
        bias_aligned_acc: percent(al_ok, al),
        unbiased_acc: percent(al_ok + co_ok, test.len()).expect("non-empty"),
        groups,
        effective_rank,
        precision: None,
        recall: None,
    })
}

/// Conflict / aligned / overall accuracy, per-group table, and the mean
/// effective rank of the encoder outputs on `test`.
pub fn evaluate(model: &Model, test: &BiasedDataset) -> Result<MetricsReport> {
    let feats = model.features(test.inputs())?;
    let preds = argmax_rows(model.head.logits(feats.view())?.view());
    let rank = mean_effective_rank(feats.view(), RANK_BATCH)?;
    report_from_predictions(&preds, test, rank)
}

/// `(precision %, recall %)` of `error_indices` as a detector of the
/// bias-conflicting samples of `dl`. Precision is NaN for an empty set.
pub fn error_set_quality(error_indices: &[usize], dl: &BiasedDataset) -> Result<(f64, f64)> {
    if let Some(&bad) = error_indices.iter().find(|&&k| k >= dl.len()) {
        return Err(Error::invalid(format!(
            "error-set index {bad} outside labeled set of {}",
            dl.len()
        )));
    }
    let hits = error_indices.iter().filter(|&&k| !dl.aligned()[k]).count();
    let conflicting = dl.len() - dl.aligned_count();
    let precision = if error_indices.is_empty() {
        f64::NAN
    } else {
        100.0 * hits as f64 / error_indices.len() as f64
    };
    let recall = if conflicting == 0 {
        0.0
    } else {
        100.0 * hits as f64 / conflicting as f64
    };
    Ok((precision, recall))
}

fn probe_accuracy(
    train_feats: &ndarray::Array2<f64>,
    train_labels: &[usize],
    test_feats: &ndarray::Array2<f64>,
    test_labels: &[usize],
    classes: usize,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    let ones = vec![1.0; train_labels.len()];
    let head = fit_linear_head(
        train_feats.view(),
        train_labels,
        &ones,
        classes,
        probe,
        seed,
    )?;
    let preds = argmax_rows(head.logits(test_feats.view())?.view());
    let ok = preds
        .iter()
        .zip(test_labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(ok as f64 / test_labels.len() as f64)
}

/// Ratio of bias-probe to target-probe held-out accuracy on frozen features.
///
/// `ds` should have `b` independent of `y` (an unbiased set); otherwise each
/// probe can read the other attribute through the correlation.
pub fn bias_metric(
    encoder: &DenseNet,
    ds: &BiasedDataset,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    let (train, held) = split(ds, 0.5, seed)?;
    if train.is_empty() || held.is_empty() {
        return Err(Error::invalid(format!(
            "dataset of {} samples too small to probe",
            ds.len()
        )));
    }
    let ftr = encoder.predict(train.inputs())?;
    let fte = encoder.predict(held.inputs())?;
    let target = probe_accuracy(
        &ftr,
        train.targets(),
        &fte,
        held.targets(),
        ds.num_classes(),
        probe,
        seed,
    )?;
    if target == 0.0 {
        return Err(Error::invalid(
            "target probe accuracy is zero; bias metric undefined",
        ));
    }
    let bias = probe_accuracy(
        &ftr,
        train.biases(),
        &fte,
        held.biases(),
        ds.num_bias_classes(),
        probe,
        crate::rng::stream_key(seed, "bias-probe"),
    )?;
    Ok(bias / target)
}
