//! Training objectives and their exact gradients.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::spectral;

/// NT-Xent temperature used unless configured otherwise.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// A scalar loss and its gradient with respect to the loss input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Array2<f64>,
}

fn check_labels(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
    let (n, c) = logits.dim();
    if n == 0 {
        return Err(Error::shape("logits", "at least one row", 0));
    }
    if labels.len() != n {
        return Err(Error::shape("labels", n, labels.len()));
    }
    if let Some((k, y)) = labels.iter().enumerate().find(|(_, y)| **y >= c) {
        return Err(Error::invalid(format!(
            "label {y} of sample {k} outside [0, {c})"
        )));
    }
    Ok(())
}

/// Per-sample `-log softmax(logits)[label]`.
pub fn per_sample_cross_entropy(
    logits: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<Array1<f64>> {
    check_labels(logits, labels)?;
    Ok(logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .collect())
}

/// `sum_k w_k * CE_k / n` and its gradient `w_k (softmax_k - onehot_k) / n`.
pub fn weighted_cross_entropy(
    logits: ArrayView2<'_, f64>,
    labels: &[usize],
    weights: &[f64],
) -> Result<LossGrad> {
    check_labels(logits, labels)?;
    let n = logits.nrows();
    if weights.len() != n {
        return Err(Error::shape("sample weights", n, weights.len()));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Array2::<f64>::zeros(logits.dim());
    let mut total = 0.0;
    for (k, (row, &y)) in logits.rows().into_iter().zip(labels).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut g = grad.row_mut(k);
        let mut z = 0.0;
        for (gi, &v) in g.iter_mut().zip(row.iter()) {
            let e = (v - max).exp();
            *gi = e;
            z += e;
        }
        total += weights[k] * (max + z.ln() - row[y]);
        let scale = weights[k] * inv_n / z;
        g.mapv_inplace(|e| e * scale);
        g[y] -= weights[k] * inv_n;
    }
    Ok(LossGrad {
        loss: total * inv_n,
        grad,
    })
}

/// Mean cross-entropy over the batch.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<LossGrad> {
    weighted_cross_entropy(logits, labels, &vec![1.0; logits.nrows()])
}

/// Two augmented views per sample: rows `k` and `k + n` pair up.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch<'a> {
    embeddings: ArrayView2<'a, f64>,
    temperature: f64,
}

impl<'a> ContrastiveBatch<'a> {
    pub fn new(embeddings: ArrayView2<'a, f64>, temperature: f64) -> Result<Self> {
        let rows = embeddings.nrows();
        if !rows.is_multiple_of(2) {
            return Err(Error::shape(
                "contrastive batch rows",
                "an even count",
                rows,
            ));
        }
        if rows < 4 {
            return Err(Error::shape("contrastive batch", "n >= 2 pairs", rows / 2));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature {temperature} must be > 0"
            )));
        }
        Ok(Self {
            embeddings,
            temperature,
        })
    }

    pub fn pairs(&self) -> usize {
        self.embeddings.nrows() / 2
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

/// NT-Xent over `2n` embeddings: each anchor's cosine-similarity softmax over
/// the other `2n - 1` rows at temperature `tau`, with its paired view as the
/// positive, averaged over all anchors. Rows are L2-normalized internally.
pub fn nt_xent(batch: &ContrastiveBatch<'_>) -> Result<LossGrad> {
    let h = batch.embeddings;
    let rows = h.nrows();
    let n = batch.pairs();
    let tau = batch.temperature;

    let norms: Array1<f64> = h.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(k) = norms.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "embedding row norm",
            row: k,
            col: 0,
        });
    }
    if let Some(k) = norms.iter().position(|v| *v <= 0.0) {
        return Err(Error::invalid(format!(
            "embedding row {k} has norm {} (cosine undefined)",
            norms[k]
        )));
    }
    let unit = &h / &norms.view().insert_axis(Axis(1));
    let sim = unit.dot(&unit.t()) / tau;

    let inv = 1.0 / rows as f64;
    let mut total = 0.0;
    // dL/dS with the diagonal masked out.
    let mut d_sim = Array2::<f64>::zeros((rows, rows));
    for k in 0..rows {
        let pos = (k + n) % rows;
        let row = sim.row(k);
        let mut max = f64::NEG_INFINITY;
        for (l, &v) in row.iter().enumerate() {
            if l != k {
                max = max.max(v);
            }
        }
        let mut z = 0.0;
        for (l, &v) in row.iter().enumerate() {
            if l != k {
                let e = (v - max).exp();
                d_sim[[k, l]] = e;
                z += e;
            }
        }
        total += max + z.ln() - row[pos];
        let mut d = d_sim.row_mut(k);
        d.mapv_inplace(|e| e * inv / z);
        d[pos] -= inv;
    }

    // S = U U^T / tau  =>  dL/dU = (dS + dS^T) U / tau.
    let sym = &d_sim + &d_sim.t();
    let d_unit = sym.dot(&unit) / tau;
    // Back through u = h / |h|.
    let mut grad = Array2::<f64>::zeros(h.dim());
    for k in 0..rows {
        let u = unit.row(k);
        let g = d_unit.row(k);
        let proj = u.dot(&g);
        let mut out = grad.row_mut(k);
        for ((o, &gi), &ui) in out.iter_mut().zip(g.iter()).zip(u.iter()) {
            *o = (gi - ui * proj) / norms[k];
        }
    }
    Ok(LossGrad {
        loss: total * inv,
        grad,
    })
}

/// Combined pretraining objective for one batch of paired views.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Loss {
    pub loss: f64,
    pub contrastive: f64,
    /// Rank loss of the encoder outputs; `None` when `lambda_reg == 0`.
    pub rank: Option<f64>,
    /// Gradient with respect to the projection-head output.
    pub grad_proj: Array2<f64>,
    /// Direct gradient with respect to the encoder output from the rank term
    /// (already scaled by `lambda_reg`); `None` when `lambda_reg == 0`.
    pub grad_encoder: Option<Array2<f64>>,
}

/// `nt_xent(proj_out, tau) + lambda_reg * rank_loss(views_out)`.
///
/// The rank term attaches to the encoder output, before the projection head.
/// Gradient flowing through the head is the caller's to backpropagate.
pub fn stage1_loss(
    views_out: ArrayView2<'_, f64>,
    proj_out: ArrayView2<'_, f64>,
    tau: f64,
    lambda_reg: f64,
) -> Result<Stage1Loss> {
    if !(lambda_reg >= 0.0 && lambda_reg.is_finite()) {
        return Err(Error::invalid(format!(
            "lambda_reg {lambda_reg} must be >= 0"
        )));
    }
    if views_out.nrows() != proj_out.nrows() {
        return Err(Error::shape(
            "stage-1 view rows",
            views_out.nrows(),
            proj_out.nrows(),
        ));
    }
    let contrastive = nt_xent(&ContrastiveBatch::new(proj_out, tau)?)?;
    if lambda_reg == 0.0 {
        return Ok(Stage1Loss {
            loss: contrastive.loss,
            contrastive: contrastive.loss,
            rank: None,
            grad_proj: contrastive.grad,
            grad_encoder: None,
        });
    }
    let (rank, rank_grad) = spectral::rank_loss_with_grad(views_out)?;
    Ok(Stage1Loss {
        loss: contrastive.loss + lambda_reg * rank,
        contrastive: contrastive.loss,
        rank: Some(rank),
        grad_proj: contrastive.grad,
        grad_encoder: Some(rank_grad * lambda_reg),
    })
}

/// The identified error set and its upweighting factor.
#[derive(Debug, Clone, PartialEq)]
pub struct UpweightSpec {
    error_indices: BTreeSet<usize>,
    lambda_up: f64,
}

impl UpweightSpec {
    pub fn new(error_indices: impl IntoIterator<Item = usize>, lambda_up: f64) -> Result<Self> {
        if !(lambda_up > 0.0 && lambda_up.is_finite()) {
            return Err(Error::invalid(format!("lambda_up {lambda_up} must be > 0")));
        }
        Ok(Self {
            error_indices: error_indices.into_iter().collect(),
            lambda_up,
        })
    }

    pub fn error_indices(&self) -> &BTreeSet<usize> {
        &self.error_indices
    }

    pub fn lambda_up(&self) -> f64 {
        self.lambda_up
    }

    /// Per-sample weights for a set of `n` samples.
    pub fn weights(&self, n: usize) -> Result<Vec<f64>> {
        if let Some(&bad) = self.error_indices.iter().find(|&&k| k >= n) {
            return Err(Error::invalid(format!(
                "error-set index {bad} outside a batch of {n}"
            )));
        }
        let mut w = vec![1.0; n];
        for &k in &self.error_indices {
            w[k] = self.lambda_up;
        }
        Ok(w)
    }
}

/// Upweighted cross-entropy: `(lambda_up * sum_{k in E} CE_k + sum_{k not in E} CE_k) / n`.
///
/// The sum is divided by the batch size so that sweeping `lambda_up` does
/// not rescale the effective learning rate.
pub fn debias_loss(
    logits: ArrayView2<'_, f64>,
    labels: &[usize],
    spec: &UpweightSpec,
) -> Result<LossGrad> {
    let w = spec.weights(logits.nrows())?;
    weighted_cross_entropy(logits, labels, &w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Array2::<f64>::zeros((3, 10));
        let lg = cross_entropy(logits.view(), &[0, 4, 9]).unwrap();
        assert!((lg.loss - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn large_margin_drives_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let logits = array![[margin, 0.0, 0.0]];
            let l = cross_entropy(logits.view(), &[0]).unwrap().loss;
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Array2::<f64>::zeros((2, 3));
        assert!(cross_entropy(logits.view(), &[0, 3]).is_err());
        assert!(cross_entropy(logits.view(), &[0]).is_err());
    }

    #[test]
    fn nt_xent_identical_embeddings() {
        let h = array![[1.0, 2.0], [2.0, 4.0], [0.5, 1.0], [3.0, 6.0]];
        let lg = nt_xent(&ContrastiveBatch::new(h.view(), 0.07).unwrap()).unwrap();
        assert!((lg.loss - 3f64.ln()).abs() < 1e-12, "{}", lg.loss);
    }

    #[test]
    fn nt_xent_aligned_positives_orthogonal_negatives() {
        // Pairs (0, 2) and (1, 3); pair directions orthogonal.
        let h = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        let lg = nt_xent(&ContrastiveBatch::new(h.view(), 1.0).unwrap()).unwrap();
        let expected = (1f64.exp() + 2.0).ln() - 1.0;
        assert!((lg.loss - expected).abs() < 1e-15);
        assert!((expected - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn nt_xent_rejects_bad_batches() {
        let odd = Array2::<f64>::ones((3, 2));
        assert!(ContrastiveBatch::new(odd.view(), 0.5).is_err());
        let single_pair = Array2::<f64>::ones((2, 2));
        assert!(ContrastiveBatch::new(single_pair.view(), 0.5).is_err());
        let ok = Array2::<f64>::ones((4, 2));
        assert!(ContrastiveBatch::new(ok.view(), 0.0).is_err());
        let zero_row = array![[1.0, 0.0], [0.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert!(nt_xent(&ContrastiveBatch::new(zero_row.view(), 0.5).unwrap()).is_err());
    }

    #[test]
    fn stage1_without_regularizer_is_nt_xent() {
        let v = array![[1.0, 0.2], [0.1, 1.0], [0.9, 0.3], [0.2, 0.8]];
        let p = array![
            [0.3, 1.0, 0.2],
            [1.0, 0.1, 0.0],
            [0.2, 0.9, 0.4],
            [0.8, 0.3, 0.1]
        ];
        let s = stage1_loss(v.view(), p.view(), 0.5, 0.0).unwrap();
        let nx = nt_xent(&ContrastiveBatch::new(p.view(), 0.5).unwrap()).unwrap();
        assert_eq!(s.loss, nx.loss);
        assert_eq!(s.grad_proj, nx.grad);
        assert!(s.grad_encoder.is_none());
    }

    #[test]
    fn stage1_decorrelated_encoder_adds_nothing() {
        let v = array![[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
        let p = array![[0.3, 1.0], [1.0, 0.1], [0.2, 0.9], [0.8, 0.3]];
        let s = stage1_loss(v.view(), p.view(), 0.5, 3.0).unwrap();
        assert_eq!(s.rank, Some(0.0));
        assert_eq!(s.loss, s.contrastive);
    }

    #[test]
    fn debias_loss_examples() {
        let logits = array![[2.0, 0.5, -1.0], [0.1, 0.2, 0.3], [-0.5, 1.5, 0.0]];
        let labels = [1, 2, 0];
        let per = per_sample_cross_entropy(logits.view(), &labels).unwrap();
        let plain = cross_entropy(logits.view(), &labels).unwrap();

        let unit = debias_loss(
            logits.view(),
            &labels,
            &UpweightSpec::new([0, 2], 1.0).unwrap(),
        )
        .unwrap();
        assert_eq!(unit, plain);
        let empty = debias_loss(
            logits.view(),
            &labels,
            &UpweightSpec::new([], 10.0).unwrap(),
        )
        .unwrap();
        assert_eq!(empty, plain);

        let up = debias_loss(
            logits.view(),
            &labels,
            &UpweightSpec::new([0], 10.0).unwrap(),
        )
        .unwrap();
        let expected = (10.0 * per[0] + per[1] + per[2]) / 3.0;
        assert!((up.loss - expected).abs() < 1e-14);

        assert!(debias_loss(
            logits.view(),
            &labels,
            &UpweightSpec::new([3], 2.0).unwrap()
        )
        .is_err());
        assert!(UpweightSpec::new([0], 0.0).is_err());
    }
}
