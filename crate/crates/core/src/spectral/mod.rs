//! Spectral and correlation statistics of representation matrices.
//!
//! A representation matrix `Z` is an `n x d` batch of latent vectors (one
//! row per sample). Its effective rank is the Shannon entropy, in nats, of
//! the sum-normalized singular values. The rank loss is the negated sum of
//! squared off-diagonal entries of the normalized auto-correlation of the
//! mean-centered batch; minimizing it pushes features to be redundant.
//!
//! Representations are taken after the encoder's output nonlinearity.

mod cluster;
mod svd;

pub use cluster::cluster_reorder;
pub use svd::{svd_values, SingularSpectrum};

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Added under each square root of the correlation denominator.
pub const CORR_EPS: f64 = 1e-8;

/// Singular values below `RANK_FLOOR * sigma_1` count as zero.
pub const RANK_FLOOR: f64 = 1e-12;

/// Batch size used when averaging effective rank over a large matrix.
pub const RANK_BATCH: usize = 256;

/// A validated `n x d` representation batch: `n, d >= 2`, all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationMatrix(Array2<f64>);

impl RepresentationMatrix {
    pub fn new(z: Array2<f64>) -> Result<Self> {
        check_representation(z.view())?;
        Ok(Self(z))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn auto_correlation(&self) -> CorrelationMatrix {
        auto_correlation(self.view()).expect("validated on construction")
    }

    pub fn rank_loss(&self) -> f64 {
        rank_loss(self.view()).expect("validated on construction")
    }

    pub fn effective_rank(&self) -> Result<f64> {
        effective_rank(&svd_values(self.view())?)
    }
}

impl TryFrom<Array2<f64>> for RepresentationMatrix {
    type Error = Error;

    fn try_from(z: Array2<f64>) -> Result<Self> {
        Self::new(z)
    }
}

/// Symmetric `d x d` correlation matrix with entries in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix(Array2<f64>);

impl CorrelationMatrix {
    /// Validates an externally supplied correlation matrix (square, finite,
    /// symmetric to 1e-9, entries within `[-1, 1]` up to rounding).
    pub fn new(c: Array2<f64>) -> Result<Self> {
        let (r, k) = c.dim();
        if r != k || r == 0 {
            return Err(Error::shape(
                "correlation matrix",
                "non-empty square",
                format!("{r}x{k}"),
            ));
        }
        for ((i, j), v) in c.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "correlation matrix",
                    row: i,
                    col: j,
                });
            }
            if v.abs() > 1.0 + 1e-9 {
                return Err(Error::invalid(format!(
                    "correlation entry ({i}, {j}) = {v} outside [-1, 1]"
                )));
            }
            if (v - c[[j, i]]).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "correlation matrix not symmetric at ({i}, {j})"
                )));
            }
        }
        Ok(Self(c))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// Rows and columns permuted by `perm` (`out[a, b] = C[perm[a], perm[b]]`).
    pub fn permuted(&self, perm: &[usize]) -> Array2<f64> {
        let d = self.dim();
        Array2::from_shape_fn((d, d), |(a, b)| self.0[[perm[a], perm[b]]])
    }
}

fn check_representation(z: ArrayView2<'_, f64>) -> Result<()> {
    let (n, d) = z.dim();
    if n < 2 {
        return Err(Error::shape("representation matrix", "n >= 2 rows", n));
    }
    if d < 2 {
        return Err(Error::shape("representation matrix", "d >= 2 columns", d));
    }
    for ((r, c), v) in z.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "representation matrix",
                row: r,
                col: c,
            });
        }
    }
    Ok(())
}

/// Shannon entropy (nats) of the sum-normalized singular values.
pub fn effective_rank(spectrum: &SingularSpectrum) -> Result<f64> {
    let top = spectrum.top();
    if top <= 0.0 {
        return Err(Error::DegenerateSpectrum("all singular values are zero"));
    }
    let floor = RANK_FLOOR * top;
    let kept = spectrum.values().iter().copied().filter(|&s| s > floor);
    let total: f64 = kept.clone().sum();
    // -sum p ln p with p = s / T, rewritten as ln T - sum s ln s / T so that
    // k equal unit values give exactly ln k.
    let weighted: f64 = kept.map(|s| s * s.ln()).sum();
    Ok((total.ln() - weighted / total).max(0.0))
}

/// `sigma_i / sigma_1`; the first entry is exactly 1.
pub fn normalized_spectrum(spectrum: &SingularSpectrum) -> Result<Vec<f64>> {
    let top = spectrum.top();
    if top <= 0.0 {
        return Err(Error::DegenerateSpectrum(
            "cannot max-normalize a zero spectrum",
        ));
    }
    Ok(spectrum.values().iter().map(|s| s / top).collect())
}

/// Intermediate quantities shared by the rank loss and its gradient.
struct Correlation {
    centered: Array2<f64>,
    /// `sqrt(sum_b zc_bi^2 + eps)` per column.
    scale: Array1<f64>,
    /// Off-diagonal entries as in the normalized auto-correlation; the
    /// diagonal holds `G_ii / scale_i^2` (not forced to 1).
    raw: Array2<f64>,
}

fn correlation_parts(z: ArrayView2<'_, f64>) -> Result<Correlation> {
    check_representation(z)?;
    let mean = z.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &z - &mean;
    let gram = centered.t().dot(&centered);
    let scale = gram.diag().mapv(|g| (g + CORR_EPS).sqrt());
    let d = scale.len();
    let raw = Array2::from_shape_fn((d, d), |(i, j)| gram[[i, j]] / (scale[i] * scale[j]));
    Ok(Correlation {
        centered,
        scale,
        raw,
    })
}

/// Normalized auto-correlation of the mean-centered batch.
///
/// The diagonal is reported as exactly 1; zero-variance columns have zero
/// off-diagonal entries.
pub fn auto_correlation(z: ArrayView2<'_, f64>) -> Result<CorrelationMatrix> {
    let mut c = correlation_parts(z)?.raw;
    let d = c.nrows();
    for i in 0..d {
        c[[i, i]] = 1.0;
        for j in (i + 1)..d {
            // Symmetrize and clamp rounding excursions.
            let v = (0.5 * (c[[i, j]] + c[[j, i]])).clamp(-1.0, 1.0);
            c[[i, j]] = v;
            c[[j, i]] = v;
        }
    }
    Ok(CorrelationMatrix(c))
}

fn off_diagonal_sq_sum(c: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for ((i, j), v) in c.indexed_iter() {
        if i != j {
            total += v * v;
        }
    }
    total
}

/// Rank loss: `-sum_{i != j} C_ij^2`, in `[-(d^2 - d), 0]`.
pub fn rank_loss(z: ArrayView2<'_, f64>) -> Result<f64> {
    let parts = correlation_parts(z)?;
    Ok(-off_diagonal_sq_sum(&parts.raw))
}

/// Rank loss together with its gradient with respect to `z`.
pub fn rank_loss_with_grad(z: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
    let Correlation {
        centered,
        scale,
        raw: c,
    } = correlation_parts(z)?;
    let d = scale.len();
    let loss = -off_diagonal_sq_sum(&c);

    // dL/dC is -2C off the diagonal, zero on it.
    // dL/dG_ij = dL/dC_ij / (s_i s_j);  dL/ds_k = -(2 / s_k) sum_j dL/dC_kj C_kj.
    let mut d_gram = Array2::<f64>::zeros((d, d));
    let mut d_scale = Array1::<f64>::zeros(d);
    for i in 0..d {
        let mut acc = 0.0;
        for j in 0..d {
            if i == j {
                continue;
            }
            let dc = -2.0 * c[[i, j]];
            d_gram[[i, j]] = dc / (scale[i] * scale[j]);
            acc += dc * c[[i, j]];
        }
        d_scale[i] = -2.0 * acc / scale[i];
    }

    // G = Zc^T Zc  =>  dL/dZc = 2 Zc dG (dG symmetric);  s_k^2 = sum_b zc_bk^2 + eps.
    let mut d_centered = centered.dot(&d_gram) * 2.0;
    for (k, mut col) in d_centered.axis_iter_mut(Axis(1)).enumerate() {
        let factor = d_scale[k] / scale[k];
        col.zip_mut_with(&centered.column(k), |g, &zc| *g += factor * zc);
    }

    // Back through mean-centering.
    let col_mean = d_centered.mean_axis(Axis(0)).expect("n >= 2");
    let grad = d_centered - &col_mean;
    Ok((loss, grad))
}

/// Gradient of [`rank_loss`] with respect to `z`.
pub fn rank_loss_grad(z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    rank_loss_with_grad(z).map(|(_, g)| g)
}

/// Effective rank of `z` (rows as samples), averaged over consecutive row
/// batches of at most `batch` rows. A trailing batch with fewer than two
/// rows is merged into the previous one. An all-zero batch contributes 0.
pub fn mean_effective_rank(z: ArrayView2<'_, f64>, batch: usize) -> Result<f64> {
    let n = z.nrows();
    if n == 0 {
        return Err(Error::shape("mean_effective_rank", "at least one row", 0));
    }
    let batch = batch.max(2);
    let mut bounds = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        bounds.push((start, end));
        start = end;
    }
    if bounds.len() > 1 {
        let (s, e) = bounds[bounds.len() - 1];
        if e - s < 2 {
            bounds.pop();
            bounds.last_mut().expect("non-empty").1 = e;
        }
    }
    let mut total = 0.0;
    for &(s, e) in &bounds {
        let spec = svd_values(z.slice(ndarray::s![s..e, ..]))?;
        total += match effective_rank(&spec) {
            Ok(r) => r,
            Err(Error::DegenerateSpectrum(_)) => 0.0,
            Err(e) => return Err(e),
        };
    }
    Ok(total / bounds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn spectrum(v: &[f64]) -> SingularSpectrum {
        SingularSpectrum::from_values(v.to_vec()).unwrap()
    }

    #[test]
    fn effective_rank_examples() {
        assert!((effective_rank(&spectrum(&[1.0, 1.0, 1.0])).unwrap() - 3f64.ln()).abs() < 1e-15);
        assert_eq!(effective_rank(&spectrum(&[5.0, 0.0, 0.0])).unwrap(), 0.0);
        // (0.5, 0.25, 0.25): 0.5 ln 2 + 2 * 0.25 ln 4 = 1.5 ln 2
        let rho = effective_rank(&spectrum(&[2.0, 1.0, 1.0])).unwrap();
        assert!((rho - 1.5 * 2f64.ln()).abs() < 1e-15);
        assert!((rho - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn effective_rank_rejects_zero_spectrum() {
        assert!(matches!(
            effective_rank(&spectrum(&[0.0, 0.0])),
            Err(Error::DegenerateSpectrum(_))
        ));
    }

    #[test]
    fn effective_rank_ignores_noise_floor() {
        let rho = effective_rank(&spectrum(&[1.0, 1e-14])).unwrap();
        assert_eq!(rho, 0.0);
    }

    #[test]
    fn normalized_spectrum_examples() {
        assert_eq!(
            normalized_spectrum(&spectrum(&[4.0, 2.0, 1.0])).unwrap(),
            vec![1.0, 0.5, 0.25]
        );
        assert_eq!(
            normalized_spectrum(&spectrum(&[1.0, 0.0])).unwrap(),
            vec![1.0, 0.0]
        );
        assert_eq!(
            normalized_spectrum(&spectrum(&[1.0; 3])).unwrap(),
            vec![1.0; 3]
        );
        assert!(normalized_spectrum(&spectrum(&[0.0])).is_err());
    }

    #[test]
    fn correlation_of_duplicated_and_negated_columns() {
        let z = array![
            [1.0, 1.0, -1.0],
            [2.0, 2.0, -2.0],
            [4.0, 4.0, -4.0],
            [-3.0, -3.0, 3.0]
        ];
        let c = auto_correlation(z.view()).unwrap();
        assert!((c.get(0, 1) - 1.0).abs() < 1e-9);
        assert!((c.get(0, 2) + 1.0).abs() < 1e-9);
        assert_eq!(c.get(2, 2), 1.0);
    }

    #[test]
    fn orthogonal_centered_columns_are_uncorrelated() {
        let z = array![[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
        let c = auto_correlation(z.view()).unwrap();
        assert_eq!(c.get(0, 1), 0.0);
        assert_eq!(rank_loss(z.view()).unwrap(), 0.0);
        let g = rank_loss_grad(z.view()).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_columns_hit_the_lower_bound() {
        let col = [0.3, -1.2, 2.0, 0.7, -0.1];
        let z = Array2::from_shape_fn((5, 4), |(i, _)| col[i]);
        let l = rank_loss(z.view()).unwrap();
        assert!((l + 12.0).abs() < 1e-6, "{l}");
    }

    #[test]
    fn zero_variance_column_is_not_nan() {
        let z = array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]];
        let c = auto_correlation(z.view()).unwrap();
        assert_eq!(c.get(0, 1), 0.0);
        assert_eq!(c.get(1, 1), 1.0);
        let g = rank_loss_grad(z.view()).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_row_is_rejected() {
        let z = array![[1.0, 2.0]];
        assert!(auto_correlation(z.view()).is_err());
        assert!(rank_loss(z.view()).is_err());
        assert!(RepresentationMatrix::new(z).is_err());
    }

    #[test]
    fn mean_effective_rank_merges_short_tail() {
        let z = Array2::from_shape_fn((5, 2), |(i, j)| if i % 2 == j { 1.0 } else { 0.0 });
        // batches of 2: [0,2) [2,4) [4,5) -> tail merged into [2,5)
        let r = mean_effective_rank(z.view(), 2).unwrap();
        assert!(r.is_finite());
        let zeros = Array2::<f64>::zeros((4, 3));
        assert_eq!(mean_effective_rank(zeros.view(), 256).unwrap(), 0.0);
    }

    #[test]
    fn correlation_matrix_validation() {
        assert!(CorrelationMatrix::new(array![[1.0, 0.5], [0.4, 1.0]]).is_err());
        assert!(CorrelationMatrix::new(array![[1.0, 1.5], [1.5, 1.0]]).is_err());
        assert!(CorrelationMatrix::new(array![[1.0, 0.5], [0.5, 1.0]]).is_ok());
    }
}
