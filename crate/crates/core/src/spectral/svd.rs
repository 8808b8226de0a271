//! Singular values of small dense matrices by one-sided Jacobi rotations.

use ndarray::ArrayView2;

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Singular values of a dense matrix, sorted non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularSpectrum(Vec<f64>);

impl SingularSpectrum {
    /// Wraps externally computed singular values. They are sorted and must be
    /// finite and non-negative.
    pub fn from_values(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("empty spectrum"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!(
                "singular value {i} is {} (must be finite and >= 0)",
                values[i]
            )));
        }
        values.sort_by(|a, b| b.total_cmp(a));
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Largest singular value (the spectral norm).
    pub fn top(&self) -> f64 {
        self.0[0]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// All `min(m, n)` singular values of `m`, descending.
///
/// Hestenes one-sided Jacobi: columns of a working copy are rotated pairwise
/// until mutually orthogonal, at which point their norms are the singular
/// values. The wide case is handled on the transpose so the column count is
/// always the smaller dimension.
pub fn svd_values(m: ArrayView2<'_, f64>) -> Result<SingularSpectrum> {
    let (rows, cols) = m.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::shape(
            "svd_values",
            "non-empty matrix",
            format!("{rows}x{cols}"),
        ));
    }
    for ((r, c), v) in m.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "svd input",
                row: r,
                col: c,
            });
        }
    }

    // Working columns: the `k = min(rows, cols)` vectors of length `len`.
    let (k, len) = if rows >= cols {
        (cols, rows)
    } else {
        (rows, cols)
    };
    let mut a: Vec<Vec<f64>> = if rows >= cols {
        m.columns().into_iter().map(|c| c.to_vec()).collect()
    } else {
        m.rows().into_iter().map(|r| r.to_vec()).collect()
    };
    debug_assert_eq!(a.len(), k);

    let eps = f64::EPSILON;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&a[p], &a[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..len {
                        alpha += cp[i] * cp[i];
                        beta += cq[i] * cq[i];
                        gamma += cp[i] * cq[i];
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = a.split_at_mut(q);
                let (cp, cq) = (&mut left[p], &mut right[0]);
                for i in 0..len {
                    let x = cp[i];
                    let y = cq[i];
                    cp[i] = c * x - s * y;
                    cq[i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let values = a
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    SingularSpectrum::from_values(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn identity_has_unit_singular_values() {
        let s = svd_values(Array2::<f64>::eye(3).view()).unwrap();
        for v in s.values() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rank_one_outer_product() {
        let u = array![0.6, 0.8, 0.0];
        let v = array![0.0, 1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0];
        let m = Array2::from_shape_fn((3, 4), |(i, j)| u[i] * v[j]);
        let s = svd_values(m.view()).unwrap();
        assert_eq!(s.len(), 3);
        assert!((s.values()[0] - 1.0).abs() < 1e-14);
        assert!(s.values()[1].abs() < 1e-14);
        assert!(s.values()[2].abs() < 1e-14);
    }

    #[test]
    fn wide_and_tall_agree() {
        let m = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.5]];
        let a = svd_values(m.view()).unwrap();
        let b = svd_values(m.t()).unwrap();
        assert_eq!(a.len(), 2);
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
        let fro: f64 = m.iter().map(|v| v * v).sum();
        let sum_sq: f64 = a.values().iter().map(|v| v * v).sum();
        assert!((fro - sum_sq).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        let m = array![[1.0, f64::NAN], [0.0, 1.0]];
        assert!(matches!(
            svd_values(m.view()),
            Err(Error::NonFinite { row: 0, col: 1, .. })
        ));
    }

    #[test]
    fn zero_matrix_gives_zero_spectrum() {
        let s = svd_values(Array2::<f64>::zeros((4, 2)).view()).unwrap();
        assert_eq!(s.values(), &[0.0, 0.0]);
    }
}
