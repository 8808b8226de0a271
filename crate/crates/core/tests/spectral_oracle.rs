mod support;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use rankdebias::rng;
use rankdebias::spectral::{effective_rank, svd_values, SingularSpectrum};
use support::{oracle_entropy, oracle_singular_values, random_matrix};

#[test]
fn effective_rank_matches_eigen_oracle_on_200_matrices() {
    let start = std::time::Instant::now();
    let mut rng = rng::stream(2024, "svd-oracle");
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let m = random_matrix(&mut rng);
        let ours = effective_rank(&svd_values(m.view()).unwrap()).unwrap();
        let oracle = oracle_entropy(&oracle_singular_values(&m));
        worst = worst.max((ours - oracle).abs());
    }
    assert!(worst <= 1e-9, "max |difference| = {worst:e}");
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn singular_values_match_oracle_entrywise() {
    let mut rng = rng::stream(7, "svd-values");
    for _ in 0..50 {
        let m = random_matrix(&mut rng);
        let ours = svd_values(m.view()).unwrap();
        let oracle = oracle_singular_values(&m);
        assert_eq!(ours.len(), oracle.len());
        let top = oracle[0].max(1e-300);
        for (a, b) in ours.values().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-10 * top, "{a} vs {b}");
        }
    }
}

#[test]
fn seeded_5x4_matches_gram_eigen_oracle() {
    // The plain M^T M route is fine for a well-conditioned matrix.
    let mut rng = rng::stream(5, "five-by-four");
    let m: Array2<f64> = Array2::from_shape_simple_fn((5, 4), || StandardNormal.sample(&mut rng));
    let dm = DMatrix::from_fn(5, 4, |i, j| m[[i, j]]);
    let mut expected: Vec<f64> = (dm.transpose() * &dm)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|v: &f64| v.max(0.0).sqrt())
        .collect();
    expected.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let ours = svd_values(m.view()).unwrap();
    for (a, b) in ours.values().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn identity_gives_log_of_min_dim_exactly() {
    for (r, c) in [(1, 1), (3, 3), (5, 8), (16, 4), (64, 64)] {
        let m = Array2::from_shape_fn((r, c), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let rho = effective_rank(&svd_values(m.view()).unwrap()).unwrap();
        assert_eq!(rho, (r.min(c) as f64).ln(), "{r}x{c}");
    }
}

#[test]
fn hand_computed_entropy() {
    let s = SingularSpectrum::from_values(vec![2.0, 1.0, 1.0]).unwrap();
    let expected = -(0.5f64 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
    assert!((effective_rank(&s).unwrap() - expected).abs() < 1e-15);
    assert!((expected - 1.0397).abs() < 1e-4);
}
