//! Oracles and finite-difference instances shared by the core test targets
//! and the acceptance harness.
#![allow(dead_code)]

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rankdebias::losses::{
    cross_entropy, debias_loss, nt_xent, stage1_loss, ContrastiveBatch, UpweightSpec,
};
use rankdebias::nn::{Activation, DenseNet};
use rankdebias::rng::{self, Rng};
use rankdebias::spectral::{rank_loss, rank_loss_grad};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Singular values from the symmetric eigenproblem of `[[0, M], [M^T, 0]]`,
/// whose eigenvalues are `+-sigma_i` plus `|m - n|` zeros. Unlike `M^T M`
/// this does not square small singular values into the noise floor.
pub fn oracle_singular_values(m: &Array2<f64>) -> Vec<f64> {
    let (r, c) = m.dim();
    let n = r + c;
    let mut aug = DMatrix::<f64>::zeros(n, n);
    for i in 0..r {
        for j in 0..c {
            aug[(i, r + j)] = m[[i, j]];
            aug[(r + j, i)] = m[[i, j]];
        }
    }
    let mut eig: Vec<f64> = aug.symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eig.truncate(r.min(c));
    eig.into_iter().map(|v| v.max(0.0)).collect()
}

/// Entropy of the normalized spectrum, written out independently of the
/// library (same 1e-12 relative floor).
pub fn oracle_entropy(sigma: &[f64]) -> f64 {
    let top = sigma.iter().cloned().fold(0.0, f64::max);
    let kept: Vec<f64> = sigma.iter().copied().filter(|&s| s > 1e-12 * top).collect();
    let total: f64 = kept.iter().sum();
    -kept.iter().map(|s| s / total).map(|p| p * p.ln()).sum::<f64>()
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut *rng))
}

/// Up to 64x64, mixing dense, planted low-rank and badly scaled matrices.
pub fn random_matrix(rng: &mut Rng) -> Array2<f64> {
    let r = rng.random_range(1..=64);
    let c = rng.random_range(1..=64);
    let mut m = gaussian(r, c, rng);
    match rng.random_range(0..3) {
        0 => {
            let k = rng.random_range(1..=r.min(c));
            let a = gaussian(r, k, rng);
            let b = gaussian(k, c, rng);
            m = a.dot(&b);
        }
        1 => {
            for mut col in m.columns_mut() {
                let s = 10f64.powf(rng.random_range(-3.0..3.0));
                col.mapv_inplace(|v| v * s);
            }
        }
        _ => {}
    }
    m
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for (idx, out) in g.indexed_iter_mut() {
        let v = probe[idx];
        probe[idx] = v + H;
        let plus = f(&probe);
        probe[idx] = v - H;
        let minus = f(&probe);
        probe[idx] = v;
        *out = (plus - minus) / (2.0 * H);
    }
    g
}

pub fn array_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    relative_error(analytic.as_slice().unwrap(), numeric.as_slice().unwrap())
}

/// Central differences over all parameters of `nets`.
pub fn numeric_param_grad(nets: &mut [DenseNet], f: impl Fn(&[DenseNet]) -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    for k in 0..nets.len() {
        let lens = nets[k].param_lens();
        for (s, &len) in lens.iter().enumerate() {
            for i in 0..len {
                let v = nets[k].param_slices_mut()[s][i];
                nets[k].param_slices_mut()[s][i] = v + H;
                let plus = f(nets);
                nets[k].param_slices_mut()[s][i] = v - H;
                let minus = f(nets);
                nets[k].param_slices_mut()[s][i] = v;
                out.push((plus - minus) / (2.0 * H));
            }
        }
    }
    out
}

pub fn rank_loss_fd(seed: u64) -> f64 {
    let mut rng = rng::substream(1, "rank-fd", seed);
    let n = rng.random_range(4..=16);
    let d = rng.random_range(2..=8);
    let z = gaussian(n, d, &mut rng);
    let g = rank_loss_grad(z.view()).unwrap();
    array_error(&g, &numeric_grad(&z, |z| rank_loss(z.view()).unwrap()))
}

pub fn nt_xent_fd(seed: u64) -> f64 {
    let mut rng = rng::substream(2, "ntxent-fd", seed);
    let pairs = rng.random_range(2..=6);
    let p = rng.random_range(2..=6);
    let tau = rng.random_range(0.07..1.0);
    let h = gaussian(2 * pairs, p, &mut rng);
    let value = |h: &Array2<f64>| nt_xent(&ContrastiveBatch::new(h.view(), tau).unwrap()).unwrap();
    array_error(&value(&h).grad, &numeric_grad(&h, |h| value(h).loss))
}

pub fn cross_entropy_fd(seed: u64) -> f64 {
    let mut rng = rng::substream(3, "ce-fd", seed);
    let n = rng.random_range(1..=8);
    let c = rng.random_range(2..=10);
    let logits = gaussian(n, c, &mut rng) * 3.0;
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let g = cross_entropy(logits.view(), &labels).unwrap().grad;
    array_error(
        &g,
        &numeric_grad(&logits, |l| cross_entropy(l.view(), &labels).unwrap().loss),
    )
}

pub fn debias_loss_fd(seed: u64) -> f64 {
    let mut rng = rng::substream(4, "debias-fd", seed);
    let n = rng.random_range(1..=10);
    let c = rng.random_range(2..=6);
    let logits = gaussian(n, c, &mut rng) * 2.0;
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let errors: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.3)).collect();
    let spec = UpweightSpec::new(errors, rng.random_range(1.0..20.0)).unwrap();
    let g = debias_loss(logits.view(), &labels, &spec).unwrap().grad;
    array_error(
        &g,
        &numeric_grad(&logits, |l| debias_loss(l.view(), &labels, &spec).unwrap().loss),
    )
}

/// Contrastive loss plus rank penalty through a ReLU encoder and a linear
/// projection head, differentiated with respect to every parameter.
pub fn stage1_composite_fd(seed: u64) -> f64 {
    let mut rng = rng::substream(5, "stage1-fd", seed);
    let pairs = rng.random_range(2..=5);
    let m = rng.random_range(2..=6);
    let hidden = rng.random_range(2..=8);
    let d = rng.random_range(2..=6);
    let p = rng.random_range(2..=4);
    let tau = rng.random_range(0.1..1.0);
    let lambda_reg = rng.random_range(0.0..1.0);
    // Redraw until every encoder output unit is active somewhere in the
    // batch; a dead unit zeroes the instance's gradient and checks nothing.
    let (views, enc) = loop {
        let views = gaussian(2 * pairs, m, &mut rng);
        let enc = DenseNet::new(&[m, hidden, d], Activation::Relu, &mut rng).unwrap();
        let z = enc.predict(views.view()).unwrap();
        if z.columns().into_iter().all(|c| c.iter().any(|v| *v > 0.0)) {
            break (views, enc);
        }
    };
    let proj = DenseNet::new(&[d, hidden, p], Activation::Identity, &mut rng).unwrap();

    let ec = enc.forward(views.view()).unwrap();
    let pc = proj.forward(ec.output().view()).unwrap();
    let s1 = stage1_loss(ec.output().view(), pc.output().view(), tau, lambda_reg).unwrap();
    let (proj_grads, mut dz) = proj.backward(&pc, s1.grad_proj.view()).unwrap();
    if let Some(g) = &s1.grad_encoder {
        dz += g;
    }
    let (enc_grads, _) = enc.backward(&ec, dz.view()).unwrap();
    let analytic: Vec<f64> = enc_grads
        .slices()
        .into_iter()
        .chain(proj_grads.slices())
        .flatten()
        .copied()
        .collect();

    let mut nets = [enc, proj];
    let numeric = numeric_param_grad(&mut nets, |n| {
        let z = n[0].predict(views.view()).unwrap();
        let p = n[1].predict(z.view()).unwrap();
        stage1_loss(z.view(), p.view(), tau, lambda_reg).unwrap().loss
    });
    assert_eq!(analytic.len(), numeric.len());
    relative_error(&analytic, &numeric)
}
