//! Central finite-difference checks (h = 1e-5, norm-wise relative error
//! below 1e-4) for every loss, alone and composed with the networks.

mod support;

use ndarray::{concatenate, Array2, Axis};
use rand::Rng as _;
use rankdebias::losses::{cross_entropy, nt_xent, ContrastiveBatch};
use rankdebias::nn::{Activation, DenseNet};
use rankdebias::rng;
use rankdebias::spectral::{rank_loss, rank_loss_with_grad};
use support::{array_error, gaussian, numeric_grad, numeric_param_grad, relative_error, TOL};

const INSTANCES: u64 = 100;

fn check_all(name: &str, instance: fn(u64) -> f64) {
    for seed in 0..INSTANCES {
        let err = instance(seed);
        assert!(err < TOL, "{name} instance {seed}: relative error {err:e}");
    }
}

#[test]
fn rank_loss_gradient() {
    check_all("rank_loss", support::rank_loss_fd);
}

#[test]
fn nt_xent_gradient() {
    check_all("nt_xent", support::nt_xent_fd);
}

#[test]
fn cross_entropy_gradient() {
    check_all("cross_entropy", support::cross_entropy_fd);
}

#[test]
fn debias_loss_gradient() {
    check_all("debias_loss", support::debias_loss_fd);
}

#[test]
fn stage1_composite_gradient() {
    check_all("stage1 composite", support::stage1_composite_fd);
}

#[test]
fn supervised_composite_gradient() {
    // Cross-entropy on a linear head plus the rank term on the encoder output.
    for seed in 0..INSTANCES {
        let mut rng = rng::substream(6, "erm-fd", seed);
        let n = rng.random_range(3..=10);
        let m = rng.random_range(2..=6);
        let d = rng.random_range(2..=6);
        let c = rng.random_range(2..=5);
        let lambda_reg = rng.random_range(0.0..2.0);
        let x = gaussian(n, m, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let enc = DenseNet::new(&[m, 8, d], Activation::Identity, &mut rng).unwrap();
        let head = DenseNet::new(&[d, c], Activation::Identity, &mut rng).unwrap();

        let ec = enc.forward(x.view()).unwrap();
        let hc = head.forward(ec.output().view()).unwrap();
        let ce = cross_entropy(hc.output().view(), &labels).unwrap();
        let (head_grads, mut dz) = head.backward(&hc, ce.grad.view()).unwrap();
        let (_, rg) = rank_loss_with_grad(ec.output().view()).unwrap();
        dz.scaled_add(lambda_reg, &rg);
        let (enc_grads, dx) = enc.backward(&ec, dz.view()).unwrap();
        let analytic: Vec<f64> = enc_grads
            .slices()
            .into_iter()
            .chain(head_grads.slices())
            .flatten()
            .copied()
            .collect();

        let value = |nets: &[DenseNet], x: &Array2<f64>| {
            let z = nets[0].predict(x.view()).unwrap();
            let logits = nets[1].predict(z.view()).unwrap();
            cross_entropy(logits.view(), &labels).unwrap().loss + lambda_reg * rank_loss(z.view()).unwrap()
        };
        let mut nets = [enc, head];
        let numeric = numeric_param_grad(&mut nets, |n| value(n, &x));
        let err = relative_error(&analytic, &numeric);
        assert!(err < TOL, "supervised composite instance {seed}: relative error {err:e}");

        // Input gradient as well.
        let fd_x = numeric_grad(&x, |x| value(&nets, x));
        let err = array_error(&dx, &fd_x);
        assert!(err < TOL, "supervised composite (input) instance {seed}: relative error {err:e}");
    }
}

#[test]
fn stage1_views_are_stacked_pairs() {
    // Rows k and k + n are the two views of sample k: swapping the halves
    // leaves the loss unchanged.
    let mut rng = rng::stream(9, "swap");
    let a = gaussian(4, 3, &mut rng);
    let b = gaussian(4, 3, &mut rng);
    let ab = concatenate(Axis(0), &[a.view(), b.view()]).unwrap();
    let ba = concatenate(Axis(0), &[b.view(), a.view()]).unwrap();
    let l1 = nt_xent(&ContrastiveBatch::new(ab.view(), 0.5).unwrap()).unwrap().loss;
    let l2 = nt_xent(&ContrastiveBatch::new(ba.view(), 0.5).unwrap()).unwrap().loss;
    assert!((l1 - l2).abs() < 1e-12);
}
