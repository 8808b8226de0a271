use std::collections::BTreeMap;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::cmnist::{colorize, intensity};
use super::colorpoints::render_bias;
use super::{BiasedDataset, DatasetKind};
use crate::error::{Error, Result};
use crate::rng;

fn check_fraction(f: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::invalid(format!("{what} {f} outside [0, 1]")));
    }
    Ok(())
}

/// Stratified split by `(y, b)` group. Samples are laid out group by group
/// (conflicting groups last, members shuffled) and every `1 / fraction`-th
/// position is taken from a random offset. Each group contributes the floor
/// or ceiling of `fraction * size`, and so does any run of adjacent groups:
/// the conflicting samples as a whole keep their share even when every
/// single group is smaller than `1 / fraction`. Both parts keep the original
/// sample order.
pub fn split(
    ds: &BiasedDataset,
    fraction: f64,
    seed: u64,
) -> Result<(BiasedDataset, BiasedDataset)> {
    check_fraction(fraction, "split fraction")?;
    let mut groups: BTreeMap<(bool, usize, usize), Vec<usize>> = BTreeMap::new();
    for k in 0..ds.len() {
        groups
            .entry((!ds.aligned()[k], ds.targets()[k], ds.biases()[k]))
            .or_default()
            .push(k);
    }
    let mut rng = rng::stream(seed, "split");
    let mut layout = Vec::with_capacity(ds.len());
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
        layout.extend_from_slice(members);
    }
    let offset: f64 = rng.random();
    let mut first: Vec<usize> = layout
        .iter()
        .enumerate()
        .filter(|&(p, _)| {
            ((p + 1) as f64 * fraction + offset).floor() > (p as f64 * fraction + offset).floor()
        })
        .map(|(_, &k)| k)
        .collect();
    first.sort_unstable();
    let mut in_first = vec![false; ds.len()];
    for &k in &first {
        in_first[k] = true;
    }
    let rest: Vec<usize> = (0..ds.len()).filter(|&k| !in_first[k]).collect();
    Ok((ds.select(&first), ds.select(&rest)))
}

/// Labeled part `D_l` (a stratified `fraction` of the data) and unlabeled
/// remainder `D_u`. Labels of `D_u` remain attached but are never consumed by
/// pretraining.
pub fn label_fraction_split(
    ds: &BiasedDataset,
    fraction: f64,
    seed: u64,
) -> Result<(BiasedDataset, BiasedDataset)> {
    check_fraction(fraction, "label fraction")?;
    split(ds, fraction, rng::stream_key(seed, "label-fraction"))
}

/// Reassigns every bias label uniformly at random, independently of the
/// target, and re-renders the bias attribute in the inputs.
pub fn make_unbiased_testset(source: &BiasedDataset, seed: u64) -> Result<BiasedDataset> {
    let mut rng = rng::stream(seed, "unbiased-test");
    let cb = source.num_bias_classes();
    let biases: Vec<usize> = (0..source.len()).map(|_| rng.random_range(0..cb)).collect();
    let mut inputs = source.inputs().to_owned();
    match source.kind() {
        DatasetKind::ColorPoints {
            complex_dims,
            color_scale,
            color_noise,
            ..
        } => {
            let split = *complex_dims;
            for (k, mut row) in inputs.axis_iter_mut(Axis(0)).enumerate() {
                let (_, bias_part) = row.view_mut().split_at(Axis(0), split);
                render_bias(
                    biases[k],
                    cb,
                    *color_scale,
                    *color_noise,
                    &mut rng,
                    bias_part,
                );
            }
        }
        DatasetKind::Cmnist { palette } => {
            for (k, mut row) in inputs.axis_iter_mut(Axis(0)).enumerate() {
                let gray = intensity(row.as_slice().expect("standard layout"));
                for (dst, v) in row.iter_mut().zip(colorize(&gray, palette[biases[k]])) {
                    *dst = v;
                }
            }
        }
    }
    let aligned = source
        .targets()
        .iter()
        .zip(&biases)
        .filter(|(&y, &b)| b == super::spurious_map(y))
        .count();
    let frac = if source.is_empty() {
        0.0
    } else {
        aligned as f64 / source.len() as f64
    };
    source.with_inputs_and_biases(inputs, biases, frac)
}

/// Removes `round(s * aligned)` bias-aligned samples chosen uniformly at
/// random; conflicting samples are untouched.
pub fn subsample_aligned(ds: &BiasedDataset, s: f64, seed: u64) -> Result<BiasedDataset> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::invalid(format!(
            "subsampling fraction {s} outside [0, 1)"
        )));
    }
    let mut aligned: Vec<usize> = (0..ds.len()).filter(|&k| ds.aligned()[k]).collect();
    let remove = (s * aligned.len() as f64).round() as usize;
    let mut rng = rng::stream(seed, "subsample");
    aligned.shuffle(&mut rng);
    let mut drop = vec![false; ds.len()];
    for &k in &aligned[..remove] {
        drop[k] = true;
    }
    let keep: Vec<usize> = (0..ds.len()).filter(|&k| !drop[k]).collect();
    Ok(ds.select(&keep))
}
