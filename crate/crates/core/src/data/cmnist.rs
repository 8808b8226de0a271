//! Colored digits built from raw IDX files.
//!
//! Each grayscale digit is tinted multiplicatively: channel `c` of a pixel is
//! `intensity * palette[color][c]`, so background pixels stay black. Images
//! are stored channel-major (`3 x 28 x 28`, flattened to 2352 values in
//! `[0, 1]`).

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::idx::{self, IdxImages};
use super::{aligned_count, BiasedDataset, DatasetKind, DatasetMeta};
use crate::error::{Error, Result};
use crate::rng;

pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;

/// One color per digit class; every entry has a channel at exactly 1.0.
pub const PALETTE: [[f64; 3]; 10] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.0, 1.0],
    [0.5, 1.0, 0.0],
    [1.0, 0.5, 0.5],
];

/// Tints `gray` (intensities in `[0, 1]`, length 784) with `color` into a
/// channel-major 2352-vector.
pub fn colorize(gray: &[f64], color: [f64; 3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * gray.len());
    for c in color {
        out.extend(gray.iter().map(|g| g * c));
    }
    out
}

/// Recovers intensities from a tinted image (max over channels).
pub(crate) fn intensity(image: &[f64]) -> Vec<f64> {
    let n = image.len() / 3;
    (0..n)
        .map(|i| image[i].max(image[n + i]).max(image[2 * n + i]))
        .collect()
}

/// Colored digits from in-memory grayscale images (`count x 784` bytes).
pub fn cmnist_from_mnist(
    images: &IdxImages,
    labels: &[u8],
    r: f64,
    seed: u64,
) -> Result<BiasedDataset> {
    if images.rows != SIDE || images.cols != SIDE {
        return Err(Error::invalid(format!(
            "expected {SIDE}x{SIDE} images, got {}x{}",
            images.rows, images.cols
        )));
    }
    if images.count != labels.len() {
        return Err(Error::invalid(format!(
            "image count {} does not match label count {}",
            images.count,
            labels.len()
        )));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::invalid(format!("bias ratio {r} outside (0, 1]")));
    }
    let classes = PALETTE.len();
    if let Some(l) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::invalid(format!("digit label {l} >= {classes}")));
    }
    let n = images.count;
    let mut rng = rng::stream(seed, "data");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut aligned = vec![false; n];
    for &k in &order[..aligned_count(r, n)] {
        aligned[k] = true;
    }

    let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let mut biases = Vec::with_capacity(n);
    let mut inputs = Array2::<f64>::zeros((n, 3 * PIXELS));
    for k in 0..n {
        let y = targets[k];
        let b = if aligned[k] {
            y
        } else {
            let o = rng.random_range(0..classes - 1);
            if o >= y {
                o + 1
            } else {
                o
            }
        };
        biases.push(b);
        let gray: Vec<f64> = images.pixels[k * PIXELS..(k + 1) * PIXELS]
            .iter()
            .map(|&p| f64::from(p) / 255.0)
            .collect();
        for (dst, v) in inputs
            .row_mut(k)
            .iter_mut()
            .zip(colorize(&gray, PALETTE[b]))
        {
            *dst = v;
        }
    }
    BiasedDataset::new(
        inputs,
        targets,
        biases,
        DatasetMeta {
            bias_ratio: r,
            seed,
            num_classes: classes,
            num_bias_classes: classes,
            kind: DatasetKind::Cmnist {
                palette: PALETTE.to_vec(),
            },
        },
    )
}

pub fn cmnist_from_idx(
    images_path: &Path,
    labels_path: &Path,
    r: f64,
    seed: u64,
) -> Result<BiasedDataset> {
    let images = idx::read_images(images_path)?;
    let labels = idx::read_labels(labels_path)?;
    if images.count != labels.len() {
        return Err(Error::format(
            images_path,
            format!(
                "{} images but {} labels in {}",
                images.count,
                labels.len(),
                labels_path.display()
            ),
        ));
    }
    cmnist_from_mnist(&images, &labels, r, seed)
}
