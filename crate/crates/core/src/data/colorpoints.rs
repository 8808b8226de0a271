//! ColorPoints: a download-free analog of colored digits.
//!
//! The target is carried by a hard signal spread over many coordinates: each
//! class is a mixture of several Gaussian modes around fixed prototypes. The
//! bias is carried by an easy, one-dimensional one: a color on a red-to-blue
//! ramp, stored in three coordinates. Exactly `round(r * n)` samples are bias-aligned.

use ndarray::{Array2, Array3, ArrayViewMut1};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{aligned_count, BiasedDataset, DatasetKind, DatasetMeta};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Default standard deviation of the noise on the color coordinates.
pub const BIAS_NOISE: f64 = 0.05;

/// Default multiplier on the ramp colors.
pub const COLOR_SCALE: f64 = 4.0;

/// Width of the color block at the end of every input row.
pub const COLOR_DIMS: usize = 3;

/// Prototypes depend only on the task shape, never on the sampling seed, so
/// training and test sets drawn with different seeds share one task.
const PROTOTYPE_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n: usize,
    pub classes: usize,
    pub bias_ratio: f64,
    /// Per-coordinate standard deviation around a target prototype.
    pub noise: f64,
    /// Total input width: target coordinates plus three color coordinates.
    pub input_dim: usize,
    /// Gaussian modes per target class.
    pub modes: usize,
    /// Multiplier on the ramp colors.
    #[serde(default = "default_color_scale")]
    pub color_scale: f64,
    /// Per-coordinate noise on the color block.
    #[serde(default = "bias_noise")]
    pub color_noise: f64,
    pub seed: u64,
}

fn default_color_scale() -> f64 {
    COLOR_SCALE
}

fn bias_noise() -> f64 {
    BIAS_NOISE
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n: 10_000,
            classes: 10,
            bias_ratio: 0.99,
            noise: 0.15,
            input_dim: 19,
            modes: 4,
            color_scale: COLOR_SCALE,
            color_noise: BIAS_NOISE,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid(format!(
                "classes = {} (need >= 2)",
                self.classes
            )));
        }
        if !(self.bias_ratio > 0.0 && self.bias_ratio <= 1.0) {
            return Err(Error::invalid(format!(
                "bias ratio {} outside (0, 1]",
                self.bias_ratio
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid(format!("noise {} must be >= 0", self.noise)));
        }
        if self.input_dim < COLOR_DIMS + 2 {
            return Err(Error::invalid(format!(
                "input_dim {} too small: need at least {}",
                self.input_dim,
                COLOR_DIMS + 2
            )));
        }
        if !(self.color_scale > 0.0 && self.color_scale.is_finite() && self.color_noise >= 0.0) {
            return Err(Error::invalid(format!(
                "color scale {} / noise {} out of range",
                self.color_scale, self.color_noise
            )));
        }
        if self.modes == 0 {
            return Err(Error::invalid("modes must be positive"));
        }
        if self.n == 0 {
            return Err(Error::invalid("n must be positive"));
        }
        Ok(())
    }

    pub fn complex_dims(&self) -> usize {
        self.input_dim - COLOR_DIMS
    }
}

/// `classes x modes x dims` prototypes with entries `N(0, 1 / dims)`.
fn prototypes(classes: usize, modes: usize, dims: usize) -> Array3<f64> {
    let mut rng = rng::substream(
        PROTOTYPE_SEED,
        "prototypes",
        (classes * 1_000_003 + modes * 1009 + dims) as u64,
    );
    let scale = 1.0 / (dims as f64).sqrt();
    Array3::from_shape_simple_fn((classes, modes, dims), || {
        let e: f64 = StandardNormal.sample(&mut rng);
        scale * e
    })
}

/// Color of bias class `b`: a point on the red-to-blue ramp, so the bias
/// attribute varies along a single direction.
pub fn ramp_color(b: usize, classes: usize) -> [f64; 3] {
    let t = b as f64 / (classes - 1) as f64;
    [1.0 - t, 0.0, t]
}

/// Writes the scaled color of bias class `b` plus noise into `out` (length 3).
pub(crate) fn render_bias(
    b: usize,
    classes: usize,
    scale: f64,
    noise: f64,
    rng: &mut Rng,
    mut out: ArrayViewMut1<'_, f64>,
) {
    let color = ramp_color(b, classes);
    for (v, c) in out.iter_mut().zip(color) {
        let e: f64 = StandardNormal.sample(rng);
        *v = scale * c + noise * e;
    }
}

pub fn gen_colorpoints(cfg: &GenConfig) -> Result<BiasedDataset> {
    cfg.validate()?;
    let (n, c) = (cfg.n, cfg.classes);
    let mut rng = rng::stream(cfg.seed, "data");

    // Balanced targets in shuffled order.
    let mut targets: Vec<usize> = (0..n).map(|k| k % c).collect();
    targets.shuffle(&mut rng);

    // Exactly round(r n) aligned samples, chosen uniformly.
    let n_aligned = aligned_count(cfg.bias_ratio, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut aligned = vec![false; n];
    for &k in &order[..n_aligned] {
        aligned[k] = true;
    }
    let biases: Vec<usize> = (0..n)
        .map(|k| {
            let y = targets[k];
            if aligned[k] {
                y
            } else {
                // Uniform over the other c - 1 classes.
                let o = rng.random_range(0..c - 1);
                if o >= y {
                    o + 1
                } else {
                    o
                }
            }
        })
        .collect();

    let dims = cfg.complex_dims();
    let protos = prototypes(c, cfg.modes, dims);
    let mut inputs = Array2::<f64>::zeros((n, cfg.input_dim));
    for k in 0..n {
        let mode = rng.random_range(0..cfg.modes);
        let proto = protos.slice(ndarray::s![targets[k], mode, ..]);
        let mut row = inputs.row_mut(k);
        for (j, v) in row.iter_mut().take(dims).enumerate() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v = proto[j] + cfg.noise * e;
        }
        render_bias(
            biases[k],
            c,
            cfg.color_scale,
            cfg.color_noise,
            &mut rng,
            row.slice_mut(ndarray::s![dims..]),
        );
    }

    let ds = BiasedDataset::new(
        inputs,
        targets,
        biases,
        DatasetMeta {
            bias_ratio: cfg.bias_ratio,
            seed: cfg.seed,
            num_classes: c,
            num_bias_classes: c,
            kind: DatasetKind::ColorPoints {
                complex_dims: dims,
                noise: cfg.noise,
                color_scale: cfg.color_scale,
                color_noise: cfg.color_noise,
            },
        },
    )?;
    let counts = ds.group_counts();
    let empty = counts.0.iter().flatten().filter(|&&v| v == 0).count();
    if empty > 0 {
        log::warn!(
            "{empty} of {} (y, b) groups are empty at n = {n}, r = {}",
            c * c,
            cfg.bias_ratio
        );
    }
    Ok(ds)
}
