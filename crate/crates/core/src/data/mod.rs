//! Biased datasets with a controllable spurious correlation.
//!
//! Every sample carries a target label `y`, a bias label `b` and an
//! `aligned` flag. The spurious association is the identity map (bias class
//! `i` goes with target class `i`), so a sample is bias-aligned iff `b == y`.

mod augment;
mod cmnist;
mod colorpoints;
mod dataset;
pub mod idx;
mod split;

pub use augment::{augment_views, AugmentConfig, ImageAugment, VectorAugment};
pub use cmnist::{cmnist_from_idx, cmnist_from_mnist, colorize, PALETTE};
pub use colorpoints::{
    gen_colorpoints, ramp_color, GenConfig, BIAS_NOISE, COLOR_DIMS, COLOR_SCALE,
};
pub use dataset::{spurious_map, BiasedDataset, DatasetKind, DatasetMeta, GroupCounts, Modality};
pub use split::{label_fraction_split, make_unbiased_testset, split, subsample_aligned};

/// `round(r * n)` with halves rounded away from zero.
pub fn aligned_count(r: f64, n: usize) -> usize {
    (r * n as f64).round() as usize
}
