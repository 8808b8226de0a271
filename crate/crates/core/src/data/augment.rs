//! Stochastic view generation for contrastive pretraining.

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::cmnist::{PIXELS, SIDE};
use super::Modality;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Per-sample feature scaling, dropout and additive noise for vector data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VectorAugment {
    pub noise_std: f64,
    pub dropout: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for VectorAugment {
    fn default() -> Self {
        VectorAugment {
            noise_std: 0.1,
            dropout: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
        }
    }
}

impl VectorAugment {
    pub fn identity() -> Self {
        VectorAugment {
            noise_std: 0.0,
            dropout: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.noise_std >= 0.0
            && (0.0..1.0).contains(&self.dropout)
            && self.scale_min > 0.0
            && self.scale_min <= self.scale_max;
        if !ok {
            return Err(Error::invalid(format!(
                "invalid vector augmentation {self:?}"
            )));
        }
        Ok(())
    }

    fn apply(&self, x: ArrayView1<'_, f64>, rng: &mut Rng, mut out: ArrayViewMut1<'_, f64>) {
        let scale = if self.scale_max > self.scale_min {
            rng.random_range(self.scale_min..=self.scale_max)
        } else {
            self.scale_min
        };
        for (o, &v) in out.iter_mut().zip(x) {
            let keep = self.dropout == 0.0 || rng.random::<f64>() >= self.dropout;
            let mut y = if keep { v * scale } else { 0.0 };
            if self.noise_std > 0.0 {
                let e: f64 = StandardNormal.sample(rng);
                y += self.noise_std * e;
            }
            *o = y;
        }
    }
}

/// Resized crop, horizontal flip, color jitter and random grayscale on
/// channel-major `3 x 28 x 28` images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageAugment {
    pub crop_min_scale: f64,
    pub flip_p: f64,
    pub jitter: f64,
    pub jitter_p: f64,
    pub gray_p: f64,
}

impl Default for ImageAugment {
    fn default() -> Self {
        ImageAugment {
            crop_min_scale: 0.2,
            flip_p: 0.5,
            jitter: 0.4,
            jitter_p: 0.8,
            gray_p: 0.2,
        }
    }
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

impl ImageAugment {
    pub fn identity() -> Self {
        ImageAugment {
            crop_min_scale: 1.0,
            flip_p: 0.0,
            jitter: 0.0,
            jitter_p: 0.0,
            gray_p: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let ok = self.crop_min_scale > 0.0
            && self.crop_min_scale <= 1.0
            && prob(self.flip_p)
            && prob(self.jitter_p)
            && prob(self.gray_p)
            && (0.0..1.0).contains(&self.jitter);
        if !ok {
            return Err(Error::invalid(format!(
                "invalid image augmentation {self:?}"
            )));
        }
        Ok(())
    }

    /// Returns whether the grayscale step fired.
    fn apply(
        &self,
        x: ArrayView1<'_, f64>,
        rng: &mut Rng,
        mut out: ArrayViewMut1<'_, f64>,
    ) -> bool {
        let src: Vec<f64> = x.to_vec();
        let mut img = if self.crop_min_scale < 1.0 {
            random_resized_crop(&src, self.crop_min_scale, rng)
        } else {
            src
        };
        if self.flip_p > 0.0 && rng.random::<f64>() < self.flip_p {
            for c in 0..3 {
                for row in 0..SIDE {
                    let start = c * PIXELS + row * SIDE;
                    img[start..start + SIDE].reverse();
                }
            }
        }
        if self.jitter > 0.0 && rng.random::<f64>() < self.jitter_p {
            let lo = 1.0 - self.jitter;
            let hi = 1.0 + self.jitter;
            let brightness = rng.random_range(lo..hi);
            let contrast = rng.random_range(lo..hi);
            let saturation = rng.random_range(lo..hi);
            for v in img.iter_mut() {
                *v = (*v * brightness).clamp(0.0, 1.0);
            }
            let mean = img.iter().sum::<f64>() / img.len() as f64;
            for v in img.iter_mut() {
                *v = (mean + contrast * (*v - mean)).clamp(0.0, 1.0);
            }
            for i in 0..PIXELS {
                let g = luma(&img, i);
                for c in 0..3 {
                    let v = &mut img[c * PIXELS + i];
                    *v = (g + saturation * (*v - g)).clamp(0.0, 1.0);
                }
            }
        }
        let gray = self.gray_p > 0.0 && rng.random::<f64>() < self.gray_p;
        if gray {
            for i in 0..PIXELS {
                let g = luma(&img, i);
                for c in 0..3 {
                    img[c * PIXELS + i] = g;
                }
            }
        }
        for (o, v) in out.iter_mut().zip(img) {
            *o = v;
        }
        gray
    }
}

fn luma(img: &[f64], i: usize) -> f64 {
    LUMA[0] * img[i] + LUMA[1] * img[PIXELS + i] + LUMA[2] * img[2 * PIXELS + i]
}

fn random_resized_crop(img: &[f64], min_scale: f64, rng: &mut Rng) -> Vec<f64> {
    let side = SIDE as f64;
    let area = rng.random_range(min_scale..=1.0) * side * side;
    let log_ratio = rng.random_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
    let ratio = log_ratio.exp();
    let w = (area * ratio).sqrt().min(side);
    let h = (area / ratio).sqrt().min(side);
    let x0 = rng.random_range(0.0..=side - w);
    let y0 = rng.random_range(0.0..=side - h);
    let mut out = vec![0.0; 3 * PIXELS];
    for r in 0..SIDE {
        // Sample at pixel centers of the crop window.
        let sy = (y0 + (r as f64 + 0.5) * h / side - 0.5).clamp(0.0, side - 1.0);
        let (ya, fy) = (sy.floor() as usize, sy.fract());
        let yb = (ya + 1).min(SIDE - 1);
        for col in 0..SIDE {
            let sx = (x0 + (col as f64 + 0.5) * w / side - 0.5).clamp(0.0, side - 1.0);
            let (xa, fx) = (sx.floor() as usize, sx.fract());
            let xb = (xa + 1).min(SIDE - 1);
            for c in 0..3 {
                let p = |yy: usize, xx: usize| img[c * PIXELS + yy * SIDE + xx];
                let top = p(ya, xa) * (1.0 - fx) + p(ya, xb) * fx;
                let bottom = p(yb, xa) * (1.0 - fx) + p(yb, xb) * fx;
                out[c * PIXELS + r * SIDE + col] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Augmentation family, one variant per input modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "modality", rename_all = "kebab-case")]
pub enum AugmentConfig {
    Vector(VectorAugment),
    CmnistImage(ImageAugment),
}

impl AugmentConfig {
    pub fn for_modality(modality: Modality) -> Self {
        match modality {
            Modality::Vector => AugmentConfig::Vector(VectorAugment::default()),
            Modality::CmnistImage => AugmentConfig::CmnistImage(ImageAugment::default()),
        }
    }

    pub fn identity(modality: Modality) -> Self {
        match modality {
            Modality::Vector => AugmentConfig::Vector(VectorAugment::identity()),
            Modality::CmnistImage => AugmentConfig::CmnistImage(ImageAugment::identity()),
        }
    }

    pub fn modality(&self) -> Modality {
        match self {
            AugmentConfig::Vector(_) => Modality::Vector,
            AugmentConfig::CmnistImage(_) => Modality::CmnistImage,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AugmentConfig::Vector(a) => a.validate(),
            AugmentConfig::CmnistImage(a) => a.validate(),
        }
    }

    /// One augmented copy of every row of `x`.
    pub fn view(&self, x: ArrayView2<'_, f64>, rng: &mut Rng) -> Result<Array2<f64>> {
        self.validate()?;
        if let AugmentConfig::CmnistImage(_) = self {
            if x.ncols() != 3 * PIXELS {
                return Err(Error::shape("image augmentation", 3 * PIXELS, x.ncols()));
            }
        }
        let mut out = Array2::zeros(x.raw_dim());
        for (row, dst) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            match self {
                AugmentConfig::Vector(a) => a.apply(row, rng, dst),
                AugmentConfig::CmnistImage(a) => {
                    a.apply(row, rng, dst);
                }
            }
        }
        Ok(out)
    }
}

/// Two independently augmented views of a batch.
pub fn augment_views(
    x: ArrayView2<'_, f64>,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let v1 = cfg.view(x, rng)?;
    let v2 = cfg.view(x, rng)?;
    Ok((v1, v2))
}
