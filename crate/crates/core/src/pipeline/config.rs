use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    cmnist_from_idx, gen_colorpoints, make_unbiased_testset, AugmentConfig, BiasedDataset,
    GenConfig, Modality, BIAS_NOISE, COLOR_SCALE,
};
use crate::error::{Error, Result};
use crate::losses::DEFAULT_TEMPERATURE;
use crate::rng;

fn color_scale() -> f64 {
    COLOR_SCALE
}

fn bias_noise() -> f64 {
    BIAS_NOISE
}

/// Where the training data and its unbiased test set come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    ColorPoints {
        n: usize,
        n_test: usize,
        classes: usize,
        bias_ratio: f64,
        noise: f64,
        input_dim: usize,
        modes: usize,
        #[serde(default = "color_scale")]
        color_scale: f64,
        #[serde(default = "bias_noise")]
        color_noise: f64,
    },
    /// Colored MNIST from IDX files; the test split is re-tinted with
    /// uniformly random colors.
    Cmnist {
        images: PathBuf,
        labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        bias_ratio: f64,
    },
    /// A directory written by `BiasedDataset::save_dir` pairs: `train/` and
    /// `test/`. The ratio and modality mirror `train/meta.json` and cannot be
    /// changed.
    Directory {
        path: PathBuf,
        bias_ratio: f64,
        modality: Modality,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let g = GenConfig::default();
        DatasetSpec::ColorPoints {
            n: g.n,
            n_test: 2000,
            classes: g.classes,
            bias_ratio: g.bias_ratio,
            noise: g.noise,
            input_dim: g.input_dim,
            modes: g.modes,
            color_scale: g.color_scale,
            color_noise: g.color_noise,
        }
    }
}

impl DatasetSpec {
    pub fn bias_ratio(&self) -> f64 {
        match self {
            DatasetSpec::ColorPoints { bias_ratio, .. }
            | DatasetSpec::Cmnist { bias_ratio, .. }
            | DatasetSpec::Directory { bias_ratio, .. } => *bias_ratio,
        }
    }

    pub fn with_bias_ratio(&self, r: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            DatasetSpec::ColorPoints { bias_ratio, .. }
            | DatasetSpec::Cmnist { bias_ratio, .. }
            | DatasetSpec::Directory { bias_ratio, .. } => *bias_ratio = r,
        }
        out
    }

    pub fn modality(&self) -> Modality {
        match self {
            DatasetSpec::ColorPoints { .. } => Modality::Vector,
            DatasetSpec::Cmnist { .. } => Modality::CmnistImage,
            DatasetSpec::Directory { modality, .. } => *modality,
        }
    }

    /// Spec for a saved `train/` + `test/` directory, read from its metadata.
    pub fn directory(path: &Path) -> Result<Self> {
        let train = BiasedDataset::load_dir(&path.join("train"))?;
        Ok(DatasetSpec::Directory {
            path: path.to_path_buf(),
            bias_ratio: train.bias_ratio(),
            modality: train.modality(),
        })
    }

    /// Biased training set and unbiased test set for `seed`.
    pub fn materialize(&self, seed: u64) -> Result<(BiasedDataset, BiasedDataset)> {
        match self {
            DatasetSpec::ColorPoints {
                n,
                n_test,
                classes,
                bias_ratio,
                noise,
                input_dim,
                modes,
                color_scale,
                color_noise,
            } => {
                let gen = |n: usize, seed: u64| {
                    gen_colorpoints(&GenConfig {
                        n,
                        classes: *classes,
                        bias_ratio: *bias_ratio,
                        noise: *noise,
                        input_dim: *input_dim,
                        modes: *modes,
                        color_scale: *color_scale,
                        color_noise: *color_noise,
                        seed,
                    })
                };
                let train = gen(*n, seed)?;
                let test_seed = rng::stream_key(seed, "test");
                let test = make_unbiased_testset(&gen(*n_test, test_seed)?, test_seed)?;
                Ok((train, test))
            }
            DatasetSpec::Cmnist {
                images,
                labels,
                test_images,
                test_labels,
                bias_ratio,
            } => {
                let train = cmnist_from_idx(images, labels, *bias_ratio, seed)?;
                let test_seed = rng::stream_key(seed, "test");
                let test = make_unbiased_testset(
                    &cmnist_from_idx(test_images, test_labels, 1.0, test_seed)?,
                    test_seed,
                )?;
                Ok((train, test))
            }
            DatasetSpec::Directory {
                path,
                bias_ratio,
                modality,
            } => {
                let train = BiasedDataset::load_dir(&path.join("train"))?;
                let test = BiasedDataset::load_dir(&path.join("test"))?;
                if train.bias_ratio() != *bias_ratio || train.modality() != *modality {
                    return Err(Error::invalid(format!(
                        "{}: stored data has r = {} ({:?}), config asks for r = {bias_ratio} ({modality:?})",
                        path.display(),
                        train.bias_ratio(),
                        train.modality()
                    )));
                }
                if test.input_dim() != train.input_dim() {
                    return Err(Error::shape(
                        "test inputs",
                        train.input_dim(),
                        test.input_dim(),
                    ));
                }
                Ok((train, test))
            }
        }
    }
}

/// Linear-probe training on frozen features (Adam, constant step size).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            lr: 1e-2,
            batch_size: 256,
            l2: 0.0,
        }
    }
}

/// Whole-model finetuning with heavy-ball SGD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemisupConfig {
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub l2: f64,
    pub batch_size: usize,
}

impl Default for SemisupConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            lr: 1e-4,
            momentum: 0.9,
            l2: 0.1,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub lambda_reg: f64,
    pub lambda_up: f64,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub l2: f64,
    /// Encoder hidden widths; the encoder maps input -> hidden... -> latent_dim.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    /// Fraction of training labels available downstream (semi-supervised runs).
    pub label_fraction: f64,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    /// `None` picks the default family for the dataset's modality.
    pub augment: Option<AugmentConfig>,
    pub probe: ProbeConfig,
    pub semisup: SemisupConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 0.0,
            lambda_up: 8.0,
            temperature: DEFAULT_TEMPERATURE,
            epochs: 20,
            batch_size: 256,
            base_lr: 3e-4,
            warmup_epochs: 2,
            l2: 1e-4,
            hidden: vec![256, 256],
            latent_dim: 64,
            projection_hidden: 64,
            projection_dim: 32,
            label_fraction: 1.0,
            seeds: vec![0],
            dataset: DatasetSpec::default(),
            augment: None,
            probe: ProbeConfig::default(),
            semisup: SemisupConfig::default(),
        }
    }
}

fn require(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(msg()))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        require(
            self.lambda_reg >= 0.0 && self.lambda_reg.is_finite(),
            || format!("lambda_reg {} must be >= 0", self.lambda_reg),
        )?;
        require(self.lambda_up >= 1.0 && self.lambda_up.is_finite(), || {
            format!("lambda_up {} must be >= 1", self.lambda_up)
        })?;
        require(
            self.temperature > 0.0 && self.temperature.is_finite(),
            || format!("temperature {} must be > 0", self.temperature),
        )?;
        require(self.epochs > 0, || "epochs must be positive".into())?;
        require(self.batch_size >= 2, || {
            format!("batch size {} must be >= 2", self.batch_size)
        })?;
        require(self.base_lr > 0.0 && self.base_lr.is_finite(), || {
            format!("base_lr {} must be > 0", self.base_lr)
        })?;
        require(self.warmup_epochs < self.epochs, || {
            format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )
        })?;
        require(self.l2 >= 0.0, || format!("l2 {} must be >= 0", self.l2))?;
        require(self.latent_dim >= 2, || "latent_dim must be >= 2".into())?;
        require(!self.hidden.contains(&0), || {
            "hidden widths must be positive".into()
        })?;
        require(
            self.projection_hidden > 0 && self.projection_dim > 0,
            || "projection widths must be positive".into(),
        )?;
        require(
            self.label_fraction > 0.0 && self.label_fraction <= 1.0,
            || format!("label_fraction {} outside (0, 1]", self.label_fraction),
        )?;
        require(!self.seeds.is_empty(), || "seeds must not be empty".into())?;
        let r = self.dataset.bias_ratio();
        require(r > 0.0 && r <= 1.0, || {
            format!("bias ratio {r} outside (0, 1]")
        })?;
        require(
            self.probe.iterations > 0 && self.probe.lr > 0.0 && self.probe.batch_size > 0,
            || format!("invalid probe config {:?}", self.probe),
        )?;
        require(
            self.semisup.lr > 0.0
                && self.semisup.batch_size > 0
                && (0.0..1.0).contains(&self.semisup.momentum),
            || format!("invalid semisup config {:?}", self.semisup),
        )?;
        if let Some(aug) = &self.augment {
            aug.validate()?;
            require(aug.modality() == self.dataset.modality(), || {
                format!(
                    "augmentation for {:?} does not match dataset modality {:?}",
                    aug.modality(),
                    self.dataset.modality()
                )
            })?;
        }
        Ok(())
    }

    pub fn augment_config(&self) -> AugmentConfig {
        self.augment
            .unwrap_or_else(|| AugmentConfig::for_modality(self.dataset.modality()))
    }

    /// Layer widths of the encoder for inputs of width `input_dim`.
    pub fn encoder_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.latent_dim);
        dims
    }

    pub fn projection_dims(&self) -> Vec<usize> {
        vec![self.latent_dim, self.projection_hidden, self.projection_dim]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"lambda_reg": 0.5, "epochs": 3}"#).unwrap();
        assert_eq!(cfg.lambda_reg, 0.5);
        assert_eq!(cfg.batch_size, 256);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"lamda_reg": 0.5}"#).is_err());
    }

    #[test]
    fn range_violations_are_rejected() {
        let bad = [
            ExperimentConfig {
                lambda_up: 0.5,
                ..Default::default()
            },
            ExperimentConfig {
                temperature: 0.0,
                ..Default::default()
            },
            ExperimentConfig {
                lambda_reg: -1.0,
                ..Default::default()
            },
            ExperimentConfig {
                warmup_epochs: 20,
                ..Default::default()
            },
            ExperimentConfig {
                seeds: vec![],
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn materialized_test_set_is_unbiased() {
        let spec = DatasetSpec::ColorPoints {
            n: 1000,
            n_test: 1000,
            classes: 10,
            bias_ratio: 0.99,
            noise: 0.25,
            input_dim: 19,
            modes: 4,
            color_scale: 1.0,
            color_noise: BIAS_NOISE,
        };
        let (train, test) = spec.materialize(1).unwrap();
        assert_eq!(train.aligned_count(), 990);
        assert!(test.alignment_fraction() < 0.2);
    }
}
