use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bias class spuriously associated with target class `y`.
pub fn spurious_map(y: usize) -> usize {
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Vector,
    CmnistImage,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vector" => Ok(Modality::Vector),
            "cmnist-image" => Ok(Modality::CmnistImage),
            other => Err(Error::invalid(format!(
                "unknown modality {other:?} (expected vector or cmnist-image)"
            ))),
        }
    }
}

/// How the bias attribute is rendered into the inputs, needed to re-render
/// a sample under a different bias label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Leading `complex_dims` coordinates carry the target; the trailing
    /// three carry the bias color.
    ColorPoints {
        complex_dims: usize,
        noise: f64,
        color_scale: f64,
        color_noise: f64,
    },
    /// `3 x 28 x 28` channel-major images tinted by the bias color.
    Cmnist { palette: Vec<[f64; 3]> },
}

impl DatasetKind {
    pub fn modality(&self) -> Modality {
        match self {
            DatasetKind::ColorPoints { .. } => Modality::Vector,
            DatasetKind::Cmnist { .. } => Modality::CmnistImage,
        }
    }
}

/// Contents of `meta.json` in a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub bias_ratio: f64,
    pub seed: u64,
    pub num_classes: usize,
    pub num_bias_classes: usize,
    pub kind: DatasetKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasedDataset {
    inputs: Array2<f64>,
    targets: Vec<usize>,
    biases: Vec<usize>,
    aligned: Vec<bool>,
    meta: DatasetMeta,
}

/// Sample counts per `(y, b)` group, `counts[y][b]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupCounts(pub Vec<Vec<usize>>);

impl BiasedDataset {
    pub fn new(
        inputs: Array2<f64>,
        targets: Vec<usize>,
        biases: Vec<usize>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        let n = inputs.nrows();
        if targets.len() != n || biases.len() != n {
            return Err(Error::shape(
                "dataset labels",
                n,
                format!("{} targets / {} biases", targets.len(), biases.len()),
            ));
        }
        if meta.num_classes < 2 {
            return Err(Error::invalid("need at least two target classes"));
        }
        if let Some(y) = targets.iter().find(|&&y| y >= meta.num_classes) {
            return Err(Error::invalid(format!(
                "target label {y} >= {}",
                meta.num_classes
            )));
        }
        if let Some(b) = biases.iter().find(|&&b| b >= meta.num_bias_classes) {
            return Err(Error::invalid(format!(
                "bias label {b} >= {}",
                meta.num_bias_classes
            )));
        }
        if let Some(((r, c), _)) = inputs.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "dataset inputs",
                row: r,
                col: c,
            });
        }
        let aligned = targets
            .iter()
            .zip(&biases)
            .map(|(&y, &b)| b == spurious_map(y))
            .collect();
        Ok(Self {
            inputs,
            targets,
            biases,
            aligned,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn biases(&self) -> &[usize] {
        &self.biases
    }

    pub fn aligned(&self) -> &[bool] {
        &self.aligned
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn kind(&self) -> &DatasetKind {
        &self.meta.kind
    }

    pub fn modality(&self) -> Modality {
        self.meta.kind.modality()
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    pub fn num_bias_classes(&self) -> usize {
        self.meta.num_bias_classes
    }

    /// Nominal bias ratio the dataset was built with.
    pub fn bias_ratio(&self) -> f64 {
        self.meta.bias_ratio
    }

    pub fn aligned_count(&self) -> usize {
        self.aligned.iter().filter(|a| **a).count()
    }

    pub fn conflicting_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| !self.aligned[k]).collect()
    }

    pub fn alignment_fraction(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.aligned_count() as f64 / self.len() as f64
        }
    }

    pub fn group_counts(&self) -> GroupCounts {
        let mut counts = vec![vec![0; self.num_bias_classes()]; self.num_classes()];
        for (&y, &b) in self.targets.iter().zip(&self.biases) {
            counts[y][b] += 1;
        }
        GroupCounts(counts)
    }

    /// Samples at `indices`, in that order. The nominal bias ratio becomes the
    /// subset's observed alignment fraction.
    pub fn select(&self, indices: &[usize]) -> Self {
        let inputs = self.inputs.select(Axis(0), indices);
        let targets: Vec<usize> = indices.iter().map(|&k| self.targets[k]).collect();
        let biases: Vec<usize> = indices.iter().map(|&k| self.biases[k]).collect();
        let aligned: Vec<bool> = indices.iter().map(|&k| self.aligned[k]).collect();
        let frac = if indices.is_empty() {
            0.0
        } else {
            aligned.iter().filter(|a| **a).count() as f64 / indices.len() as f64
        };
        Self {
            inputs,
            targets,
            biases,
            aligned,
            meta: DatasetMeta {
                bias_ratio: frac,
                ..self.meta.clone()
            },
        }
    }

    /// The same samples with target and bias labels exchanged (the bias
    /// attribute becomes the prediction target).
    pub fn swap_roles(&self) -> Result<Self> {
        let meta = DatasetMeta {
            num_classes: self.meta.num_bias_classes,
            num_bias_classes: self.meta.num_classes,
            ..self.meta.clone()
        };
        Self::new(
            self.inputs.clone(),
            self.biases.clone(),
            self.targets.clone(),
            meta,
        )
    }

    pub(crate) fn with_inputs_and_biases(
        &self,
        inputs: Array2<f64>,
        biases: Vec<usize>,
        bias_ratio: f64,
    ) -> Result<Self> {
        let meta = DatasetMeta {
            bias_ratio,
            ..self.meta.clone()
        };
        Self::new(inputs, self.targets.clone(), biases, meta)
    }

    /// Writes `inputs.csv`, `labels.csv` (`y,b,aligned`) and `meta.json`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut text = String::with_capacity(self.inputs.len() * 20);
        for row in self.inputs.rows() {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    text.push(',');
                }
                write!(text, "{v:e}").expect("string write");
            }
            text.push('\n');
        }
        let p = dir.join("inputs.csv");
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;

        let mut labels = String::from("y,b,aligned\n");
        for k in 0..self.len() {
            writeln!(
                labels,
                "{},{},{}",
                self.targets[k],
                self.biases[k],
                u8::from(self.aligned[k])
            )
            .expect("string write");
        }
        let p = dir.join("labels.csv");
        fs::write(&p, labels).map_err(|e| Error::io(&p, e))?;

        let p = dir.join("meta.json");
        fs::write(&p, serde_json::to_string_pretty(&self.meta)? + "\n")
            .map_err(|e| Error::io(&p, e))?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let meta: DatasetMeta = serde_json::from_str(&read("meta.json")?)?;

        let inputs_path = dir.join("inputs.csv");
        let mut flat = Vec::new();
        let mut width = None;
        let mut rows = 0;
        for (i, line) in read("inputs.csv")?.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let before = flat.len();
            for field in line.split(',') {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::format(
                        &inputs_path,
                        format!("line {}: bad number {field:?}", i + 1),
                    )
                })?;
                flat.push(v);
            }
            let w = flat.len() - before;
            match width {
                None => width = Some(w),
                Some(prev) if prev != w => {
                    return Err(Error::format(
                        &inputs_path,
                        format!("line {}: {w} columns, expected {prev}", i + 1),
                    ))
                }
                _ => {}
            }
            rows += 1;
        }
        let inputs = Array2::from_shape_vec((rows, width.unwrap_or(0)), flat).expect("rectangular");

        let labels_path = dir.join("labels.csv");
        let mut targets = Vec::with_capacity(rows);
        let mut biases = Vec::with_capacity(rows);
        let mut flags = Vec::with_capacity(rows);
        for (i, line) in read("labels.csv")?.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || {
                Error::format(
                    &labels_path,
                    format!("line {}: expected y,b,aligned", i + 1),
                )
            };
            if f.len() != 3 {
                return Err(bad());
            }
            targets.push(f[0].parse().map_err(|_| bad())?);
            biases.push(f[1].parse().map_err(|_| bad())?);
            flags.push(f[2] == "1");
        }
        let ds = Self::new(inputs, targets, biases, meta)?;
        if ds.aligned != flags {
            return Err(Error::format(
                &labels_path,
                "aligned column disagrees with (y, b)",
            ));
        }
        Ok(ds)
    }
}
