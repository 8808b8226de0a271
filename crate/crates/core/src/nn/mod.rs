//! Dense feed-forward networks with hand-written reverse mode.
//!
//! A [`DenseNet`] is a stack of affine layers with ReLU between them and a
//! configurable activation on the output (identity for heads, ReLU for
//! encoders). [`DenseNet::forward`] returns a [`ForwardCache`] that
//! [`DenseNet::backward`] consumes; the cache records the parameter revision it
//! was computed at, so a cache that outlived an optimizer step is rejected.

pub mod checkpoint;
mod optim;
mod schedule;

pub use optim::{adam_step, sgd_momentum_step, AdamConfig, OptimState};
pub use schedule::{cosine_lr, ScheduleConfig};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

impl Activation {
    fn apply(self, x: &mut Array2<f64>) {
        if self == Activation::Relu {
            x.mapv_inplace(|v| v.max(0.0));
        }
    }
}

/// One affine layer, `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Kaiming-uniform weights (`U(-sqrt(6 / fan_in), +)`) and
    /// `U(-1 / sqrt(fan_in), +)` biases.
    pub fn kaiming(input: usize, output: usize, rng: &mut Rng) -> Self {
        let w_bound = (6.0 / input as f64).sqrt();
        let b_bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((input, output), |_| rng.random_range(-w_bound..w_bound)),
            bias: Array1::from_shape_fn(output, |_| rng.random_range(-b_bound..b_bound)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
    output_activation: Activation,
    revision: u64,
}

/// Activations saved by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `outputs[0]` is the input batch, `outputs[l + 1]` the post-activation
    /// output of layer `l`.
    outputs: Vec<Array2<f64>>,
    revision: u64,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("cache holds at least the input")
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.outputs.pop().expect("cache holds at least the input")
    }

    /// Post-activation output of layer `l`.
    pub fn layer_output(&self, l: usize) -> &Array2<f64> {
        &self.outputs[l + 1]
    }
}

/// Parameter gradients, laid out like [`DenseNet`]'s layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub layers: Vec<Dense>,
}

impl DenseGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().all(|v| *v == 0.0) && l.bias.iter().all(|v| *v == 0.0))
    }
}

impl DenseNet {
    /// Randomly initialized network with `dims = [input, hidden.., output]`.
    pub fn new(dims: &[usize], output_activation: Activation, rng: &mut Rng) -> Result<Self> {
        check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| Dense::kaiming(w[0], w[1], rng))
            .collect();
        Ok(Self {
            layers,
            output_activation,
            revision: 0,
        })
    }

    pub fn from_layers(layers: Vec<Dense>, output_activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::shape("layer bias", l.output_dim(), l.bias.len()));
            }
            if l.input_dim() == 0 || l.output_dim() == 0 {
                return Err(Error::invalid(format!("layer {i} has a zero dimension")));
            }
            if i > 0 && layers[i - 1].output_dim() != l.input_dim() {
                return Err(Error::shape(
                    "consecutive layers",
                    layers[i - 1].output_dim(),
                    l.input_dim(),
                ));
            }
        }
        Ok(Self {
            layers,
            output_activation,
            revision: 0,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(Dense::output_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Mutable parameter slices (weight, bias per layer). Bumps the revision,
    /// invalidating outstanding forward caches.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.revision += 1;
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn param_lens(&self) -> Vec<usize> {
        self.param_slices().iter().map(|s| s.len()).collect()
    }

    pub fn zero_grads(&self) -> DenseGrads {
        DenseGrads {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output_activation
        } else {
            Activation::Relu
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(
                "forward input width",
                self.input_dim(),
                x.ncols(),
            ));
        }
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(x.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = outputs[i].dot(&layer.weight);
            h += &layer.bias;
            self.activation_of(i).apply(&mut h);
            outputs.push(h);
        }
        Ok(ForwardCache {
            outputs,
            revision: self.revision,
        })
    }

    /// Output only, without keeping intermediates.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(
                "forward input width",
                self.input_dim(),
                x.ncols(),
            ));
        }
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = h.dot(&layer.weight);
            next += &layer.bias;
            self.activation_of(i).apply(&mut next);
            h = next;
        }
        Ok(h)
    }

    /// Reverse pass: parameter gradients and the gradient with respect to the
    /// input batch, given `dL/d(output)`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<'_, f64>,
    ) -> Result<(DenseGrads, Array2<f64>)> {
        if cache.revision != self.revision {
            return Err(Error::invalid(format!(
                "stale forward cache (revision {} vs network {})",
                cache.revision, self.revision
            )));
        }
        if cache.outputs.len() != self.layers.len() + 1 {
            return Err(Error::shape(
                "forward cache depth",
                self.layers.len() + 1,
                cache.outputs.len(),
            ));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let (n_in, n_out) = (cache.outputs[i].ncols(), cache.outputs[i + 1].ncols());
            if n_in != layer.input_dim() || n_out != layer.output_dim() {
                return Err(Error::shape(
                    "forward cache layer",
                    format!("{}x{}", layer.input_dim(), layer.output_dim()),
                    format!("{n_in}x{n_out}"),
                ));
            }
        }
        let out = cache.output();
        if output_grad.dim() != out.dim() {
            return Err(Error::shape(
                "output gradient",
                format!("{:?}", out.dim()),
                format!("{:?}", output_grad.dim()),
            ));
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = output_grad.to_owned();
        for i in (0..self.layers.len()).rev() {
            if self.activation_of(i) == Activation::Relu {
                delta.zip_mut_with(&cache.outputs[i + 1], |d, &y| {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            let input = &cache.outputs[i];
            let weight = input.t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            let next = delta.dot(&self.layers[i].weight.t());
            grads.push(Dense { weight, bias });
            delta = next;
        }
        grads.reverse();
        Ok((DenseGrads { layers: grads }, delta))
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::invalid(format!(
            "layer dims {dims:?}: need input and output"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::invalid(format!("layer dims {dims:?} contain zero")));
    }
    Ok(())
}

/// Single affine classifier `d -> C` on top of a representation.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead(DenseNet);

impl LinearHead {
    pub fn new(input: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        DenseNet::new(&[input, classes], Activation::Identity, rng).map(Self)
    }

    pub fn from_net(net: DenseNet) -> Result<Self> {
        if net.layers().len() != 1 || net.output_activation() != Activation::Identity {
            return Err(Error::invalid(
                "a linear head is a single identity-output layer",
            ));
        }
        Ok(Self(net))
    }

    pub fn net(&self) -> &DenseNet {
        &self.0
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.0
    }

    pub fn into_net(self) -> DenseNet {
        self.0
    }

    pub fn classes(&self) -> usize {
        self.0.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.0.layers()[0].weight
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.0.layers()[0].bias
    }

    pub fn logits(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.0.predict(features)
    }
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: ArrayView2<'_, f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
