//! A small CPU execution engine for [`NetworkSpec`] tables.
//!
//! Tensors are `f32` NCHW batches. Training uses an explicit tape: the forward
//! pass records each layer's output (and batch-norm normalized activations),
//! and [`Model::backward`] walks the table in reverse, routing gradients to
//! every layer that fed a skip concatenation.

mod conv;
pub mod optim;

use ndarray::{s, Array1, Array4, ArrayView4, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netspec::{Activation, LayerKind, NetworkSpec};

pub(crate) use conv::concat_channels;

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
}

impl BatchNorm {
    fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }
}

/// Parameters of one convolutional layer.
///
/// Convolution weights are `[out, in, k, k]`; transposed convolution weights
/// are `[in, out, k, k]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub bn: Option<BatchNorm>,
}

/// A network table together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: NetworkSpec,
    /// Indexed like `spec.layers`; `None` for the input layer.
    layers: Vec<Option<LayerParams>>,
}

/// Gradients for one layer, shaped like [`LayerParams`].
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub gamma: Option<Array1<f32>>,
    pub beta: Option<Array1<f32>>,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    layers: Vec<Option<LayerGrads>>,
}

impl Gradients {
    /// Parameter gradients in the same order as [`Model::params_mut`].
    pub fn slices(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for g in self.layers.iter().flatten() {
            out.push(g.weight.as_slice().expect("contiguous"));
            out.push(g.bias.as_slice().expect("contiguous"));
            if let (Some(gm), Some(bt)) = (&g.gamma, &g.beta) {
                out.push(gm.as_slice().expect("contiguous"));
                out.push(bt.as_slice().expect("contiguous"));
            }
        }
        out
    }

    pub fn layer(&self, index: usize) -> Option<&LayerGrads> {
        self.layers.get(index).and_then(Option::as_ref)
    }

    /// Adds `other` into `self`; both must come from the same model.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                a.weight += &b.weight;
                a.bias += &b.bias;
                if let (Some(x), Some(y)) = (&mut a.gamma, &b.gamma) {
                    *x += y;
                }
                if let (Some(x), Some(y)) = (&mut a.beta, &b.beta) {
                    *x += y;
                }
            }
        }
    }
}

/// Activations recorded by [`Model::forward_train`].
pub struct Tape {
    outputs: Vec<Array4<f32>>,
    // (normalized activations, 1/std per channel) for batch-norm layers
    norm: Vec<Option<(Array4<f32>, Vec<f32>)>>,
}

impl Tape {
    pub fn output(&self) -> &Array4<f32> {
        self.outputs.last().expect("non-empty")
    }

    pub fn layer_output(&self, index: usize) -> &Array4<f32> {
        &self.outputs[index]
    }
}

impl Model {
    /// Initializes parameters: He-uniform weights, zero biases, unit batch-norm
    /// scale and zero shift. Deterministic in `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            if !layer.is_parameterized() {
                layers.push(None);
                continue;
            }
            let cin = spec.layer_in_channels(layer.index);
            let k = layer.kernel;
            let shape = match layer.kind {
                LayerKind::Conv => (layer.out_channels, cin, k, k),
                _ => (cin, layer.out_channels, k, k),
            };
            let bound = (6.0 / (cin * k * k) as f32).sqrt();
            let weight = Array4::from_shape_simple_fn(shape, || rng.random_range(-bound..bound));
            layers.push(Some(LayerParams {
                weight,
                bias: Array1::zeros(layer.out_channels),
                bn: layer.has_batch_norm().then(|| BatchNorm::new(layer.out_channels)),
            }));
        }
        Ok(Model { spec, layers })
    }

    /// Assembles a model from explicit parameters, checking every shape.
    pub fn from_parts(spec: NetworkSpec, layers: Vec<Option<LayerParams>>) -> Result<Self> {
        let template = Model::new(spec.clone(), 0)?;
        if layers.len() != template.layers.len() {
            return Err(Error::ShapeMismatch("layer count differs from spec".into()));
        }
        for (i, (got, want)) in layers.iter().zip(&template.layers).enumerate() {
            let ok = match (got, want) {
                (None, None) => true,
                (Some(g), Some(w)) => {
                    g.weight.dim() == w.weight.dim()
                        && g.bias.len() == w.bias.len()
                        && match (&g.bn, &w.bn) {
                            (None, None) => true,
                            (Some(a), Some(b)) => {
                                a.gamma.len() == b.gamma.len()
                                    && a.beta.len() == b.beta.len()
                                    && a.running_mean.len() == b.running_mean.len()
                                    && a.running_var.len() == b.running_var.len()
                            }
                            _ => false,
                        }
                }
                _ => false,
            };
            if !ok {
                return Err(Error::ShapeMismatch(format!("parameters of layer {i} do not match spec")));
            }
        }
        Ok(Model { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layer_params(&self) -> &[Option<LayerParams>] {
        &self.layers
    }

    pub fn layer_params_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.layers
    }

    /// Trainable parameters in a fixed order: per layer weight, bias, and
    /// (when present) batch-norm scale and shift.
    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for p in self.layers.iter_mut().flatten() {
            out.push(p.weight.as_slice_mut().expect("contiguous"));
            out.push(p.bias.as_slice_mut().expect("contiguous"));
            if let Some(bn) = &mut p.bn {
                out.push(bn.gamma.as_slice_mut().expect("contiguous"));
                out.push(bn.beta.as_slice_mut().expect("contiguous"));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|p| p.weight.len() + p.bias.len() + p.bn.as_ref().map_or(0, |b| 2 * b.gamma.len()))
            .sum()
    }

    fn check_input(&self, x: &ArrayView4<f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.spec.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "{} expects {} input channels, got {c}",
                self.spec.name, self.spec.in_channels
            )));
        }
        // Stride chains must round-trip back to matching skip resolutions.
        self.spec
            .output_shapes(h, w)
            .map(|_| ())
            .map_err(|e| Error::ShapeMismatch(format!("{h}x{w} input: {e}")))
    }

    fn layer_input<'a>(&self, outputs: &'a [Array4<f32>], index: usize) -> std::borrow::Cow<'a, Array4<f32>> {
        let refs = &self.spec.layers[index].input_refs;
        if refs.len() == 1 {
            std::borrow::Cow::Borrowed(&outputs[refs[0]])
        } else {
            let views: Vec<_> = refs.iter().map(|&r| outputs[r].view()).collect();
            std::borrow::Cow::Owned(concat_channels(&views))
        }
    }

    fn linear(&self, index: usize, input: &Array4<f32>) -> Array4<f32> {
        let layer = &self.spec.layers[index];
        let p = self.layers[index].as_ref().expect("parameterized");
        match layer.kind {
            LayerKind::Conv => conv::conv2d(input.view(), p.weight.view(), &p.bias, layer.stride, layer.padding),
            LayerKind::Tconv => conv::tconv2d(
                input.view(),
                p.weight.view(),
                &p.bias,
                layer.stride,
                layer.padding,
                layer.output_padding,
            ),
            LayerKind::Input => unreachable!(),
        }
    }

    /// Inference pass; batch norm uses running statistics.
    pub fn forward(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        self.check_input(&x.view())?;
        let mut outputs: Vec<Array4<f32>> = Vec::with_capacity(self.spec.layers.len());
        outputs.push(x.clone());
        for index in 1..self.spec.layers.len() {
            let input = self.layer_input(&outputs, index);
            let mut y = self.linear(index, &input);
            drop(input);
            let layer = &self.spec.layers[index];
            if let Some(bn) = &self.layers[index].as_ref().expect("parameterized").bn {
                for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
                    let inv = 1.0 / (bn.running_var[c] + BN_EPS).sqrt();
                    let (m, g, b) = (bn.running_mean[c], bn.gamma[c], bn.beta[c]);
                    plane.mapv_inplace(|v| g * (v - m) * inv + b);
                }
            }
            apply_activation(&mut y, layer.activation);
            outputs.push(y);
        }
        Ok(outputs.pop().expect("non-empty"))
    }

    /// Training pass: batch norm normalizes with batch statistics and updates
    /// running statistics. Returns the tape needed by [`Model::backward`].
    pub fn forward_train(&mut self, x: &Array4<f32>) -> Result<Tape> {
        self.check_input(&x.view())?;
        let n_layers = self.spec.layers.len();
        let mut outputs: Vec<Array4<f32>> = Vec::with_capacity(n_layers);
        let mut norm = Vec::with_capacity(n_layers);
        outputs.push(x.clone());
        norm.push(None);
        for index in 1..n_layers {
            let input = self.layer_input(&outputs, index);
            let mut y = self.linear(index, &input);
            drop(input);
            let activation = self.spec.layers[index].activation;
            let params = self.layers[index].as_mut().expect("parameterized");
            let mut cache = None;
            if let Some(bn) = &mut params.bn {
                let (xhat, inv_std) = batch_norm_train(&mut y, bn);
                cache = Some((xhat, inv_std));
            }
            apply_activation(&mut y, activation);
            outputs.push(y);
            norm.push(cache);
        }
        Ok(Tape { outputs, norm })
    }

    /// Backpropagates `dy` (gradient w.r.t. the final output) through the
    /// recorded tape. Returns parameter gradients and the input gradient.
    pub fn backward(&self, tape: &Tape, dy: &Array4<f32>) -> (Gradients, Array4<f32>) {
        let n_layers = self.spec.layers.len();
        let mut upstream: Vec<Option<Array4<f32>>> = vec![None; n_layers];
        upstream[n_layers - 1] = Some(dy.clone());
        let mut grads: Vec<Option<LayerGrads>> = vec![None; n_layers];
        for index in (1..n_layers).rev() {
            let layer = &self.spec.layers[index];
            let params = self.layers[index].as_ref().expect("parameterized");
            let out = &tape.outputs[index];
            let mut g = upstream[index].take().unwrap_or_else(|| Array4::zeros(out.dim()));
            match layer.activation {
                Activation::ReluBn => Zip::from(&mut g).and(out).for_each(|g, &y| {
                    if y <= 0.0 {
                        *g = 0.0;
                    }
                }),
                Activation::Tanh => Zip::from(&mut g).and(out).for_each(|g, &y| *g *= 1.0 - y * y),
                Activation::Sigmoid => Zip::from(&mut g).and(out).for_each(|g, &y| *g *= y * (1.0 - y)),
                Activation::None => {}
            }
            let (mut gamma, mut beta) = (None, None);
            if let (Some(bn), Some((xhat, inv_std))) = (&params.bn, &tape.norm[index]) {
                let (dg, db) = batch_norm_backward(&mut g, xhat, inv_std, &bn.gamma);
                gamma = Some(dg);
                beta = Some(db);
            }
            let input = self.layer_input(&tape.outputs, index);
            let (dx, dw, db) = match layer.kind {
                LayerKind::Conv => {
                    conv::conv2d_backward(input.view(), params.weight.view(), g.view(), layer.stride, layer.padding)
                }
                LayerKind::Tconv => {
                    conv::tconv2d_backward(input.view(), params.weight.view(), g.view(), layer.stride, layer.padding)
                }
                LayerKind::Input => unreachable!(),
            };
            grads[index] = Some(LayerGrads { weight: dw, bias: db, gamma, beta });
            let mut at = 0;
            for &r in &layer.input_refs {
                let c = tape.outputs[r].dim().1;
                let part = dx.slice(s![.., at..at + c, .., ..]);
                match &mut upstream[r] {
                    Some(acc) => *acc += &part,
                    slot @ None => *slot = Some(part.to_owned()),
                }
                at += c;
            }
        }
        let dx = upstream[0].take().unwrap_or_else(|| Array4::zeros(tape.outputs[0].dim()));
        (Gradients { layers: grads }, dx)
    }
}

fn apply_activation(y: &mut Array4<f32>, activation: Activation) {
    match activation {
        Activation::ReluBn => y.mapv_inplace(|v| v.max(0.0)),
        Activation::Tanh => y.mapv_inplace(f32::tanh),
        Activation::Sigmoid => y.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp())),
        Activation::None => {}
    }
}

/// Normalizes `y` in place with batch statistics, updating running stats.
/// Returns the normalized activations and per-channel inverse std.
fn batch_norm_train(y: &mut Array4<f32>, bn: &mut BatchNorm) -> (Array4<f32>, Vec<f32>) {
    let (n, c, h, w) = y.dim();
    let count = (n * h * w) as f64;
    let mut xhat = Array4::<f32>::zeros(y.dim());
    let mut inv_stds = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = y.slice(s![.., ch, .., ..]);
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / count;
        let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / count;
        let inv_std = 1.0 / (var + BN_EPS as f64).sqrt();
        let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
        bn.running_mean[ch] = (1.0 - BN_MOMENTUM) * bn.running_mean[ch] + BN_MOMENTUM * mean as f32;
        bn.running_var[ch] = (1.0 - BN_MOMENTUM) * bn.running_var[ch] + BN_MOMENTUM * unbiased as f32;
        let (g, b) = (bn.gamma[ch], bn.beta[ch]);
        let mut xh = xhat.slice_mut(s![.., ch, .., ..]);
        let mut yp = y.slice_mut(s![.., ch, .., ..]);
        Zip::from(&mut xh).and(&mut yp).for_each(|xh, yv| {
            let v = ((*yv as f64 - mean) * inv_std) as f32;
            *xh = v;
            *yv = g * v + b;
        });
        inv_stds.push(inv_std as f32);
    }
    (xhat, inv_stds)
}

/// Replaces `g` (gradient w.r.t. the batch-norm output) with the gradient
/// w.r.t. its input. Returns `(dgamma, dbeta)`.
fn batch_norm_backward(
    g: &mut Array4<f32>,
    xhat: &Array4<f32>,
    inv_std: &[f32],
    gamma: &Array1<f32>,
) -> (Array1<f32>, Array1<f32>) {
    let (n, c, h, w) = g.dim();
    let count = (n * h * w) as f64;
    let mut dgamma = Array1::<f32>::zeros(c);
    let mut dbeta = Array1::<f32>::zeros(c);
    for ch in 0..c {
        let gp = g.slice(s![.., ch, .., ..]);
        let xp = xhat.slice(s![.., ch, .., ..]);
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        Zip::from(&gp).and(&xp).for_each(|&gv, &xv| {
            sum_g += gv as f64;
            sum_gx += gv as f64 * xv as f64;
        });
        dgamma[ch] = sum_gx as f32;
        dbeta[ch] = sum_g as f32;
        let scale = gamma[ch] as f64 * inv_std[ch] as f64 / count;
        let mut gp = g.slice_mut(s![.., ch, .., ..]);
        Zip::from(&mut gp).and(&xp).for_each(|gv, &xv| {
            *gv = (scale * (count * *gv as f64 - sum_g - xv as f64 * sum_gx)) as f32;
        });
    }
    (dgamma, dbeta)
}
