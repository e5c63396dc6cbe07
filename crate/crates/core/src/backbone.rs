//! Desk-scale MLP backbone with hand-written reverse mode.
//!
//! Parameters are laid out layer by layer (weights row-major, then biases).
//! The last layer comes last, so the flat vector splits into the hidden
//! block of `m` parameters followed by the last-layer block. For a scalar
//! output the last-layer block has exactly `r = last_hidden_width + 1`
//! entries; for multi-output models `r` refers to the slice belonging to
//! one output row.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::densela::{axpy, matmul, matmul_nt, matmul_tn, DenseMatrix};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub output_dim: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>) -> Self {
        Self { input_dim, hidden_widths, activation: Activation::Relu, output_dim: 1, init_scale: 1.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_widths.is_empty() {
            return Err(Error::InvalidConfig("backbone needs at least one hidden layer".into()));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) || self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if !(self.init_scale > 0.0) || !self.init_scale.is_finite() {
            return Err(Error::InvalidConfig(format!("init_scale must be > 0, got {}", self.init_scale)));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in &self.hidden_widths {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out x in`
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn n_params(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneModel {
    config: BackboneConfig,
    layers: Vec<Layer>,
}

/// Draws weights i.i.d. `N(0, (init_scale / sqrt(fan_in))^2)` with zero biases.
pub fn init_model(config: &BackboneConfig) -> Result<BackboneModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layers = config
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let std = config.init_scale / (fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            Layer {
                weights: DenseMatrix::from_fn(fan_out, fan_in, |_, _| dist.sample(&mut rng)),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(BackboneModel { config: config.clone(), layers })
}

/// Per-layer activations of a batch forward pass.
struct BatchTrace {
    /// `pre[l]`: pre-activations of layer `l` (`N x out_l`)
    pre: Vec<DenseMatrix>,
    /// `post[0]` is the input; `post[l + 1]` the output of layer `l`
    post: Vec<DenseMatrix>,
}

impl BackboneModel {
    /// Builds a model from explicit layers; shapes must agree with `config`.
    pub fn from_layers(config: BackboneConfig, layers: Vec<Layer>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::InvalidConfig(format!("expected {} layers, got {}", dims.len(), layers.len())));
        }
        for (l, ((fan_in, fan_out), layer)) in dims.iter().zip(&layers).enumerate() {
            if layer.weights.shape() != (*fan_out, *fan_in) || layer.bias.len() != *fan_out {
                return Err(Error::InvalidConfig(format!("layer {l} has the wrong shape")));
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Number of parameters outside the last layer.
    pub fn m(&self) -> usize {
        self.layers[..self.layers.len() - 1].iter().map(Layer::n_params).sum()
    }

    /// Last-layer feature dimension: last hidden width plus the bias slot.
    pub fn r(&self) -> usize {
        self.config.hidden_widths.last().copied().unwrap_or(0) + 1
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                op: "set_params",
                detail: format!("{} values for {} parameters", params.len(), self.n_params()),
            });
        }
        let mut off = 0;
        for layer in &mut self.layers {
            let w = layer.weights.as_mut_slice();
            w.copy_from_slice(&params[off..off + w.len()]);
            off += w.len();
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Network output and the last hidden post-activation for one input.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(x.len(), self.config.input_dim, "forward: input dimension");
        let act = self.config.activation;
        let mut a = x.to_vec();
        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            a = layer
                .weights
                .matvec(&a)
                .into_iter()
                .zip(&layer.bias)
                .map(|(z, b)| act.apply(z + b))
                .collect();
        }
        let out_layer = &self.layers[last];
        let out = out_layer.weights.matvec(&a).into_iter().zip(&out_layer.bias).map(|(z, b)| z + b).collect();
        (out, a)
    }

    fn forward_trace(&self, x: &DenseMatrix) -> BatchTrace {
        assert_eq!(x.cols(), self.config.input_dim, "forward: input dimension");
        let act = self.config.activation;
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len() + 1);
        post.push(x.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = matmul_nt(&post[l], &layer.weights).expect("layer shapes");
            for i in 0..z.rows() {
                for (v, b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let a = if l < last {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
                a
            } else {
                z.clone()
            };
            pre.push(z);
            post.push(a);
        }
        BatchTrace { pre, post }
    }

    /// Outputs for every row of `x` (`N x output_dim`).
    pub fn predict_batch(&self, x: &DenseMatrix) -> DenseMatrix {
        self.forward_trace(x).post.pop().expect("at least one layer")
    }

    /// Last hidden post-activations for every row of `x`.
    pub fn penultimate_batch(&self, x: &DenseMatrix) -> DenseMatrix {
        let mut trace = self.forward_trace(x);
        let n = trace.post.len();
        trace.post.swap_remove(n - 2)
    }

    /// Gradient of output `output_index` w.r.t. all parameters, split into
    /// the hidden block (length `m`) and the last-layer block (length `r`).
    pub fn param_gradient(&self, x: &[f64], output_index: usize) -> (Vec<f64>, Vec<f64>) {
        let xm = DenseMatrix::from_vec(1, x.len(), x.to_vec()).expect("finite input");
        let (hidden, last) = self.param_gradients_batch(&xm, output_index);
        (hidden.into_vec(), last.into_vec())
    }

    /// Row-wise [`param_gradient`](Self::param_gradient) for a batch:
    /// returns `(N x m, N x r)`.
    pub fn param_gradients_batch(&self, x: &DenseMatrix, output_index: usize) -> (DenseMatrix, DenseMatrix) {
        assert!(output_index < self.config.output_dim, "output index out of range");
        let trace = self.forward_trace(x);
        let n = x.rows();
        let last = self.layers.len() - 1;
        let act = self.config.activation;

        let penult = &trace.post[last];
        let r = self.r();
        let mut grad_last = DenseMatrix::zeros(n, r);
        for i in 0..n {
            let row = grad_last.row_mut(i);
            row[..r - 1].copy_from_slice(penult.row(i));
            row[r - 1] = 1.0;
        }

        // delta of the last hidden layer: column `output_index` of W_last, gated
        let w_out = self.layers[last].weights.row(output_index).to_vec();
        let mut deltas: Vec<DenseMatrix> = vec![DenseMatrix::zeros(0, 0); last];
        let mut delta = DenseMatrix::from_fn(n, w_out.len(), |i, j| {
            w_out[j] * act.derivative(trace.pre[last - 1].get(i, j), trace.post[last].get(i, j))
        });
        for l in (0..last).rev() {
            if l > 0 {
                let mut prev = matmul(&delta, &self.layers[l].weights).expect("layer shapes");
                for i in 0..n {
                    for (j, v) in prev.row_mut(i).iter_mut().enumerate() {
                        *v *= act.derivative(trace.pre[l - 1].get(i, j), trace.post[l].get(i, j));
                    }
                }
                deltas[l] = std::mem::replace(&mut delta, prev);
            } else {
                deltas[0] = std::mem::replace(&mut delta, DenseMatrix::zeros(0, 0));
            }
        }

        let m = self.m();
        let mut grad_hidden = DenseMatrix::zeros(n, m);
        for i in 0..n {
            let row = grad_hidden.row_mut(i);
            let mut off = 0;
            for (l, d) in deltas.iter().enumerate() {
                let input = trace.post[l].row(i);
                let d = d.row(i);
                for &dj in d {
                    let dst = &mut row[off..off + input.len()];
                    if dj != 0.0 {
                        axpy(dj, input, dst);
                    }
                    off += input.len();
                }
                row[off..off + d.len()].copy_from_slice(d);
                off += d.len();
            }
        }
        (grad_hidden, grad_last)
    }

    /// Full parameter gradient `(hidden, last)` concatenated, `N x (m + r)`.
    pub fn full_gradients_batch(&self, x: &DenseMatrix, output_index: usize) -> DenseMatrix {
        let (h, l) = self.param_gradients_batch(x, output_index);
        let (m, r) = (h.cols(), l.cols());
        DenseMatrix::from_fn(x.rows(), m + r, |i, j| if j < m { h.get(i, j) } else { l.get(i, j - m) })
    }

    /// Mean squared error and its gradient for a batch (flat, same layout as `params`).
    fn mse_grad(&self, x: &DenseMatrix, y: &DenseMatrix) -> (f64, Vec<Vec<f64>>) {
        let trace = self.forward_trace(x);
        let last = self.layers.len() - 1;
        let act = self.config.activation;
        let out = &trace.post[last + 1];
        let count = (out.rows() * out.cols()) as f64;
        let mut loss = 0.0;
        let mut dz = DenseMatrix::zeros(out.rows(), out.cols());
        for (k, (o, t)) in out.as_slice().iter().zip(y.as_slice()).enumerate() {
            let e = o - t;
            loss += e * e;
            dz.as_mut_slice()[k] = 2.0 * e / count;
        }
        loss /= count;

        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len()];
        for l in (0..=last).rev() {
            let gw = matmul_tn(&dz, &trace.post[l]).expect("layer shapes");
            let mut gb = vec![0.0; dz.cols()];
            for i in 0..dz.rows() {
                axpy(1.0, dz.row(i), &mut gb);
            }
            let mut g = gw.into_vec();
            g.extend_from_slice(&gb);
            grads[l] = g;
            if l > 0 {
                let mut prev = matmul(&dz, &self.layers[l].weights).expect("layer shapes");
                for i in 0..prev.rows() {
                    for (j, v) in prev.row_mut(i).iter_mut().enumerate() {
                        *v *= act.derivative(trace.pre[l - 1].get(i, j), trace.post[l].get(i, j));
                    }
                }
                dz = prev;
            }
        }
        (loss, grads)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let model: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::from_layers(model.config.clone(), model.layers)
    }
}

/// Labeled regression data: `N x d` inputs and `N x output_dim` targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub inputs: DenseMatrix,
    pub targets: DenseMatrix,
}

impl LabeledDataset {
    pub fn new(inputs: DenseMatrix, targets: DenseMatrix) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::DimensionMismatch {
                op: "LabeledDataset::new",
                detail: format!("{} input rows vs {} target rows", inputs.rows(), targets.rows()),
            });
        }
        if !inputs.is_finite() || !targets.is_finite() {
            return Err(Error::NonFinite("LabeledDataset"));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self { inputs: self.inputs.select_rows(idx), targets: self.targets.select_rows(idx) }
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        Self::new(self.inputs.vstack(&other.inputs)?, self.targets.vstack(&other.targets)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global L2-norm clip applied per batch; non-positive disables clipping.
    pub grad_clip: f64,
    #[serde(default)]
    pub adam: AdamParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, epochs: 100, batch_size: 32, grad_clip: 1.0, adam: AdamParams::default(), seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam with global-norm clipping. Keeps moment estimates across calls so
/// online training (bandit update phases) continues the same optimizer.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Trainer {
    pub fn new(model: &BackboneModel, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let zeros: Vec<Vec<f64>> = model.layers.iter().map(|l| vec![0.0; l.n_params()]).collect();
        Ok(Self { cfg: cfg.clone(), first: zeros.clone(), second: zeros, steps: 0 })
    }

    /// One optimizer step on a batch; returns the batch MSE before the update.
    pub fn step(&mut self, model: &mut BackboneModel, x: &DenseMatrix, y: &DenseMatrix) -> f64 {
        let (loss, mut grads) = model.mse_grad(x, y);
        if self.cfg.grad_clip > 0.0 {
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if norm > self.cfg.grad_clip {
                let s = self.cfg.grad_clip / norm;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        self.steps += 1;
        let AdamParams { beta1, beta2, eps } = self.cfg.adam;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let lr = self.cfg.learning_rate;
        for (l, layer) in model.layers.iter_mut().enumerate() {
            let nw = layer.weights.rows() * layer.weights.cols();
            let g = &grads[l];
            let m1 = &mut self.first[l];
            let m2 = &mut self.second[l];
            for k in 0..g.len() {
                m1[k] = beta1 * m1[k] + (1.0 - beta1) * g[k];
                m2[k] = beta2 * m2[k] + (1.0 - beta2) * g[k] * g[k];
                let upd = lr * (m1[k] / c1) / ((m2[k] / c2).sqrt() + eps);
                if k < nw {
                    layer.weights.as_mut_slice()[k] -= upd;
                } else {
                    layer.bias[k - nw] -= upd;
                }
            }
        }
        loss
    }
}

/// Mini-batch Adam training on MSE. `on_epoch(epoch, model, mean_loss)` is
/// called after each epoch (1-based).
pub fn train_with(
    model: &BackboneModel,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &BackboneModel, f64),
) -> Result<(BackboneModel, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.targets.cols() != model.config.output_dim || data.inputs.cols() != model.config.input_dim {
        return Err(Error::DimensionMismatch {
            op: "train",
            detail: "dataset shape does not match the backbone".into(),
        });
    }
    let mut model = model.clone();
    let mut trainer = Trainer::new(&model, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.select(chunk);
            total += trainer.step(&mut model, &batch.inputs, &batch.targets) * chunk.len() as f64;
        }
        let mean = total / data.len() as f64;
        trace.push(mean);
        on_epoch(epoch, &model, mean);
    }
    Ok((model, trace))
}

pub fn train(model: &BackboneModel, data: &LabeledDataset, cfg: &TrainConfig) -> Result<(BackboneModel, Vec<f64>)> {
    train_with(model, data, cfg, |_, _, _| {})
}

/// Mean squared error of the model on a dataset.
pub fn mse(model: &BackboneModel, data: &LabeledDataset) -> f64 {
    let pred = model.predict_batch(&data.inputs);
    let n = pred.as_slice().len().max(1) as f64;
    pred.as_slice().iter().zip(data.targets.as_slice()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg(d: usize, widths: Vec<usize>, act: Activation, seed: u64) -> BackboneConfig {
        BackboneConfig { input_dim: d, hidden_widths: widths, activation: act, output_dim: 1, init_scale: 1.0, seed }
    }

    /// Straight-line forward pass written independently of the batch code.
    fn reference_forward(model: &BackboneModel, x: &[f64]) -> f64 {
        let mut a = x.to_vec();
        let n = model.layers.len();
        for (l, layer) in model.layers.iter().enumerate() {
            let mut next = Vec::new();
            for o in 0..layer.weights.rows() {
                let mut z = layer.bias[o];
                for (i, ai) in a.iter().enumerate() {
                    z += layer.weights.get(o, i) * ai;
                }
                next.push(if l + 1 == n {
                    z
                } else {
                    match model.config.activation {
                        Activation::Relu => z.max(0.0),
                        Activation::Tanh => z.tanh(),
                    }
                });
            }
            a = next;
        }
        a[0]
    }

    #[test]
    fn init_is_deterministic() {
        let c = cfg(4, vec![8, 8], Activation::Relu, 3);
        assert_eq!(init_model(&c).unwrap().params(), init_model(&c).unwrap().params());
    }

    #[test]
    fn parameter_counts() {
        let model = init_model(&cfg(4, vec![50, 50], Activation::Relu, 0)).unwrap();
        assert_eq!(model.m(), 4 * 50 + 50 + 50 * 50 + 50);
        assert_eq!(model.r(), 51);
        assert_eq!(model.m() + model.r(), model.n_params());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = cfg(2, vec![4], Activation::Relu, 0);
        c.init_scale = 0.0;
        assert!(init_model(&c).is_err());
        assert!(init_model(&cfg(2, vec![], Activation::Relu, 0)).is_err());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut model = init_model(&cfg(3, vec![5, 4], Activation::Relu, 1)).unwrap();
        let zeros = vec![0.0; model.n_params()];
        model.set_params(&zeros).unwrap();
        let (out, pen) = model.forward(&[0.3, -1.0, 2.0]);
        assert_eq!(out, vec![0.0]);
        assert!(pen.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_built_sum_network() {
        // one hidden ReLU layer with identity weights, output sums the units
        let c = BackboneConfig { input_dim: 3, hidden_widths: vec![3], activation: Activation::Relu, output_dim: 1, init_scale: 1.0, seed: 0 };
        let layers = vec![
            Layer { weights: DenseMatrix::identity(3), bias: vec![0.0; 3] },
            Layer { weights: DenseMatrix::from_rows(&[[1.0, 1.0, 1.0]]).unwrap(), bias: vec![0.0] },
        ];
        let model = BackboneModel::from_layers(c, layers).unwrap();
        let (out, _) = model.forward(&[1.0, 2.0, 3.5]);
        assert_eq!(out[0], 6.5);
    }

    #[test]
    fn forward_matches_reference() {
        for act in [Activation::Relu, Activation::Tanh] {
            let model = init_model(&cfg(5, vec![7, 6, 4], act, 9)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            for _ in 0..10 {
                let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
                let (out, _) = model.forward(&x);
                assert!((out[0] - reference_forward(&model, &x)).abs() < 1e-12);
                let batch = model.predict_batch(&DenseMatrix::from_vec(1, 5, x.clone()).unwrap());
                assert!((batch.get(0, 0) - out[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn last_layer_gradient_is_penultimate_with_bias() {
        let model = init_model(&cfg(3, vec![6, 5], Activation::Relu, 4)).unwrap();
        let x = [0.4, -0.2, 1.3];
        let (_, pen) = model.forward(&x);
        let (gh, gl) = model.param_gradient(&x, 0);
        assert_eq!(gh.len(), model.m());
        assert_eq!(gl.len(), model.r());
        assert_eq!(&gl[..5], pen.as_slice());
        assert_eq!(gl[5], 1.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = init_model(&cfg(3, vec![6, 5], Activation::Tanh, 8)).unwrap();
        let x = [0.7, -0.4, 0.25];
        let (gh, gl) = model.param_gradient(&x, 0);
        let grad: Vec<f64> = gh.into_iter().chain(gl).collect();
        let theta = model.params();
        let mut probe = model.clone();
        for i in 0..theta.len() {
            let h = 1e-5 * (1.0 + theta[i].abs());
            let mut t = theta.clone();
            t[i] += h;
            probe.set_params(&t).unwrap();
            let up = probe.forward(&x).0[0];
            t[i] -= 2.0 * h;
            probe.set_params(&t).unwrap();
            let down = probe.forward(&x).0[0];
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / (fd.abs().max(grad[i].abs()).max(1e-6));
            assert!(rel <= 1e-5, "coord {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn zero_input_kills_first_layer_weight_gradient() {
        let model = init_model(&cfg(4, vec![5, 3], Activation::Relu, 2)).unwrap();
        let (gh, _) = model.param_gradient(&[0.0; 4], 0);
        assert!(gh[..4 * 5].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn multi_output_selects_row() {
        let mut c = cfg(2, vec![4], Activation::Tanh, 5);
        c.output_dim = 3;
        let model = init_model(&c).unwrap();
        let (g0, l0) = model.param_gradient(&[0.5, 0.5], 0);
        let (g2, l2) = model.param_gradient(&[0.5, 0.5], 2);
        assert_eq!(l0, l2);
        assert_ne!(g0, g2);
    }

    fn linear_data(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DenseMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        let y = DenseMatrix::from_fn(n, 1, |i, _| 1.5 * x.get(i, 0) - 2.0 * x.get(i, 1) + 0.5 * x.get(i, 2));
        LabeledDataset::new(x, y).unwrap()
    }

    #[test]
    fn training_recovers_linear_map() {
        let data = linear_data(256, 1);
        let var = {
            let t = data.targets.as_slice();
            let mean = t.iter().sum::<f64>() / t.len() as f64;
            t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t.len() as f64
        };
        let model = init_model(&cfg(3, vec![32], Activation::Relu, 0)).unwrap();
        let tc = TrainConfig { learning_rate: 1e-2, epochs: 60, batch_size: 32, ..Default::default() };
        let (trained, trace) = train(&model, &data, &tc).unwrap();
        assert_eq!(trace.len(), 60);
        assert!(mse(&trained, &data) < 0.1 * var);
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let data = linear_data(64, 2);
        let model = init_model(&cfg(3, vec![8], Activation::Relu, 0)).unwrap();
        let tc = TrainConfig { epochs: 0, ..Default::default() };
        let (same, trace) = train(&model, &data, &tc).unwrap();
        assert_eq!(same, model);
        assert!(trace.is_empty());
        let tc = TrainConfig { epochs: 5, ..Default::default() };
        let (a, ta) = train(&model, &data, &tc).unwrap();
        let (b, tb) = train(&model, &data, &tc).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = init_model(&cfg(3, vec![7, 5], Activation::Tanh, 11)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save_json(&path).unwrap();
        let back = BackboneModel::load_json(&path).unwrap();
        let bits = |m: &BackboneModel| m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&model), bits(&back));
        assert_eq!(back.config(), model.config());
    }
}
