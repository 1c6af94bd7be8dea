//! Per-client budget allocators.
//!
//! Each allocator is a three-layer perceptron over a frozen query embedding:
//! `linear → ReLU → linear → ReLU → linear → softmax`, predicting a quantized
//! budget class. Gradients are derived by hand for this fixed architecture.
//!
//! Parameters live in one flat `f64` vector laid out as
//! `W1, b1, W2, b2, W3, b3`, where each `W` is row-major `[out][in]`.
//! The same order is used for the on-disk parameter blob.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{dequantize, BudgetDataset};
use crate::seed;

pub const DEFAULT_WIDTH: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Layer {
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl Layer {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    fn bias(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.inputs * self.outputs;
        start..start + self.outputs
    }

    fn end(&self) -> usize {
        self.bias().end
    }

    /// `out = W·input + b`
    fn apply(&self, params: &[f64], input: &[f64], out: &mut Vec<f64>) {
        let w = &params[self.weights()];
        let b = &params[self.bias()];
        out.clear();
        out.extend(w.chunks_exact(self.inputs).zip(b).map(|(row, bias)| {
            row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>() + bias
        }));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocatorModel {
    pub client_id: usize,
    dim: usize,
    width: usize,
    num_classes: usize,
    layers: [Layer; 3],
    params: Vec<f64>,
}

/// Activations of one forward pass, kept for backpropagation.
struct Trace {
    pre1: Vec<f64>,
    h1: Vec<f64>,
    pre2: Vec<f64>,
    h2: Vec<f64>,
    logits: Vec<f64>,
}

impl AllocatorModel {
    /// Zero-parameter model of the given shape.
    pub fn zeros(client_id: usize, dim: usize, width: usize, num_classes: usize) -> Result<Self> {
        if dim == 0 || width == 0 || num_classes == 0 {
            return Err(Error::InvalidSpec(
                "allocator dim, width and num_classes must be positive".into(),
            ));
        }
        let l1 = Layer {
            inputs: dim,
            outputs: width,
            offset: 0,
        };
        let l2 = Layer {
            inputs: width,
            outputs: width,
            offset: l1.end(),
        };
        let l3 = Layer {
            inputs: width,
            outputs: num_classes,
            offset: l2.end(),
        };
        Ok(AllocatorModel {
            client_id,
            dim,
            width,
            num_classes,
            layers: [l1, l2, l3],
            params: vec![0.0; l3.end()],
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weights of layer `i` (0-based) as row-major `[out][in]`.
    pub fn layer_weights(&self, i: usize) -> &[f64] {
        &self.params[self.layers[i].weights()]
    }

    pub fn layer_bias(&self, i: usize) -> &[f64] {
        &self.params[self.layers[i].bias()]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                id: None,
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let [l1, l2, l3] = &self.layers;
        let mut pre1 = Vec::with_capacity(self.width);
        l1.apply(&self.params, x, &mut pre1);
        let h1: Vec<f64> = pre1.iter().map(|v| v.max(0.0)).collect();
        let mut pre2 = Vec::with_capacity(self.width);
        l2.apply(&self.params, &h1, &mut pre2);
        let h2: Vec<f64> = pre2.iter().map(|v| v.max(0.0)).collect();
        let mut logits = Vec::with_capacity(self.num_classes);
        l3.apply(&self.params, &h2, &mut logits);
        Trace {
            pre1,
            h1,
            pre2,
            h2,
            logits,
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).logits)
    }

    /// Class probabilities.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Most probable class; ties go to the lowest index.
    pub fn predict_class(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Mean cross-entropy over `batch`.
    pub fn loss(&self, batch: &[(&[f64], usize)]) -> Result<f64> {
        let mut total = 0.0;
        for (x, y) in batch {
            self.check_input(x)?;
            self.check_label(*y)?;
            total += cross_entropy(&self.trace(x).logits, *y);
        }
        Ok(total / batch.len().max(1) as f64)
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.num_classes {
            return Err(Error::Validation(format!(
                "budget class {y} outside {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Mean cross-entropy over `batch` and its gradient with respect to
    /// every parameter, in the flat layout of [`Self::params`].
    pub fn loss_and_gradient(&self, batch: &[(&[f64], usize)]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        for (x, y) in batch {
            self.check_input(x)?;
            self.check_label(*y)?;
            total += self.accumulate_gradient(x, *y, &mut grad);
        }
        let scale = 1.0 / batch.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((total * scale, grad))
    }

    fn accumulate_gradient(&self, x: &[f64], y: usize, grad: &mut [f64]) -> f64 {
        let t = self.trace(x);
        let [l1, l2, l3] = &self.layers;
        let loss = cross_entropy(&t.logits, y);

        // dL/dlogits = softmax − onehot
        let mut d3 = softmax(&t.logits);
        d3[y] -= 1.0;

        let d2 = backprop_layer(l3, &self.params, &t.h2, &d3, grad);
        let d2: Vec<f64> = d2.iter().zip(&t.pre2).map(|(g, p)| if *p > 0.0 { *g } else { 0.0 }).collect();
        let d1 = backprop_layer(l2, &self.params, &t.h1, &d2, grad);
        let d1: Vec<f64> = d1.iter().zip(&t.pre1).map(|(g, p)| if *p > 0.0 { *g } else { 0.0 }).collect();
        backprop_layer(l1, &self.params, x, &d1, grad);
        loss
    }

    fn sgd_step(&mut self, grad: &[f64], learning_rate: f64) {
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= learning_rate * g;
        }
    }
}

/// Accumulate the weight and bias gradients of `layer` given the gradient at
/// its output, and return the gradient at its input.
fn backprop_layer(layer: &Layer, params: &[f64], input: &[f64], d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
    let w = &params[layer.weights()];
    let mut d_in = vec![0.0; layer.inputs];
    {
        let gw = &mut grad[layer.weights()];
        for (o, &d) in d_out.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = o * layer.inputs;
            for i in 0..layer.inputs {
                gw[row + i] += d * input[i];
                d_in[i] += d * w[row + i];
            }
        }
    }
    let gb = &mut grad[layer.bias()];
    for (g, d) in gb.iter_mut().zip(d_out) {
        *g += d;
    }
    d_in
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    log_sum_exp(logits) - logits[y]
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Fresh model with weights drawn from `U(−1/√fan_in, 1/√fan_in)` and zero biases.
pub fn init_model(dim: usize, width: usize, num_classes: usize, seed: u64) -> Result<AllocatorModel> {
    let mut model = AllocatorModel::zeros(0, dim, width, num_classes)?;
    let mut rng = seed::rng(seed);
    for layer in model.layers {
        let bound = 1.0 / (layer.inputs as f64).sqrt();
        for w in &mut model.params[layer.weights()] {
            // Open interval: redraw the single value that maps to −bound.
            *w = loop {
                let v = bound * (2.0 * rng.random::<f64>() - 1.0);
                if v.abs() < bound {
                    break v;
                }
            };
        }
    }
    Ok(model)
}

/// Budget for one client: the dequantized argmax class.
pub fn predict_budget(model: &AllocatorModel, query: &[f64], delta: usize) -> Result<usize> {
    Ok(dequantize(model.predict_class(query)?, delta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of records held out; when positive the best-validation epoch is returned.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 800,
            learning_rate: 0.01,
            batch_size: 8,
            seed: 0,
            validation_fraction: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidSpec("epochs must be > 0".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidSpec("learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidSpec("validation_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss after each epoch.
    pub train_loss: Vec<f64>,
    /// Validation accuracy after each epoch (empty without a validation split).
    pub validation_accuracy: Vec<f64>,
    /// Epoch (0-based) whose parameters were returned.
    pub selected_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedAllocator {
    pub model: AllocatorModel,
    pub history: TrainHistory,
}

/// Minibatch SGD on cross-entropy, starting from `model`.
///
/// Samples are reshuffled every epoch from a seed derived from `cfg.seed`
/// and the epoch number.
pub fn fit(mut model: AllocatorModel, samples: &[(&[f64], usize)], cfg: &TrainConfig) -> Result<TrainedAllocator> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Training("no training records".into()));
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let (train_idx, val_idx) = if cfg.validation_fraction > 0.0 && samples.len() > 1 {
        order.shuffle(&mut seed::rng(seed::derive(cfg.seed, "validation")));
        let n_val = ((samples.len() as f64 * cfg.validation_fraction).ceil() as usize).min(samples.len() - 1);
        let val = order.split_off(samples.len() - n_val);
        (order, val)
    } else {
        (order, Vec::new())
    };
    let train: Vec<(&[f64], usize)> = train_idx.iter().map(|&i| samples[i]).collect();
    let val: Vec<(&[f64], usize)> = val_idx.iter().map(|&i| samples[i]).collect();

    let mut history = TrainHistory {
        train_loss: Vec::with_capacity(cfg.epochs),
        validation_accuracy: Vec::new(),
        selected_epoch: cfg.epochs - 1,
    };
    let mut best: Option<(f64, AllocatorModel)> = None;
    let mut batch: Vec<(&[f64], usize)> = Vec::with_capacity(cfg.batch_size);
    let mut epoch_order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        epoch_order.sort_unstable();
        epoch_order.shuffle(&mut seed::rng(seed::derive_indexed(cfg.seed, "shuffle", epoch as u64)));
        for (b, chunk) in epoch_order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i]));
            let (loss, grad) = model.loss_and_gradient(&batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {b} (client {}, lr {})",
                    model.client_id, cfg.learning_rate
                )));
            }
            model.sgd_step(&grad, cfg.learning_rate);
        }
        let loss = model.loss(&train)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite training loss after epoch {epoch} (client {})",
                model.client_id
            )));
        }
        history.train_loss.push(loss);

        if !val.is_empty() {
            let acc = accuracy(&model, &val)?;
            history.validation_accuracy.push(acc);
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, model.clone()));
                history.selected_epoch = epoch;
            }
        }
    }

    let model = match best {
        Some((_, m)) => m,
        None => model,
    };
    Ok(TrainedAllocator { model, history })
}

/// Fraction of samples whose predicted class matches.
pub fn accuracy(model: &AllocatorModel, samples: &[(&[f64], usize)]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (x, y) in samples {
        hits += usize::from(model.predict_class(x)? == *y);
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Train client `client`'s allocator on its view of the budget dataset.
pub fn train(client: usize, budgets: &BudgetDataset, width: usize, cfg: &TrainConfig) -> Result<TrainedAllocator> {
    if client >= budgets.num_clients {
        return Err(Error::InvalidSpec(format!(
            "client {client} outside {} clients",
            budgets.num_clients
        )));
    }
    let first = budgets
        .records
        .first()
        .ok_or_else(|| Error::Training("empty budget dataset".into()))?;
    let samples = budgets.client_view(client);
    let mut model = init_model(
        first.vector.dim(),
        width,
        budgets.num_classes(),
        seed::derive_indexed(cfg.seed, "init", client as u64),
    )?;
    model.client_id = client;
    fit(model, &samples, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub schema_version: u32,
    pub client_id: usize,
    pub dim: usize,
    pub width: usize,
    pub num_classes: usize,
    pub delta: usize,
    pub train_config: TrainConfig,
    pub layout: String,
    pub init: String,
    pub optimizer: String,
    pub parameter_count: usize,
}

fn sidecar_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("bin"))
}

impl AllocatorModel {
    pub const SCHEMA_VERSION: u32 = 1;

    /// Write `<base>.json` (metadata) and `<base>.bin` (little-endian f64 parameters).
    pub fn save(&self, base: &Path, delta: usize, train_config: &TrainConfig) -> Result<()> {
        let (json_path, bin_path) = sidecar_paths(base);
        let meta = ModelMetadata {
            schema_version: Self::SCHEMA_VERSION,
            client_id: self.client_id,
            dim: self.dim,
            width: self.width,
            num_classes: self.num_classes,
            delta,
            train_config: train_config.clone(),
            layout: "W1[width][dim], b1[width], W2[width][width], b2[width], W3[classes][width], b3[classes]".into(),
            init: "weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0".into(),
            optimizer: "minibatch SGD, no momentum".into(),
            parameter_count: self.params.len(),
        };
        fs::write(&json_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&json_path, e))?;
        let blob: Vec<u8> = self.params.iter().flat_map(|p| p.to_le_bytes()).collect();
        fs::write(&bin_path, blob).map_err(|e| Error::io(&bin_path, e))
    }

    pub fn load(base: &Path) -> Result<(Self, ModelMetadata)> {
        let (json_path, bin_path) = sidecar_paths(base);
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let meta: ModelMetadata = serde_json::from_str(&text)?;
        let mut model = AllocatorModel::zeros(meta.client_id, meta.dim, meta.width, meta.num_classes)?;
        let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        if blob.len() != model.params.len() * 8 {
            return Err(Error::Validation(format!(
                "{}: expected {} parameters, found {} bytes",
                bin_path.display(),
                model.params.len(),
                blob.len()
            )));
        }
        for (p, b) in model.params.iter_mut().zip(blob.chunks_exact(8)) {
            *p = f64::from_le_bytes(b.try_into().expect("8 bytes"));
            if !p.is_finite() {
                return Err(Error::Validation(format!("{}: non-finite parameter", bin_path.display())));
            }
        }
        Ok((model, meta))
    }
}
