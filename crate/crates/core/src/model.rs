//! Dense ReLU classifier with softmax cross-entropy, plain SGD, and the
//! relative-loss stopping rule used for every finetuning run.
//!
//! Layers are stored row-major with shape `(out, in)`. The rectifier is
//! applied between layers and never after the final (head) layer, so the
//! head emits raw logits.

use crate::datagen::LabeledExample;
use crate::error::{config_err, data_err, shape_err, Error, Result};
use crate::rng::SeedStream;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Initial full-data losses at or below this are treated as already converged.
pub const DEGENERATE_LOSS: f64 = 1e-12;

/// Above this many parameters, [`gradient_check`] probes a seeded subsample.
pub const GRADIENT_CHECK_CAP: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Layer {
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(shape_err(format!("layer dimensions must be positive, got {rows}x{cols}")));
        }
        if weights.len() != rows * cols || bias.len() != rows {
            return Err(shape_err(format!(
                "layer {rows}x{cols} needs {} weights and {rows} biases, got {} and {}",
                rows * cols,
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(data_err("layer contains non-finite entries"));
        }
        Ok(Self {
            rows,
            cols,
            weights,
            bias,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    /// Weights from N(0, 1/fan_in), zero bias.
    pub fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (cols as f64).sqrt();
        let weights = (0..rows * cols)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        Self {
            rows,
            cols,
            weights,
            bias: vec![0.0; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.cols + col]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub(crate) fn forward_into(&self, input: &[f64], out: &mut [f64], relu: bool) {
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            let acc = self.bias[r] + dot(row, input);
            *o = if relu && acc < 0.0 { 0.0 } else { acc };
        }
    }

    /// grad += delta ⊗ input
    pub(crate) fn accumulate(&self, delta: &[f64], input: &[f64], grad: &mut Layer) {
        for (r, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &mut grad.weights[r * self.cols..(r + 1) * self.cols];
            for (g, x) in row.iter_mut().zip(input) {
                *g += d * x;
            }
            grad.bias[r] += d;
        }
    }

    /// out = Wᵀ delta, masked by the rectifier derivative of `input`.
    pub(crate) fn backprop_into(&self, delta: &[f64], input: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (r, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * d;
            }
        }
        for (o, x) in out.iter_mut().zip(input) {
            if *x <= 0.0 {
                *o = 0.0;
            }
        }
    }

    pub(crate) fn scaled_add(&mut self, other: &Layer, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += scale * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += scale * b;
        }
    }

    pub(crate) fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|v| *v *= s);
        self.bias.iter_mut().for_each(|v| *v *= s);
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn param(&self, i: usize) -> f64 {
        if i < self.weights.len() {
            self.weights[i]
        } else {
            self.bias[i - self.weights.len()]
        }
    }

    fn param_mut(&mut self, i: usize) -> &mut f64 {
        if i < self.weights.len() {
            &mut self.weights[i]
        } else {
            let n = self.weights.len();
            &mut self.bias[i - n]
        }
    }

    pub(crate) fn write_bytes(&self, out: &mut Vec<u8>) {
        for v in self.weights.iter().chain(&self.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// A chain of dense layers. The last layer is the classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
    activation: Activation,
}

impl ModelParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(shape_err("a model needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].rows != pair[1].cols {
                return Err(shape_err(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].rows,
                    i + 1,
                    pair[1].cols
                )));
            }
        }
        Ok(Self {
            layers,
            activation: Activation::Relu,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.head_index()].rows
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.rows))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Layer::zeros(l.rows, l.cols)).collect(),
            activation: self.activation,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    #[cfg(test)]
    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub(crate) fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
    }

    /// Parameter `i` in flat order (layer by layer, weights then bias).
    pub fn param(&self, mut i: usize) -> f64 {
        for l in &self.layers {
            if i < l.param_count() {
                return l.param(i);
            }
            i -= l.param_count();
        }
        panic!("parameter index out of range");
    }

    pub(crate) fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        for l in &mut self.layers {
            if i < l.param_count() {
                return l.param_mut(i);
            }
            i -= l.param_count();
        }
        panic!("parameter index out of range");
    }

    /// Little-endian byte image of every parameter; used for bitwise comparisons and digests.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.param_count() * 8);
        for l in &self.layers {
            l.write_bytes(&mut out);
        }
        out
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(shape_err(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Runs every layer, storing each layer's output in `acts[1..]` (acts[0] = input).
    fn trace(&self, x: &[f64], acts: &mut Vec<Vec<f64>>) {
        if acts.len() != self.layers.len() + 1 {
            acts.clear();
            acts.push(vec![0.0; self.input_dim()]);
            acts.extend(self.layers.iter().map(|l| vec![0.0; l.rows]));
        }
        acts[0].copy_from_slice(x);
        let head = self.head_index();
        for (i, layer) in self.layers.iter().enumerate() {
            let (done, rest) = acts.split_at_mut(i + 1);
            layer.forward_into(&done[i], &mut rest[0], i != head);
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut acts = Vec::new();
        self.trace(x, &mut acts);
        Ok(acts.pop().unwrap_or_default())
    }

    /// Index of the most probable class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let logits = self.logits(x)?;
        Ok(argmax(&logits))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A categorical distribution over class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(data_err("probability vector is empty"));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(data_err("probabilities must lie in [0, 1]"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(data_err(format!("probabilities sum to {sum}, expected 1")));
        }
        Ok(Self(probs))
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        Self(softmax(logits))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// Four independent partial sums so the loop vectorizes; the summation
/// order is fixed, so results stay bit-reproducible.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

pub fn init_mlp(dims: &[usize], stream: &SeedStream) -> Result<ModelParams> {
    if dims.len() < 2 {
        return Err(config_err(format!(
            "network dims need at least an input and an output size, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(config_err(format!("network dims must be positive, got {dims:?}")));
    }
    let mut rng = stream.rng();
    let layers = dims
        .windows(2)
        .map(|w| Layer::random(w[1], w[0], &mut rng))
        .collect();
    ModelParams::new(layers)
}

pub fn forward(params: &ModelParams, x: &[f64]) -> Result<ProbVector> {
    Ok(ProbVector::from_logits(&params.logits(x)?))
}

/// One (input, class) pair borrowed from wherever the data lives.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub x: &'a [f64],
    pub y: usize,
}

impl<'a> Sample<'a> {
    pub fn of(example: &'a LabeledExample) -> Self {
        Self {
            x: &example.features,
            y: example.label,
        }
    }
}

fn check_samples(params: &ModelParams, samples: &[Sample<'_>]) -> Result<()> {
    if samples.is_empty() {
        return Err(data_err("batch is empty"));
    }
    let c = params.num_classes();
    for s in samples {
        params.check_input(s.x)?;
        if s.y >= c {
            return Err(data_err(format!("label {} out of range for {c} classes", s.y)));
        }
    }
    Ok(())
}

/// Mean cross-entropy, no gradient.
pub fn mean_loss(params: &ModelParams, samples: &[Sample<'_>]) -> Result<f64> {
    check_samples(params, samples)?;
    let mut acts = Vec::new();
    let mut total = 0.0;
    for s in samples {
        params.trace(s.x, &mut acts);
        let logits = &acts[acts.len() - 1];
        total += log_sum_exp(logits) - logits[s.y];
    }
    Ok(total / samples.len() as f64)
}

pub(crate) fn mean_loss_indexed(params: &ModelParams, samples: &[Sample<'_>], idx: &[usize]) -> f64 {
    let mut acts = Vec::new();
    let mut total = 0.0;
    for &i in idx {
        let s = samples[i];
        params.trace(s.x, &mut acts);
        let logits = &acts[acts.len() - 1];
        total += log_sum_exp(logits) - logits[s.y];
    }
    total / idx.len() as f64
}

/// Mean cross-entropy and its exact gradient, accumulated in sample order.
pub fn loss_and_grad_samples(params: &ModelParams, samples: &[Sample<'_>]) -> Result<(f64, ModelParams)> {
    check_samples(params, samples)?;
    let idx: Vec<usize> = (0..samples.len()).collect();
    Ok(loss_and_grad_indexed(params, samples, &idx))
}

pub(crate) fn loss_and_grad_indexed(
    params: &ModelParams,
    samples: &[Sample<'_>],
    idx: &[usize],
) -> (f64, ModelParams) {
    let mut grad = params.zeros_like();
    let mut acts = Vec::new();
    let mut total = 0.0;
    let mut delta: Vec<f64> = Vec::new();
    let mut next: Vec<f64> = Vec::new();
    let head = params.head_index();
    for &i in idx {
        let s = samples[i];
        params.trace(s.x, &mut acts);
        let logits = &acts[head + 1];
        total += log_sum_exp(logits) - logits[s.y];
        delta.clear();
        delta.extend(softmax(logits));
        delta[s.y] -= 1.0;
        for l in (0..=head).rev() {
            let layer = &params.layers[l];
            layer.accumulate(&delta, &acts[l], &mut grad.layers[l]);
            if l > 0 {
                next.resize(layer.cols, 0.0);
                layer.backprop_into(&delta, &acts[l], &mut next);
                std::mem::swap(&mut delta, &mut next);
            }
        }
    }
    let n = idx.len() as f64;
    grad.layers.iter_mut().for_each(|l| l.scale(1.0 / n));
    (total / n, grad)
}

pub fn loss_and_grad(params: &ModelParams, batch: &[LabeledExample]) -> Result<(f64, ModelParams)> {
    let samples: Vec<Sample<'_>> = batch.iter().map(Sample::of).collect();
    loss_and_grad_samples(params, &samples)
}

pub fn sgd_step(params: &ModelParams, grad: &ModelParams, learning_rate: f64) -> Result<ModelParams> {
    if !params.same_shape(grad) {
        return Err(shape_err("gradient shape does not match parameters"));
    }
    let mut out = params.clone();
    out.scaled_add(grad, -learning_rate);
    Ok(out)
}

/// Anything plain SGD can update in place.
pub(crate) trait ParamSet: Clone {
    fn scaled_add(&mut self, other: &Self, scale: f64);
}

impl ParamSet for ModelParams {
    fn scaled_add(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.scaled_add(b, scale);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    #[serde(default = "default_stop_factor")]
    pub stop_factor: f64,
    #[serde(skip)]
    pub stream: SeedStream,
}

fn default_stop_factor() -> f64 {
    0.001
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 32,
            max_steps: 3000,
            stop_factor: default_stop_factor(),
            stream: SeedStream::default(),
        }
    }
}

impl TrainConfig {
    pub fn with_stream(&self, stream: SeedStream) -> Self {
        Self {
            stream,
            ..self.clone()
        }
    }

    /// Every violated constraint, each prefixed by `prefix` (e.g. `train.`).
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            out.push(format!(
                "{prefix}learning_rate: must be a finite non-negative number, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            out.push(format!("{prefix}batch_size: must be positive"));
        }
        if !(self.stop_factor > 0.0 && self.stop_factor < 1.0) {
            out.push(format!("{prefix}stop_factor: must lie in (0, 1), got {}", self.stop_factor));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations("").into_iter().next() {
            Some(v) => Err(config_err(v)),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Threshold,
    MaxSteps,
    Degenerate,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Threshold => "threshold",
            StopReason::MaxSteps => "max_steps",
            StopReason::Degenerate => "degenerate",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTrace {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps_taken: usize,
    pub stopped_by: StopReason,
}

/// Minibatch SGD over `n` examples with reshuffling every epoch. After each
/// step the full-data loss is compared with `stop_factor × initial loss`.
pub(crate) fn descend<P: ParamSet>(
    mut params: P,
    n: usize,
    cfg: &TrainConfig,
    full_loss: impl Fn(&P) -> f64,
    mut batch_grad: impl FnMut(&P, &[usize]) -> P,
) -> Result<(P, TrainTrace)> {
    cfg.validate()?;
    if n == 0 {
        return Err(data_err("cannot train on an empty dataset"));
    }
    let initial = full_loss(&params);
    if !initial.is_finite() {
        return Err(Error::Divergence { step: 0, loss: initial });
    }
    if initial <= DEGENERATE_LOSS {
        let trace = TrainTrace {
            initial_loss: initial,
            final_loss: initial,
            steps_taken: 0,
            stopped_by: StopReason::Degenerate,
        };
        return Ok((params, trace));
    }
    let threshold = cfg.stop_factor * initial;
    let mut rng = cfg.stream.rng();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut loss = initial;
    for step in 1..=cfg.max_steps {
        if cursor >= n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(n);
        let grad = batch_grad(&params, &order[cursor..end]);
        cursor = end;
        params.scaled_add(&grad, -cfg.learning_rate);
        loss = full_loss(&params);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        if loss <= threshold {
            let trace = TrainTrace {
                initial_loss: initial,
                final_loss: loss,
                steps_taken: step,
                stopped_by: StopReason::Threshold,
            };
            return Ok((params, trace));
        }
    }
    let trace = TrainTrace {
        initial_loss: initial,
        final_loss: loss,
        steps_taken: cfg.max_steps,
        stopped_by: StopReason::MaxSteps,
    };
    Ok((params, trace))
}

/// Like [`train_to_convergence`] but over borrowed samples, optionally holding
/// the first `frozen_layers` layers fixed.
pub fn train_samples(
    params: ModelParams,
    samples: &[Sample<'_>],
    cfg: &TrainConfig,
    frozen_layers: usize,
) -> Result<(ModelParams, TrainTrace)> {
    if samples.is_empty() {
        return Err(data_err("cannot train on an empty dataset"));
    }
    check_samples(&params, samples)?;
    let all: Vec<usize> = (0..samples.len()).collect();
    descend(
        params,
        samples.len(),
        cfg,
        |p| mean_loss_indexed(p, samples, &all),
        |p, batch| {
            let (_, mut g) = loss_and_grad_indexed(p, samples, batch);
            for l in g.layers.iter_mut().take(frozen_layers) {
                l.scale(0.0);
            }
            g
        },
    )
}

pub fn train_to_convergence(
    params: ModelParams,
    data: &[LabeledExample],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainTrace)> {
    let samples: Vec<Sample<'_>> = data.iter().map(Sample::of).collect();
    train_samples(params, &samples, cfg, 0)
}

/// Largest relative disagreement between analytic gradients and central
/// differences. Magnitudes below `1e-6` are compared on an absolute scale.
pub fn gradient_check(params: &ModelParams, batch: &[LabeledExample], eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(config_err(format!("eps must be positive, got {eps}")));
    }
    let samples: Vec<Sample<'_>> = batch.iter().map(Sample::of).collect();
    let (_, grad) = loss_and_grad_samples(params, &samples)?;
    let total = params.param_count();
    let indices: Vec<usize> = if total > GRADIENT_CHECK_CAP {
        let mut all: Vec<usize> = (0..total).collect();
        all.shuffle(&mut SeedStream::new(0).child("gradient-check").rng());
        all.truncate(GRADIENT_CHECK_CAP);
        all.sort_unstable();
        all
    } else {
        (0..total).collect()
    };
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in indices {
        let orig = params.param(i);
        *probe.param_mut(i) = orig + eps;
        let up = mean_loss(&probe, &samples)?;
        *probe.param_mut(i) = orig - eps;
        let down = mean_loss(&probe, &samples)?;
        *probe.param_mut(i) = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grad.param(i);
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn example(id: u64, x: Vec<f64>, y: usize) -> LabeledExample {
        LabeledExample {
            id,
            features: x,
            label: y,
            attributes: BTreeMap::new(),
        }
    }

    fn linear(weights: Vec<f64>, bias: Vec<f64>, rows: usize, cols: usize) -> ModelParams {
        ModelParams::new(vec![Layer::new(rows, cols, weights, bias).unwrap()]).unwrap()
    }

    fn random_batch(n: usize, d: usize, c: usize, seed: u64) -> Vec<LabeledExample> {
        let mut rng = SeedStream::new(seed).child("batch").rng();
        (0..n)
            .map(|i| {
                let x = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                example(i as u64, x, rng.random_range(0..c))
            })
            .collect()
    }

    /// Zero biases put every unit fed by a dead layer exactly on the rectifier
    /// kink, where finite differences disagree with the subgradient.
    fn jitter_biases(m: &mut ModelParams, seed: u64) {
        let mut rng = SeedStream::new(seed).child("bias").rng();
        for l in m.layers_mut() {
            for b in l.bias.iter_mut() {
                *b = 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    #[test]
    fn init_is_deterministic() {
        let s = SeedStream::new(3).child("init");
        let a = init_mlp(&[4, 2], &s).unwrap();
        let b = init_mlp(&[4, 2], &s).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn init_chains_shapes_with_zero_bias() {
        let m = init_mlp(&[4, 8, 2], &SeedStream::new(1)).unwrap();
        let shapes: Vec<(usize, usize)> = m.layers().iter().map(|l| (l.rows(), l.cols())).collect();
        assert_eq!(shapes, vec![(8, 4), (2, 8)]);
        assert!(m.layers().iter().all(|l| l.bias().iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_rejects_degenerate_dims() {
        assert!(matches!(init_mlp(&[4], &SeedStream::new(1)), Err(Error::Config(_))));
        assert!(matches!(init_mlp(&[], &SeedStream::new(1)), Err(Error::Config(_))));
        assert!(matches!(init_mlp(&[4, 0, 2], &SeedStream::new(1)), Err(Error::Config(_))));
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = linear(vec![0.0; 6], vec![0.0; 3], 3, 2);
        let p = forward(&m, &[0.3, -2.0]).unwrap();
        for &v in p.probs() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn analytic_softmax() {
        let m = linear(vec![10.0, 0.0], vec![0.0, 0.0], 2, 1);
        let p = forward(&m, &[1.0]).unwrap();
        assert!((p.probs()[0] - 0.9999546).abs() < 1e-7);
        assert!((p.probs()[1] - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = init_mlp(&[3, 2], &SeedStream::new(1)).unwrap();
        assert!(matches!(forward(&m, &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn uniform_model_loss_is_ln2() {
        let m = linear(vec![0.0; 4], vec![0.0; 2], 2, 2);
        let batch = random_batch(7, 2, 2, 5);
        let (loss, _) = loss_and_grad(&m, &batch).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        let m = linear(vec![0.5, -1.0, 0.25, 2.0, 0.0, 1.0], vec![0.1, -0.2], 2, 3);
        let x = vec![1.5, -0.5, 2.0];
        let batch = vec![example(0, x.clone(), 1)];
        let (_, g) = loss_and_grad(&m, &batch).unwrap();
        let p = forward(&m, &x).unwrap();
        for r in 0..2 {
            let d = p.probs()[r] - if r == 1 { 1.0 } else { 0.0 };
            for c in 0..3 {
                assert!((g.layers()[0].weight(r, c) - d * x[c]).abs() < 1e-15);
            }
            assert!((g.layers()[0].bias()[r] - d).abs() < 1e-15);
        }
    }

    #[test]
    fn label_out_of_range() {
        let m = init_mlp(&[2, 2], &SeedStream::new(1)).unwrap();
        let batch = vec![example(0, vec![0.0, 1.0], 2)];
        assert!(matches!(loss_and_grad(&m, &batch), Err(Error::Data(_))));
        assert!(matches!(loss_and_grad(&m, &[]), Err(Error::Data(_))));
    }

    #[test]
    fn two_hidden_layers_match_finite_differences() {
        let m = init_mlp(&[6, 10, 10, 3], &SeedStream::new(11)).unwrap();
        let batch = random_batch(8, 6, 3, 12);
        assert!(gradient_check(&m, &batch, 1e-5).unwrap() <= 1e-4);
    }

    #[test]
    fn gradient_check_exact_for_linear_model() {
        let m = init_mlp(&[5, 3], &SeedStream::new(2)).unwrap();
        let batch = random_batch(4, 5, 3, 3);
        assert!(gradient_check(&m, &batch, 1e-5).unwrap() <= 1e-8);
    }

    #[test]
    fn zero_inputs_zero_first_layer_gradient() {
        let mut m = init_mlp(&[4, 6, 2], &SeedStream::new(4)).unwrap();
        jitter_biases(&mut m, 4);
        let batch: Vec<_> = (0..3).map(|i| example(i, vec![0.0; 4], (i % 2) as usize)).collect();
        let (_, g) = loss_and_grad(&m, &batch).unwrap();
        assert!(g.layers()[0].weights().iter().all(|&w| w == 0.0));
        assert!(gradient_check(&m, &batch, 1e-5).unwrap() <= 1e-4);
    }

    #[test]
    fn gradient_check_reference_net() {
        let m = init_mlp(&[8, 16, 16, 4], &SeedStream::new(9)).unwrap();
        let batch = random_batch(5, 8, 4, 10);
        assert!(gradient_check(&m, &batch, 1e-5).unwrap() <= 1e-4);
    }

    #[test]
    fn gradient_check_rejects_bad_eps() {
        let m = init_mlp(&[2, 2], &SeedStream::new(1)).unwrap();
        let batch = random_batch(2, 2, 2, 1);
        assert!(gradient_check(&m, &batch, 0.0).is_err());
    }

    #[test]
    fn sgd_arithmetic() {
        let p = linear(vec![1.0], vec![0.0], 1, 1);
        let g = linear(vec![0.5], vec![0.0], 1, 1);
        let q = sgd_step(&p, &g, 0.1).unwrap();
        assert!((q.layers()[0].weight(0, 0) - 0.95).abs() < 1e-15);
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
    }

    #[test]
    fn sgd_half_steps_compose() {
        let p = init_mlp(&[3, 4, 2], &SeedStream::new(1)).unwrap();
        let batch = random_batch(4, 3, 2, 2);
        let (_, g) = loss_and_grad(&p, &batch).unwrap();
        let once = sgd_step(&p, &g, 0.2).unwrap();
        let twice = sgd_step(&sgd_step(&p, &g, 0.1).unwrap(), &g, 0.1).unwrap();
        for i in 0..p.param_count() {
            assert!((once.param(i) - twice.param(i)).abs() < 1e-14);
        }
    }

    #[test]
    fn sgd_shape_mismatch() {
        let p = init_mlp(&[3, 2], &SeedStream::new(1)).unwrap();
        let g = init_mlp(&[2, 2], &SeedStream::new(1)).unwrap();
        assert!(matches!(sgd_step(&p, &g, 0.1), Err(Error::Shape(_))));
    }

    fn separable(n: usize) -> Vec<LabeledExample> {
        (0..n)
            .map(|i| {
                let y = i % 2;
                let s = if y == 0 { -1.0 } else { 1.0 };
                example(i as u64, vec![s, 0.3 * s + 0.01 * i as f64], y)
            })
            .collect()
    }

    #[test]
    fn threshold_stop_honours_factor() {
        let data = separable(20);
        let m = init_mlp(&[2, 8, 2], &SeedStream::new(5)).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.5,
            batch_size: 4,
            max_steps: 20_000,
            ..TrainConfig::default()
        }
        .with_stream(SeedStream::new(5).child("train"));
        let (_, trace) = train_to_convergence(m, &data, &cfg).unwrap();
        assert_eq!(trace.stopped_by, StopReason::Threshold);
        assert!(trace.final_loss <= 0.001 * trace.initial_loss);
        assert!(trace.steps_taken <= cfg.max_steps);
    }

    #[test]
    fn zero_learning_rate_hits_max_steps() {
        let data = separable(10);
        let m = init_mlp(&[2, 4, 2], &SeedStream::new(6)).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 3,
            max_steps: 25,
            ..TrainConfig::default()
        };
        let (out, trace) = train_to_convergence(m.clone(), &data, &cfg).unwrap();
        assert_eq!(trace.stopped_by, StopReason::MaxSteps);
        assert_eq!(trace.steps_taken, 25);
        assert_eq!(trace.final_loss, trace.initial_loss);
        assert_eq!(out, m);
    }

    #[test]
    fn perfect_model_is_degenerate() {
        // Huge logit gap: exp(-1000) underflows, so the loss is exactly zero.
        let m = linear(vec![1000.0, -1000.0], vec![0.0, 0.0], 2, 1);
        let data = vec![example(0, vec![1.0], 0)];
        let (_, trace) = train_to_convergence(m, &data, &TrainConfig::default()).unwrap();
        assert_eq!(trace.steps_taken, 0);
        assert_eq!(trace.stopped_by, StopReason::Degenerate);
    }

    #[test]
    fn divergence_names_step() {
        let data = separable(10);
        let m = init_mlp(&[2, 4, 2], &SeedStream::new(6)).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            batch_size: 10,
            max_steps: 50,
            ..TrainConfig::default()
        };
        match train_to_convergence(m, &data, &cfg) {
            Err(Error::Divergence { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let data = random_batch(30, 4, 3, 8);
        let m = init_mlp(&[4, 8, 3], &SeedStream::new(8)).unwrap();
        let cfg = TrainConfig {
            max_steps: 200,
            ..TrainConfig::default()
        }
        .with_stream(SeedStream::new(8).child("t"));
        let (a, ta) = train_to_convergence(m.clone(), &data, &cfg).unwrap();
        let (b, tb) = train_to_convergence(m, &data, &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ta, tb);
    }

    proptest! {
        #[test]
        fn forward_sums_to_one(seed in 0u64..10_000, scale in 0.1f64..20.0) {
            let m = init_mlp(&[5, 7, 4], &SeedStream::new(seed)).unwrap();
            let mut rng = SeedStream::new(seed).child("x").rng();
            let x: Vec<f64> = (0..5).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
            let p = forward(&m, &x).unwrap();
            let sum: f64 = p.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            prop_assert!(p.probs().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn softmax_shift_invariant(logits in proptest::collection::vec(-30.0f64..30.0, 2..8), shift in -50.0f64..50.0) {
            let a = softmax(&logits);
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let b = softmax(&shifted);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn random_nets_pass_gradient_check(seed in 0u64..1000, hidden in 1usize..4) {
            let mut dims = vec![4];
            dims.extend(std::iter::repeat_n(6, hidden));
            dims.push(3);
            let mut m = init_mlp(&dims, &SeedStream::new(seed)).unwrap();
            jitter_biases(&mut m, seed);
            let batch = random_batch(4, 4, 3, seed + 1);
            prop_assert!(gradient_check(&m, &batch, 1e-5).unwrap() <= 1e-4);
        }
    }
}
