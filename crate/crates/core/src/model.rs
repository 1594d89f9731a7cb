//! Classifiers `f = h ∘ g` with hand-derived gradients.
//!
//! Two architectures are supported: a linear softmax classifier (where `g`
//! is the identity) and a multilayer perceptron whose last hidden layer is
//! the embedding `g(x)`. Parameters live in one flat vector, layer by
//! layer, each layer storing its row-major weight matrix followed by its
//! bias.

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::buffer::Labeled;
use crate::metrics;
use crate::seed::rng_for;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("input has dimension {got}, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("label {label} outside [0, {num_classes})")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
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

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArchKind {
    Linear,
    Mlp { hidden_dims: Vec<usize>, activation: Activation },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    #[serde(flatten)]
    pub kind: ArchKind,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ArchSpec {
    pub fn linear(input_dim: usize, num_classes: usize) -> Self {
        ArchSpec { kind: ArchKind::Linear, input_dim, num_classes }
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, activation: Activation, num_classes: usize) -> Self {
        ArchSpec { kind: ArchKind::Mlp { hidden_dims, activation }, input_dim, num_classes }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(ModelError::InvalidSpec("input_dim and num_classes must be positive".into()));
        }
        if let ArchKind::Mlp { hidden_dims, .. } = &self.kind {
            if hidden_dims.is_empty() {
                return Err(ModelError::InvalidSpec("mlp needs at least one hidden layer".into()));
            }
            if hidden_dims.contains(&0) {
                return Err(ModelError::InvalidSpec("hidden dimensions must be positive".into()));
            }
        }
        Ok(())
    }

    /// Output dimension of the feature extractor `g`.
    pub fn feature_dim(&self) -> usize {
        match &self.kind {
            ArchKind::Linear => self.input_dim,
            ArchKind::Mlp { hidden_dims, .. } => *hidden_dims.last().expect("validated"),
        }
    }

    pub fn network(&self) -> Network {
        let mut dims = vec![self.input_dim];
        let activation = match &self.kind {
            ArchKind::Linear => Activation::Relu,
            ArchKind::Mlp { hidden_dims, activation } => {
                dims.extend(hidden_dims);
                *activation
            }
        };
        dims.push(self.num_classes);
        Network::new(dims, activation)
    }

    pub fn param_count(&self) -> usize {
        self.network().param_count()
    }
}

/// A stack of dense layers with an activation after every layer but the
/// last. Holds shapes only; parameters are passed in as flat slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    dims: Vec<usize>,
    activation: Activation,
    offsets: Vec<usize>,
}

/// Per-layer pre-activations and outputs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input to layer `l`; `inputs[0]` is `x`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl ForwardCache {
    /// Input to the final layer: the embedding `g(x)`.
    pub fn embedding(&self) -> &[f64] {
        self.inputs.last().expect("at least one layer")
    }
}

impl Network {
    pub fn new(dims: Vec<usize>, activation: Activation) -> Self {
        assert!(dims.len() >= 2, "a network needs an input and an output dimension");
        let mut offsets = Vec::with_capacity(dims.len());
        let mut off = 0;
        for w in dims.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        offsets.push(off);
        Network { dims, activation, offsets }
    }

    pub fn param_count(&self) -> usize {
        *self.offsets.last().expect("nonempty")
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("nonempty")
    }

    fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    fn layer<'p>(&self, params: &'p [f64], l: usize) -> (&'p [f64], &'p [f64]) {
        let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
        let w_end = self.offsets[l] + fan_in * fan_out;
        (&params[self.offsets[l]..w_end], &params[w_end..w_end + fan_out])
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, seed: u64, tag: &str) -> Vec<f64> {
        let mut rng = rng_for(seed, tag, 0);
        let mut params = vec![0.0; self.param_count()];
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let start = self.offsets[l];
            for w in &mut params[start..start + fan_in * fan_out] {
                *w = dist.sample(&mut rng);
            }
        }
        params
    }

    pub fn forward_cached(&self, params: &[f64], x: &[f64]) -> ForwardCache {
        debug_assert_eq!(x.len(), self.input_dim());
        let last = self.num_layers() - 1;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(last);
        let mut h = x.to_vec();
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(params, l);
            let fan_in = self.dims[l];
            let z: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(o, &bias)| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    row.iter().zip(&h).fold(bias, |acc, (wi, hi)| acc + wi * hi)
                })
                .collect();
            inputs.push(std::mem::take(&mut h));
            if l < last {
                h = z.iter().map(|&v| self.activation.apply(v)).collect();
                pre.push(z);
            } else {
                h = z;
            }
        }
        ForwardCache { inputs, pre, output: h }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        self.forward_cached(params, x).output
    }

    /// Output of the last hidden layer (the input itself for a single
    /// layer network).
    pub fn embed(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut cache = self.forward_cached(params, x);
        cache.inputs.pop().expect("at least one layer")
    }

    /// Reverse-mode pass for one example.
    ///
    /// `d_output` is the loss gradient at the network output; `None` skips
    /// the final layer entirely. `d_embedding` is an extra gradient injected
    /// at the final layer's input. Parameter gradients are accumulated into
    /// `grad`; the gradient with respect to `x` is returned.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ForwardCache,
        d_output: Option<&[f64]>,
        d_embedding: Option<&[f64]>,
        grad: &mut [f64],
    ) -> Vec<f64> {
        let last = self.num_layers() - 1;
        let mut dh: Vec<f64> = match d_output {
            Some(dz) => self.layer_backward(params, cache, last, dz, grad),
            None => vec![0.0; self.dims[last]],
        };
        if let Some(de) = d_embedding {
            for (a, b) in dh.iter_mut().zip(de) {
                *a += b;
            }
        }
        for l in (0..last).rev() {
            let z = &cache.pre[l];
            let a = &cache.inputs[l + 1];
            let dz: Vec<f64> = dh
                .iter()
                .zip(z.iter().zip(a))
                .map(|(g, (&zi, &ai))| g * self.activation.derivative(zi, ai))
                .collect();
            dh = self.layer_backward(params, cache, l, &dz, grad);
        }
        dh
    }

    fn layer_backward(&self, params: &[f64], cache: &ForwardCache, l: usize, dz: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
        let (w, _) = self.layer(params, l);
        let h = &cache.inputs[l];
        let start = self.offsets[l];
        let (gw, gb) = grad[start..start + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
        let mut dh = vec![0.0; fan_in];
        for o in 0..fan_out {
            let g = dz[o];
            gb[o] += g;
            let row = &w[o * fan_in..(o + 1) * fan_in];
            let grow = &mut gw[o * fan_in..(o + 1) * fan_in];
            for i in 0..fan_in {
                grow[i] += g * h[i];
                dh[i] += row[i] * g;
            }
        }
        dh
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

/// Cross-entropy of one example and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let loss = log_sum_exp(logits) - logits[label];
    let mut d = softmax(logits);
    d[label] -= 1.0;
    (loss, d)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub spec: ArchSpec,
    pub params: Vec<f64>,
}

impl ClassifierModel {
    pub fn init(spec: ArchSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let params = spec.network().init(seed, "model-init");
        Ok(ClassifierModel { spec, params })
    }

    pub fn from_params(spec: ArchSpec, params: Vec<f64>) -> Result<Self, ModelError> {
        spec.validate()?;
        let expected = spec.param_count();
        if params.len() != expected {
            return Err(ModelError::ParamCount { expected, got: params.len() });
        }
        Ok(ClassifierModel { spec, params })
    }

    pub fn network(&self) -> Network {
        self.spec.network()
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.spec.input_dim {
            return Err(ModelError::Dimension { expected: self.spec.input_dim, got: x.len() });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_input(x)?;
        Ok(self.network().forward(&self.params, x))
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_input(x)?;
        Ok(self.network().embed(&self.params, x))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize, ModelError> {
        Ok(argmax(&self.forward(x)?))
    }

    pub fn predict_all<'a, I>(&self, xs: I) -> Result<Vec<usize>, ModelError>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let net = self.network();
        xs.into_iter()
            .map(|x| {
                self.check_input(x)?;
                Ok(argmax(&net.forward(&self.params, x)))
            })
            .collect()
    }

    /// Mean cross-entropy over `data[idx]` and its exact gradient.
    pub fn grad_indexed(&self, data: &[Labeled], idx: &[usize]) -> Result<(f64, Vec<f64>), ModelError> {
        if idx.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let net = self.network();
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for &i in idx {
            let ex = &data[i];
            self.check_input(&ex.features)?;
            if ex.label >= self.spec.num_classes {
                return Err(ModelError::LabelOutOfRange { label: ex.label, num_classes: self.spec.num_classes });
            }
            let cache = net.forward_cached(&self.params, &ex.features);
            let (l, d) = cross_entropy(&cache.output, ex.label);
            loss += l;
            net.backward(&self.params, &cache, Some(&d), None, &mut grad);
        }
        let n = idx.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((loss / n, grad))
    }

    pub fn grad(&self, batch: &[Labeled]) -> Result<(f64, Vec<f64>), ModelError> {
        let idx: Vec<usize> = (0..batch.len()).collect();
        self.grad_indexed(batch, &idx)
    }

    /// Macro-F1 of the model's predictions against the labels of `data`.
    pub fn macro_f1(&self, data: &[Labeled]) -> Result<f64, ModelError> {
        if data.is_empty() {
            return Err(ModelError::EmptySet("evaluation"));
        }
        let preds = self.predict_all(data.iter().map(|e| e.features.as_slice()))?;
        let golds: Vec<usize> = data.iter().map(|e| e.label).collect();
        metrics::macro_f1(&preds, &golds, self.spec.num_classes)
            .map_err(|_| ModelError::LabelOutOfRange { label: usize::MAX, num_classes: self.spec.num_classes })
    }

    /// Short hex digest of the parameter bits.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.to_bits().to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..8])
    }
}

fn default_lr() -> f64 {
    2e-3
}
fn default_wd() -> f64 {
    0.01
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

/// Optimiser settings for [`fit`]. Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: default_lr(),
            weight_decay: default_wd(),
            batch_size: default_batch(),
            max_epochs: default_epochs(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
        }
    }
}

impl TrainHyper {
    /// Learning rate used for fine-tuning large pretrained encoders; far
    /// too small for the from-scratch models here but kept for reference.
    pub const ENCODER_LEARNING_RATE: f64 = 2e-5;

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(ModelError::InvalidHyper("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidHyper("batch_size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(ModelError::InvalidHyper("max_epochs must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(ModelError::InvalidHyper("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Adam state with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl AdamW {
    pub fn new(n: usize) -> Self {
        AdamW { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], hyper: &TrainHyper) {
        self.step += 1;
        let (b1, b2) = (hyper.beta1, hyper.beta2);
        let bc1 = 1.0 - b1.powi(self.step);
        let bc2 = 1.0 - b2.powi(self.step);
        let lr = hyper.learning_rate;
        for i in 0..params.len() {
            params[i] *= 1.0 - lr * hyper.weight_decay;
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + hyper.epsilon);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub model: ClassifierModel,
    /// Validation macro-F1 after each epoch.
    pub val_history: Vec<f64>,
    /// 1-based epoch whose snapshot was returned.
    pub best_epoch: usize,
}

/// Index of the first maximum.
pub fn best_epoch_index(history: &[f64]) -> Option<usize> {
    if history.is_empty() {
        return None;
    }
    Some(argmax(history))
}

/// Mini-batch training with per-epoch validation; returns the snapshot of
/// the epoch with the highest validation macro-F1, the earliest one on
/// ties.
pub fn fit(
    model: &ClassifierModel,
    train: &[Labeled],
    val: &[Labeled],
    hyper: &TrainHyper,
    seed: u64,
) -> Result<FitOutcome, ModelError> {
    hyper.validate()?;
    if train.is_empty() {
        return Err(ModelError::EmptySet("training"));
    }
    if val.is_empty() {
        return Err(ModelError::EmptySet("validation"));
    }
    let mut present = vec![false; model.spec.num_classes];
    for ex in train {
        if ex.label >= present.len() {
            return Err(ModelError::LabelOutOfRange { label: ex.label, num_classes: present.len() });
        }
        present[ex.label] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        log::warn!("training set covers fewer than two classes; proceeding");
    }

    let mut current = model.clone();
    let mut opt = AdamW::new(current.params.len());
    let mut history = Vec::with_capacity(hyper.max_epochs);
    let mut best: Option<(f64, ClassifierModel)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..hyper.max_epochs {
        let mut rng = rng_for(seed, "fit-shuffle", epoch as u64);
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            let (_, grad) = current.grad_indexed(train, batch)?;
            opt.step(&mut current.params, &grad, hyper);
        }
        let score = current.macro_f1(val)?;
        history.push(score);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, current.clone()));
        }
    }
    let best_epoch = best_epoch_index(&history).expect("max_epochs >= 1") + 1;
    let (_, model) = best.expect("at least one epoch");
    Ok(FitOutcome { model, val_history: history, best_epoch })
}
