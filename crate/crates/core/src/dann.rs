//! Domain-adversarial adaptation with a gradient reversal layer.
//!
//! The classifier's hidden layers act as the feature extractor and its
//! final layer as the label head. A separate discriminator tries to tell
//! source embeddings (label 0) from target embeddings (label 1); the
//! extractor receives the reversed discriminator gradient.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffer::Labeled;
use crate::config::{Method, RunConfig};
use crate::model::{cross_entropy, Activation, ArchKind, ClassifierModel, ForwardCache, Network};
use crate::selftrain::{evaluate_target, labeled, train_source, training_set};
use crate::seed::{derive_seed, rng_for};
use crate::stream::MaskedStream;
use crate::trace::{DannEpochStats, MethodTrace, StepRecord};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DannSpec {
    /// Hidden widths of the discriminator.
    pub discriminator_dims: Vec<usize>,
    /// Weight of the adversarial term; also the reversal coefficient.
    pub w_adv: f64,
    pub lr_label: f64,
    pub lr_domain: f64,
    pub lr_extractor: f64,
    /// Learning rates decay as `lr * (1 + gamma * i)^-tau` over iterations `i`.
    pub gamma: f64,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for DannSpec {
    fn default() -> Self {
        DannSpec {
            discriminator_dims: vec![32],
            w_adv: 1.0,
            lr_label: 1e-3,
            lr_domain: 1e-3,
            lr_extractor: 1e-4,
            gamma: 0.001,
            tau: 0.75,
            epochs: 20,
            batch_size: 32,
        }
    }
}

impl DannSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("dann: {m}")));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        for (name, lr) in [("lr_label", self.lr_label), ("lr_domain", self.lr_domain), ("lr_extractor", self.lr_extractor)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(&format!("{name} must be a positive number"));
            }
        }
        if !(self.gamma >= 0.0 && self.tau >= 0.0 && self.w_adv >= 0.0 && self.w_adv.is_finite()) {
            return bad("gamma, tau and w_adv must be non-negative");
        }
        if self.discriminator_dims.contains(&0) {
            return bad("discriminator widths must be positive");
        }
        Ok(())
    }

    /// Learning-rate multiplier at iteration `i`.
    pub fn decay(&self, iteration: usize) -> f64 {
        (1.0 + self.gamma * iteration as f64).powf(-self.tau)
    }

    pub fn discriminator(&self, feature_dim: usize) -> Network {
        let mut dims = vec![feature_dim];
        dims.extend(&self.discriminator_dims);
        dims.push(1);
        Network::new(dims, Activation::Relu)
    }
}

/// Backward rule of the gradient reversal layer: the forward pass is the
/// identity, the backward pass multiplies by `-lambda`.
pub fn grl_backward(grad: &[f64], lambda: f64) -> Vec<f64> {
    grad.iter().map(|g| -lambda * g).collect()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit, and its derivative.
fn bce_with_logits(z: f64, y: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    (loss, sigmoid(z) - y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DannGradients {
    /// Gradient for the whole classifier: exact `dL_cls` on the head, and
    /// `dL_cls - lambda * dL_adv` on the extractor.
    pub classifier: Vec<f64>,
    /// `dL_adv` for the discriminator.
    pub discriminator: Vec<f64>,
    pub l_cls: f64,
    pub l_adv: f64,
    /// Discriminator hits over the `2B` samples.
    pub disc_correct: usize,
}

/// Losses and gradients on one balanced batch. `L_cls` is the mean
/// cross-entropy over the source batch; `L_adv` is the mean binary
/// cross-entropy of the discriminator over source and target together.
pub fn dann_gradients(
    net: &Network,
    params: &[f64],
    disc: &Network,
    disc_params: &[f64],
    source: &[&Labeled],
    target: &[&[f64]],
    lambda: f64,
) -> DannGradients {
    let mut g_cls = vec![0.0; params.len()];
    let mut g_adv = vec![0.0; params.len()];
    let mut g_disc = vec![0.0; disc_params.len()];
    let (mut l_cls, mut l_adv, mut disc_correct) = (0.0, 0.0, 0);
    let mut adversarial = |cache: &ForwardCache, y: f64, g_adv: &mut [f64], g_disc: &mut [f64]| {
        let dc = disc.forward_cached(disc_params, cache.embedding());
        let z = dc.output[0];
        let (loss, dz) = bce_with_logits(z, y);
        l_adv += loss;
        disc_correct += usize::from((z > 0.0) == (y > 0.5));
        let d_embedding = disc.backward(disc_params, &dc, Some(&[dz]), None, g_disc);
        if lambda != 0.0 {
            net.backward(params, cache, None, Some(&d_embedding), g_adv);
        }
    };
    for ex in source {
        let cache = net.forward_cached(params, &ex.features);
        let (loss, d) = cross_entropy(&cache.output, ex.label);
        l_cls += loss;
        net.backward(params, &cache, Some(&d), None, &mut g_cls);
        adversarial(&cache, 0.0, &mut g_adv, &mut g_disc);
    }
    for x in target {
        let cache = net.forward_cached(params, x);
        adversarial(&cache, 1.0, &mut g_adv, &mut g_disc);
    }
    let n_src = source.len() as f64;
    let n_all = (source.len() + target.len()) as f64;
    g_cls.iter_mut().for_each(|g| *g /= n_src);
    g_disc.iter_mut().for_each(|g| *g /= n_all);
    if lambda != 0.0 {
        g_adv.iter_mut().for_each(|g| *g /= n_all);
        for (c, r) in g_cls.iter_mut().zip(grl_backward(&g_adv, lambda)) {
            *c += r;
        }
    }
    DannGradients { classifier: g_cls, discriminator: g_disc, l_cls: l_cls / n_src, l_adv: l_adv / n_all, disc_correct }
}

/// Index of the first classifier parameter belonging to the label head.
fn head_offset(net: &Network, num_classes: usize, feature_dim: usize) -> usize {
    net.param_count() - (feature_dim * num_classes + num_classes)
}

/// Batches of one epoch: the longer side is chunked in shuffled order and
/// the shorter side is cycled so every batch pairs equally many source and
/// target indices.
pub fn epoch_batches(n_source: usize, n_target: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut src: Vec<usize> = (0..n_source).collect();
    let mut tgt: Vec<usize> = (0..n_target).collect();
    src.shuffle(&mut rng_for(seed, "dann-source-order", epoch as u64));
    tgt.shuffle(&mut rng_for(seed, "dann-target-order", epoch as u64));
    let longest = n_source.max(n_target);
    (0..longest.div_ceil(batch_size))
        .map(|k| {
            let range = k * batch_size..((k + 1) * batch_size).min(longest);
            (range.clone().map(|i| src[i % n_source]).collect(), range.map(|i| tgt[i % n_target]).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DannOutcome {
    pub model: ClassifierModel,
    pub discriminator: Vec<f64>,
    pub epochs: Vec<DannEpochStats>,
}

/// Adversarial training of `start` on labeled `source` and unlabeled
/// `target` features with plain SGD.
pub fn train_dann(
    start: &ClassifierModel,
    source: &[Labeled],
    target: &[&[f64]],
    spec: &DannSpec,
    seed: u64,
) -> Result<DannOutcome> {
    spec.validate()?;
    if !matches!(start.spec.kind, ArchKind::Mlp { .. }) {
        return Err(Error::Config("DANN needs an mlp model so there is a feature extractor to adapt".into()));
    }
    if source.is_empty() || target.is_empty() {
        return Err(crate::model::ModelError::EmptySet("adversarial training").into());
    }
    let net = start.network();
    let feature_dim = start.spec.feature_dim();
    let head = head_offset(&net, start.spec.num_classes, feature_dim);
    let disc = spec.discriminator(feature_dim);
    let mut disc_params = disc.init(seed, "dann-discriminator");
    let mut model = start.clone();
    let mut iteration = 0usize;
    let mut epochs = Vec::with_capacity(spec.epochs);
    for epoch in 0..spec.epochs {
        let (mut l_cls, mut l_adv, mut correct, mut seen, mut batches) = (0.0, 0.0, 0usize, 0usize, 0usize);
        for (si, ti) in epoch_batches(source.len(), target.len(), spec.batch_size, seed, epoch) {
            let src: Vec<&Labeled> = si.iter().map(|&i| &source[i]).collect();
            let tgt: Vec<&[f64]> = ti.iter().map(|&i| target[i]).collect();
            let g = dann_gradients(&net, &model.params, &disc, &disc_params, &src, &tgt, spec.w_adv);
            let decay = spec.decay(iteration);
            for (i, (p, grad)) in model.params.iter_mut().zip(&g.classifier).enumerate() {
                let lr = if i < head { spec.lr_extractor } else { spec.lr_label };
                *p -= lr * decay * grad;
            }
            for (p, grad) in disc_params.iter_mut().zip(&g.discriminator) {
                *p -= spec.lr_domain * decay * grad;
            }
            l_cls += g.l_cls;
            l_adv += g.l_adv;
            correct += g.disc_correct;
            seen += src.len() + tgt.len();
            batches += 1;
            iteration += 1;
        }
        epochs.push(DannEpochStats {
            epoch: epoch + 1,
            discriminator_acc: correct as f64 / seen as f64,
            l_cls: l_cls / batches as f64,
            l_adv: l_adv / batches as f64,
        });
    }
    Ok(DannOutcome { model, discriminator: disc_params, epochs })
}

/// Adapts `f_0` to each target domain independently, with a fresh
/// discriminator per domain. Domains run in parallel.
pub fn run_dann(masked: &MaskedStream, cfg: &RunConfig) -> Result<MethodTrace> {
    let spec = cfg.dann_spec();
    spec.validate()?;
    if !matches!(cfg.model, crate::config::ModelConfig::Mlp { .. }) {
        return Err(Error::Config("DANN needs an mlp model so there is a feature extractor to adapt".into()));
    }
    let (f0, step0) = train_source(masked, cfg)?;
    let source_train = labeled(&masked.source().train)?;
    let source = training_set(&source_train, cfg, masked.num_classes(), 0)?;
    let rest: Vec<StepRecord> = (1..=masked.num_targets())
        .into_par_iter()
        .map(|t| {
            let target: Vec<&[f64]> = masked.target(t).adaptation_set().map(|u| u.features.as_slice()).collect();
            let out = train_dann(&f0, &source, &target, &spec, derive_seed(cfg.seed, "dann", t as u64))?;
            let (f_macro, test_predictions) = evaluate_target(masked, &out.model, t)?;
            Ok(StepRecord {
                t,
                buffer_size: source_train.len(),
                pseudo_labels: Vec::new(),
                pseudo_acc: None,
                f_macro,
                test_predictions,
                model_checksum: out.model.checksum(),
                dann_epochs: out.epochs,
            })
        })
        .collect::<Result<_>>()?;
    let mut steps = vec![step0];
    steps.extend(rest);
    Ok(MethodTrace { method: Method::Dann, steps })
}
