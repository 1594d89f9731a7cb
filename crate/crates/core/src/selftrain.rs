//! Source-only training, the supervised ceiling and the self-training
//! family: fixed-size buffer (OBS), cumulative buffer (OCS) and one-shot
//! self-training (OS).

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::buffer::{Buffer, Capacity, Labeled};
use crate::config::{Method, RunConfig, ValSource};
use crate::model::{argmax, fit, softmax, ArchSpec, ClassifierModel, ModelError};
use crate::seed::{derive_seed, rng_for};
use crate::stream::{DomainStream, Instance, MaskedStream, StreamError, Unlabeled};
use crate::trace::{annotate_pseudo_accuracy, MethodTrace, StepRecord};
use crate::{Error, Result};

/// A pseudo-labeled instance and the model's confidence in its label.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeled {
    pub item: Labeled,
    /// Largest softmax probability.
    pub confidence: f64,
}

/// Labels each instance with the model's argmax prediction.
pub fn pseudo_label<'a, I>(model: &ClassifierModel, xs: I) -> Result<Vec<PseudoLabeled>>
where
    I: IntoIterator<Item = &'a Unlabeled>,
{
    xs.into_iter()
        .map(|x| {
            let logits = model.forward(&x.features)?;
            let label = argmax(&logits);
            let confidence = softmax(&logits)[label];
            Ok(PseudoLabeled {
                item: Labeled { features: x.features.clone(), label, arrival_order: x.arrival_order },
                confidence,
            })
        })
        .collect()
}

/// Balances classes by appending copies drawn with replacement from every
/// minority class until each present class matches the largest one. The
/// original items come first and unchanged.
pub fn upsample(data: &[Labeled], num_classes: usize, seed: u64, index: u64) -> Result<Vec<Labeled>> {
    if data.is_empty() {
        return Err(ModelError::EmptySet("upsampling input").into());
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, d) in data.iter().enumerate() {
        if d.label < num_classes {
            by_class[d.label].push(i);
        }
    }
    let target = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut rng = rng_for(seed, "upsample", index);
    let mut out = data.to_vec();
    for members in by_class.iter().filter(|m| !m.is_empty()) {
        for _ in members.len()..target {
            out.push(data[members[rng.gen_range(0..members.len())]].clone());
        }
    }
    Ok(out)
}

pub(crate) fn labeled(instances: &[Instance]) -> Result<Vec<Labeled>> {
    instances
        .iter()
        .map(|i| {
            let label = i.gold_label.ok_or_else(|| StreamError::UnlabeledSource(i.id.clone()))?;
            Ok(Labeled { features: i.features.clone(), label, arrival_order: i.arrival_order })
        })
        .collect()
}

pub(crate) fn training_set(data: &[Labeled], cfg: &RunConfig, num_classes: usize, index: u64) -> Result<Vec<Labeled>> {
    if cfg.upsample {
        upsample(data, num_classes, cfg.seed, index)
    } else {
        Ok(data.to_vec())
    }
}

pub(crate) fn arch(cfg: &RunConfig, dim: usize, num_classes: usize) -> ArchSpec {
    cfg.model.resolve(dim, num_classes)
}

/// Starting point of the fit at step `t`: the previous model under warm
/// start, a fresh initialisation otherwise.
fn start_model(cfg: &RunConfig, spec: &ArchSpec, previous: &ClassifierModel, t: usize) -> Result<ClassifierModel> {
    if cfg.warm_start {
        Ok(previous.clone())
    } else {
        Ok(ClassifierModel::init(spec.clone(), derive_seed(cfg.seed, "step-init", t as u64))?)
    }
}

/// Trains `f_0` on the labeled source domain and records step 0.
pub(crate) fn train_source(masked: &MaskedStream, cfg: &RunConfig) -> Result<(ClassifierModel, StepRecord)> {
    let spec = arch(cfg, masked.dim(), masked.num_classes());
    let src = masked.source();
    let train = labeled(&src.train)?;
    let val = labeled(&src.val)?;
    let test = labeled(&src.test)?;
    let init = ClassifierModel::init(spec, derive_seed(cfg.seed, "step-init", 0))?;
    let fitted = fit(
        &init,
        &training_set(&train, cfg, masked.num_classes(), 0)?,
        &val,
        &cfg.train,
        derive_seed(cfg.seed, "fit", 0),
    )?;
    let model = fitted.model;
    let preds = model.predict_all(test.iter().map(|e| e.features.as_slice()))?;
    let golds: Vec<usize> = test.iter().map(|e| e.label).collect();
    let f_macro = crate::metrics::macro_f1(&preds, &golds, masked.num_classes())?;
    let record = StepRecord {
        t: 0,
        buffer_size: train.len(),
        pseudo_labels: Vec::new(),
        pseudo_acc: None,
        f_macro,
        test_predictions: preds,
        model_checksum: model.checksum(),
        dann_epochs: Vec::new(),
    };
    Ok((model, record))
}

pub(crate) fn evaluate_target(
    masked: &MaskedStream,
    model: &ClassifierModel,
    t: usize,
) -> Result<(f64, Vec<usize>)> {
    let test = &masked.target(t).test;
    let preds = model.predict_all(test.iter().map(|u| u.features.as_slice()))?;
    let f = masked.evaluator().macro_f1(t, &preds)?;
    Ok((f, preds))
}

/// `f_0` applied unchanged to every target domain.
pub fn run_src_only(masked: &MaskedStream, cfg: &RunConfig) -> Result<MethodTrace> {
    let (f0, step0) = train_source(masked, cfg)?;
    let mut steps = vec![step0];
    for t in 1..=masked.num_targets() {
        let (f_macro, test_predictions) = evaluate_target(masked, &f0, t)?;
        steps.push(StepRecord {
            t,
            buffer_size: steps[0].buffer_size,
            pseudo_labels: Vec::new(),
            pseudo_acc: None,
            f_macro,
            test_predictions,
            model_checksum: f0.checksum(),
            dann_epochs: Vec::new(),
        });
    }
    Ok(MethodTrace { method: Method::SrcOnly, steps })
}

/// Ceiling: one model fitted on the gold-labeled train splits of every
/// domain, selected on the union of their validation splits, and evaluated
/// on each target. This is the one method that reads target labels, so it
/// takes the unmasked stream.
pub fn run_supervised(stream: &DomainStream, cfg: &RunConfig) -> Result<MethodTrace> {
    stream.validate()?;
    if !stream.fully_labeled() {
        return Err(Error::Config("the supervised ceiling needs gold labels on every target domain".into()));
    }
    let masked = crate::stream::mask_target_labels(stream);
    let (_, step0) = train_source(&masked, cfg)?;
    let spec = arch(cfg, stream.dim, stream.num_classes);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for domain in &stream.domains {
        train.extend(labeled(&domain.train)?);
        val.extend(labeled(&domain.val)?);
    }
    let t_final = stream.num_targets() + 1;
    let init = ClassifierModel::init(spec, derive_seed(cfg.seed, "step-init", 0))?;
    let model = fit(
        &init,
        &training_set(&train, cfg, stream.num_classes, t_final as u64)?,
        &val,
        &cfg.train,
        derive_seed(cfg.seed, "fit", t_final as u64),
    )?
    .model;
    let mut steps = vec![step0];
    for t in 1..=stream.num_targets() {
        let (f_macro, test_predictions) = evaluate_target(&masked, &model, t)?;
        steps.push(StepRecord {
            t,
            buffer_size: train.len(),
            pseudo_labels: Vec::new(),
            pseudo_acc: None,
            f_macro,
            test_predictions,
            model_checksum: model.checksum(),
            dann_epochs: Vec::new(),
        });
    }
    Ok(MethodTrace { method: Method::Supervised, steps })
}

fn buffered_self_training(masked: &MaskedStream, cfg: &RunConfig, method: Method, capacity: Capacity) -> Result<MethodTrace> {
    let (f0, step0) = train_source(masked, cfg)?;
    let spec = arch(cfg, masked.dim(), masked.num_classes());
    let k = masked.num_classes();
    let mut buffer = Buffer::new(capacity)?;
    buffer.insert(labeled(&masked.source().train)?)?;

    let mut steps = vec![step0];
    let mut model = f0;
    let mut prev_val: Vec<Labeled> = Vec::new();
    for t in 1..=masked.num_targets() {
        let buffer_size = buffer.len();
        if t > 1 {
            let contents = buffer.to_vec();
            let val = match cfg.val_source {
                ValSource::Latest => prev_val.clone(),
                ValSource::BufferSample => {
                    let mut rng = rng_for(cfg.seed, "val-sample", t as u64);
                    contents.choose_multiple(&mut rng, prev_val.len().max(1)).cloned().collect()
                }
            };
            let start = start_model(cfg, &spec, &model, t)?;
            model = fit(
                &start,
                &training_set(&contents, cfg, k, t as u64)?,
                &val,
                &cfg.train,
                derive_seed(cfg.seed, "fit", t as u64),
            )?
            .model;
        }
        let target = masked.target(t);
        let labeled_set = pseudo_label(&model, target.adaptation_set())?;
        let (f_macro, test_predictions) = evaluate_target(masked, &model, t)?;
        let pseudo_labels: Vec<usize> = labeled_set.iter().map(|p| p.item.label).collect();
        prev_val = labeled_set[target.train.len()..].iter().map(|p| p.item.clone()).collect();

        let mut accepted: Vec<Labeled> = labeled_set
            .into_iter()
            .filter(|p| cfg.confidence_threshold.is_none_or(|c| p.confidence >= c))
            .map(|p| p.item)
            .collect();
        accepted.sort_by_key(|l| l.arrival_order);
        buffer.insert(accepted)?;

        steps.push(StepRecord {
            t,
            buffer_size,
            pseudo_labels,
            pseudo_acc: None,
            f_macro,
            test_predictions,
            model_checksum: model.checksum(),
            dann_epochs: Vec::new(),
        });
    }
    Ok(MethodTrace { method, steps })
}

/// Self-training over a FIFO buffer holding at most the source training
/// size (or `buffer_capacity`).
pub fn run_obs(masked: &MaskedStream, cfg: &RunConfig) -> Result<MethodTrace> {
    let b = cfg.buffer_capacity.unwrap_or(masked.source().train.len());
    buffered_self_training(masked, cfg, Method::Obs, Capacity::Fixed(b))
}

/// Self-training over a buffer that keeps everything.
pub fn run_ocs(masked: &MaskedStream, cfg: &RunConfig) -> Result<MethodTrace> {
    buffered_self_training(masked, cfg, Method::Ocs, Capacity::Unbounded)
}

/// `f_0` pseudo-labels all targets in one pass, then a single model is
/// retrained on source plus every pseudo-labeled target and evaluated on
/// all targets. Model selection uses the source validation split together
/// with every pseudo-labeled target validation split.
pub fn run_os(masked: &MaskedStream, cfg: &RunConfig) -> Result<MethodTrace> {
    let (f0, step0) = train_source(masked, cfg)?;
    let spec = arch(cfg, masked.dim(), masked.num_classes());
    let mut train = labeled(&masked.source().train)?;
    let mut val = labeled(&masked.source().val)?;
    let mut per_domain_labels = Vec::with_capacity(masked.num_targets());
    for target in masked.targets() {
        let set = pseudo_label(&f0, target.adaptation_set())?;
        per_domain_labels.push(set.iter().map(|p| p.item.label).collect::<Vec<_>>());
        let n_train = target.train.len();
        for (i, p) in set.into_iter().enumerate() {
            if i >= n_train {
                val.push(p.item.clone());
            }
            if cfg.confidence_threshold.is_none_or(|c| p.confidence >= c) {
                train.push(p.item);
            }
        }
    }
    let t_final = masked.num_targets() + 1;
    let start = start_model(cfg, &spec, &f0, t_final)?;
    let model = fit(
        &start,
        &training_set(&train, cfg, masked.num_classes(), t_final as u64)?,
        &val,
        &cfg.train,
        derive_seed(cfg.seed, "fit", t_final as u64),
    )?
    .model;
    let mut steps = vec![step0];
    for (t, pseudo_labels) in (1..=masked.num_targets()).zip(per_domain_labels) {
        let (f_macro, test_predictions) = evaluate_target(masked, &model, t)?;
        steps.push(StepRecord {
            t,
            buffer_size: train.len(),
            pseudo_labels,
            pseudo_acc: None,
            f_macro,
            test_predictions,
            model_checksum: model.checksum(),
            dann_epochs: Vec::new(),
        });
    }
    Ok(MethodTrace { method: Method::Os, steps })
}

/// Runs one configured method on a stream. Target labels are masked
/// before any adaptation method sees the data; pseudo-label accuracy is
/// scored afterwards from the full stream.
pub fn run_method(stream: &DomainStream, cfg: &RunConfig) -> Result<MethodTrace> {
    stream.validate()?;
    cfg.train.validate()?;
    if let Some(c) = cfg.confidence_threshold {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Config(format!("confidence_threshold {c} is outside [0, 1]")));
        }
    }
    if cfg.buffer_capacity == Some(0) {
        return Err(crate::buffer::BufferError::ZeroCapacity.into());
    }
    if cfg.method == Method::Supervised {
        return run_supervised(stream, cfg);
    }
    let masked = crate::stream::mask_target_labels(stream);
    let mut trace = match cfg.method {
        Method::SrcOnly => run_src_only(&masked, cfg)?,
        Method::Obs => run_obs(&masked, cfg)?,
        Method::Ocs => run_ocs(&masked, cfg)?,
        Method::Os => run_os(&masked, cfg)?,
        Method::Dann => crate::dann::run_dann(&masked, cfg)?,
        Method::Supervised => unreachable!("handled above"),
    };
    annotate_pseudo_accuracy(&mut trace, stream);
    Ok(trace)
}
