//! Data model shared by every module: instances, domains, streams and the
//! label-masked view handed to adaptation methods.
//!
//! A [`DomainStream`] holds gold labels everywhere they are known. Methods
//! other than the supervised baseline never see it; they receive a
//! [`MaskedStream`], in which target-domain instances are [`Unlabeled`] and
//! the target test labels live inside an [`Evaluator`] that only hands back
//! scores.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics;

#[derive(Debug, Error, PartialEq)]
pub enum StreamError {
    #[error("stream needs at least one target domain")]
    NoTargets,
    #[error("domain {0} has index {1}")]
    IndexMismatch(usize, usize),
    #[error("domain {domain} has an empty {split} split")]
    EmptySplit { domain: usize, split: &'static str },
    #[error("instance {id} has dimension {got}, stream dimension is {expected}")]
    Dimension { id: String, expected: usize, got: usize },
    #[error("instance {id} carries label {label} outside [0, {num_classes})")]
    LabelOutOfRange { id: String, label: usize, num_classes: usize },
    #[error("arrival order {0} appears twice")]
    DuplicateArrival(u64),
    #[error("domain {0} is not strictly after domain {1} in arrival order")]
    Chronology(usize, usize),
    #[error("source instance {0} has no gold label")]
    UnlabeledSource(String),
    #[error("test instance {id} of domain {domain} has no gold label")]
    UnlabeledTest { domain: usize, id: String },
    #[error("{0} class names for {1} classes")]
    ClassNames(usize, usize),
    #[error("unknown target domain {0}")]
    UnknownDomain(usize),
    #[error("{got} predictions for {expected} test instances")]
    PredictionCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub features: Vec<f64>,
    pub gold_label: Option<usize>,
    pub pseudo_label: Option<usize>,
    pub arrival_order: u64,
}

impl Instance {
    pub fn labeled(id: impl Into<String>, features: Vec<f64>, label: usize, arrival_order: u64) -> Self {
        Instance {
            id: id.into(),
            features,
            gold_label: Some(label),
            pseudo_label: None,
            arrival_order,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub index: usize,
    pub name: String,
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl Domain {
    pub fn split(&self, split: Split) -> &[Instance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Train, val and test instances in that order.
    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn arrival_range(&self) -> Option<(u64, u64)> {
        let mut it = self.instances().map(|i| i.arrival_order);
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), a| (lo.min(a), hi.max(a))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStream {
    pub domains: Vec<Domain>,
    pub num_classes: usize,
    pub dim: usize,
    pub class_names: Vec<String>,
}

impl DomainStream {
    /// Number of target domains `T`.
    pub fn num_targets(&self) -> usize {
        self.domains.len().saturating_sub(1)
    }

    pub fn source(&self) -> &Domain {
        &self.domains[0]
    }

    /// Structural checks that hold for every stream, labeled or not.
    pub fn validate_structure(&self) -> Result<(), StreamError> {
        if self.domains.len() < 2 {
            return Err(StreamError::NoTargets);
        }
        if self.class_names.len() != self.num_classes {
            return Err(StreamError::ClassNames(self.class_names.len(), self.num_classes));
        }
        let mut seen = HashSet::new();
        let mut prev: Option<(u64, u64)> = None;
        for (t, domain) in self.domains.iter().enumerate() {
            if domain.index != t {
                return Err(StreamError::IndexMismatch(t, domain.index));
            }
            for split in [Split::Train, Split::Val, Split::Test] {
                if domain.split(split).is_empty() {
                    return Err(StreamError::EmptySplit { domain: t, split: split.as_str() });
                }
            }
            for inst in domain.instances() {
                if inst.features.len() != self.dim {
                    return Err(StreamError::Dimension {
                        id: inst.id.clone(),
                        expected: self.dim,
                        got: inst.features.len(),
                    });
                }
                for label in inst.gold_label.iter().chain(&inst.pseudo_label) {
                    if *label >= self.num_classes {
                        return Err(StreamError::LabelOutOfRange {
                            id: inst.id.clone(),
                            label: *label,
                            num_classes: self.num_classes,
                        });
                    }
                }
                if !seen.insert(inst.arrival_order) {
                    return Err(StreamError::DuplicateArrival(inst.arrival_order));
                }
            }
            let range = domain.arrival_range();
            if let (Some((_, prev_hi)), Some((lo, _))) = (prev, range) {
                if lo <= prev_hi {
                    return Err(StreamError::Chronology(t, t - 1));
                }
            }
            prev = range;
        }
        Ok(())
    }

    /// Full validation for training: structure plus a labeled source and
    /// labeled target test sets.
    pub fn validate(&self) -> Result<(), StreamError> {
        self.validate_structure()?;
        if let Some(inst) = self.source().instances().find(|i| i.gold_label.is_none()) {
            return Err(StreamError::UnlabeledSource(inst.id.clone()));
        }
        for domain in &self.domains[1..] {
            if let Some(inst) = domain.test.iter().find(|i| i.gold_label.is_none()) {
                return Err(StreamError::UnlabeledTest { domain: domain.index, id: inst.id.clone() });
            }
        }
        Ok(())
    }

    /// True when every instance of every split carries a gold label.
    pub fn fully_labeled(&self) -> bool {
        self.domains.iter().flat_map(Domain::instances).all(|i| i.gold_label.is_some())
    }

    /// Gold labels of domain `t`'s test split, for offline evaluation.
    pub fn test_golds(&self, t: usize) -> Vec<usize> {
        self.domains[t].test.iter().map(|i| i.gold_label.expect("validated test label")).collect()
    }
}

/// A target-domain instance with no label of any kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Unlabeled {
    pub id: String,
    pub features: Vec<f64>,
    pub arrival_order: u64,
}

impl From<&Instance> for Unlabeled {
    fn from(inst: &Instance) -> Self {
        Unlabeled {
            id: inst.id.clone(),
            features: inst.features.clone(),
            arrival_order: inst.arrival_order,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetDomain {
    pub index: usize,
    pub name: String,
    pub train: Vec<Unlabeled>,
    pub val: Vec<Unlabeled>,
    pub test: Vec<Unlabeled>,
}

impl TargetDomain {
    /// Train then val instances, the set that gets pseudo-labeled.
    pub fn adaptation_set(&self) -> impl Iterator<Item = &Unlabeled> {
        self.train.iter().chain(&self.val)
    }
}

/// Scores test predictions against labels it never exposes.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluator {
    golds: Vec<Vec<usize>>,
    num_classes: usize,
}

impl Evaluator {
    /// Macro-F1 of `preds` on the test split of target domain `t` (1-based).
    pub fn macro_f1(&self, t: usize, preds: &[usize]) -> Result<f64, StreamError> {
        let golds = t
            .checked_sub(1)
            .and_then(|i| self.golds.get(i))
            .ok_or(StreamError::UnknownDomain(t))?;
        if golds.len() != preds.len() {
            return Err(StreamError::PredictionCount { expected: golds.len(), got: preds.len() });
        }
        Ok(metrics::macro_f1(preds, golds, self.num_classes).expect("lengths checked"))
    }
}

/// The stream as adaptation methods see it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedStream {
    source: Domain,
    targets: Vec<TargetDomain>,
    evaluator: Evaluator,
    num_classes: usize,
    dim: usize,
}

impl MaskedStream {
    pub fn source(&self) -> &Domain {
        &self.source
    }

    pub fn targets(&self) -> &[TargetDomain] {
        &self.targets
    }

    /// Target domain `t` in `1..=T`.
    pub fn target(&self, t: usize) -> &TargetDomain {
        &self.targets[t - 1]
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn evaluator(&self) -> &Evaluator {
        &self.evaluator
    }
}

/// Hides every target-domain gold label behind the method boundary.
///
/// The source domain passes through untouched. Target train, val and test
/// instances lose their labels; test labels are kept only inside the
/// returned stream's [`Evaluator`]. Pseudo-labels are dropped too, so a
/// method starts from a clean slate.
pub fn mask_target_labels(stream: &DomainStream) -> MaskedStream {
    let strip = |xs: &[Instance]| xs.iter().map(Unlabeled::from).collect::<Vec<_>>();
    let targets = stream.domains[1..]
        .iter()
        .map(|d| TargetDomain {
            index: d.index,
            name: d.name.clone(),
            train: strip(&d.train),
            val: strip(&d.val),
            test: strip(&d.test),
        })
        .collect();
    let golds = stream.domains[1..]
        .iter()
        .map(|d| d.test.iter().map(|i| i.gold_label.unwrap_or(usize::MAX)).collect())
        .collect();
    MaskedStream {
        source: stream.domains[0].clone(),
        targets,
        evaluator: Evaluator { golds, num_classes: stream.num_classes },
        num_classes: stream.num_classes,
        dim: stream.dim,
    }
}
