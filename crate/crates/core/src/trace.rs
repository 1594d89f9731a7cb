//! Per-step records of a method run.

use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::metrics::{EvalReport, MetricsError};
use crate::stream::DomainStream;

/// Per-epoch diagnostics of a domain-adversarial adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DannEpochStats {
    pub epoch: usize,
    /// Training accuracy of the discriminator over the epoch's batches.
    pub discriminator_acc: f64,
    pub l_cls: f64,
    pub l_adv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Size of the training set behind the model evaluated at this step,
    /// before upsampling.
    pub buffer_size: usize,
    /// Pseudo-labels assigned to domain `t`'s train then val instances.
    #[serde(default)]
    pub pseudo_labels: Vec<usize>,
    /// Agreement of `pseudo_labels` with the hidden gold labels. Filled in
    /// after the run by [`annotate_pseudo_accuracy`]; methods never set it.
    pub pseudo_acc: Option<f64>,
    /// Test macro-F1 on domain `t`.
    pub f_macro: f64,
    pub test_predictions: Vec<usize>,
    pub model_checksum: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dann_epochs: Vec<DannEpochStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTrace {
    pub method: Method,
    /// One record per `t` in `0..=T`; `t = 0` is source training.
    pub steps: Vec<StepRecord>,
}

impl MethodTrace {
    pub fn num_targets(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    /// Test macro-F1 for `t = 1..=T`.
    pub fn per_domain_f(&self) -> Vec<f64> {
        self.steps.iter().skip(1).map(|s| s.f_macro).collect()
    }

    pub fn report(&self) -> Result<EvalReport, MetricsError> {
        EvalReport::new(self.per_domain_f())
    }

    /// Test predictions for target domain `t`.
    pub fn predictions(&self, t: usize) -> &[usize] {
        &self.steps[t].test_predictions
    }
}

/// Scores recorded pseudo-labels against gold labels, using privileged
/// access to the full stream. Steps whose domain lacks gold labels on any
/// train/val instance are left as `None`.
pub fn annotate_pseudo_accuracy(trace: &mut MethodTrace, stream: &DomainStream) {
    for step in trace.steps.iter_mut().skip(1) {
        if step.pseudo_labels.is_empty() {
            continue;
        }
        let domain = &stream.domains[step.t];
        let golds: Option<Vec<usize>> = domain.train.iter().chain(&domain.val).map(|i| i.gold_label).collect();
        step.pseudo_acc = golds.filter(|g| g.len() == step.pseudo_labels.len()).map(|g| {
            let hits = g.iter().zip(&step.pseudo_labels).filter(|(a, b)| a == b).count();
            hits as f64 / g.len() as f64
        });
    }
}
