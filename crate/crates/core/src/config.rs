//! Per-method run configuration.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dann::DannSpec;
use crate::model::{Activation, ArchKind, ArchSpec, TrainHyper};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    SrcOnly,
    Supervised,
    #[serde(rename = "OBS")]
    Obs,
    #[serde(rename = "OCS")]
    Ocs,
    #[serde(rename = "OS")]
    Os,
    #[serde(rename = "DANN")]
    Dann,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::SrcOnly => "SrcOnly",
            Method::Supervised => "Supervised",
            Method::Obs => "OBS",
            Method::Ocs => "OCS",
            Method::Os => "OS",
            Method::Dann => "DANN",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture without the stream-dependent input and output sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelConfig {
    Linear,
    Mlp {
        hidden_dims: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
    },
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Mlp { hidden_dims: vec![16], activation: Activation::Relu }
    }
}

impl ModelConfig {
    pub fn resolve(&self, input_dim: usize, num_classes: usize) -> ArchSpec {
        let kind = match self {
            ModelConfig::Linear => ArchKind::Linear,
            ModelConfig::Mlp { hidden_dims, activation } => {
                ArchKind::Mlp { hidden_dims: hidden_dims.clone(), activation: *activation }
            }
        };
        ArchSpec { kind, input_dim, num_classes }
    }
}

/// Which validation set guides epoch selection during a self-training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValSource {
    /// The (pseudo-labeled) validation split of the previous domain.
    #[default]
    Latest,
    /// A seeded sample of the buffer, sized like the previous domain's
    /// validation split.
    BufferSample,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    /// Label used in reports; defaults to the method name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainHyper,
    #[serde(default = "yes")]
    pub upsample: bool,
    #[serde(default)]
    pub val_source: ValSource,
    /// Pseudo-labels whose top softmax probability falls below this value
    /// are not inserted into the buffer. Off by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence_threshold: Option<f64>,
    /// Continue each step from the previous model instead of a fresh init.
    #[serde(default = "yes")]
    pub warm_start: bool,
    /// Fixed buffer size for OBS; defaults to the source training size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer_capacity: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dann: Option<DannSpec>,
}

impl RunConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        RunConfig {
            method,
            name: None,
            seed,
            model: ModelConfig::default(),
            train: TrainHyper::default(),
            upsample: true,
            val_source: ValSource::Latest,
            confidence_threshold: None,
            warm_start: true,
            buffer_capacity: None,
            dann: None,
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.method.to_string())
    }

    pub fn with_model(mut self, model: ModelConfig) -> Self {
        self.model = model;
        self
    }

    pub fn with_train(mut self, train: TrainHyper) -> Self {
        self.train = train;
        self
    }

    pub fn dann_spec(&self) -> DannSpec {
        self.dann.clone().unwrap_or_default()
    }
}
