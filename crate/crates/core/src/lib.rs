//! Benchmark engine for evolving domain adaptation of classifiers over
//! time-ordered data streams.
//!
//! A labeled source domain is followed by a sequence of unlabeled target
//! domains whose input and label distributions drift. The crate provides
//! the stream model and generators ([`stream`], [`datagen`]), small
//! classifiers with exact gradients ([`model`]), incremental self-training
//! with fixed and cumulative buffers ([`selftrain`]), domain-adversarial
//! training ([`dann`]), evaluation metrics ([`metrics`]) and kernel
//! discrepancy analysis ([`divergence`]).

pub mod buffer;
pub mod config;
pub mod dann;
pub mod datagen;
pub mod divergence;
pub mod export;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod selftrain;
pub mod stream;
pub mod trace;

pub use buffer::{Buffer, BufferError, Capacity, Labeled};
pub use config::{Method, ModelConfig, RunConfig};
pub use metrics::EvalReport;
pub use model::{ArchSpec, ClassifierModel, TrainHyper};
pub use stream::{mask_target_labels, Domain, DomainStream, Instance, MaskedStream};
pub use trace::MethodTrace;

use thiserror::Error;

/// Errors surfaced by method runs.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Stream(#[from] stream::StreamError),
    #[error(transparent)]
    Buffer(#[from] buffer::BufferError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Data(#[from] datagen::DataError),
    #[error(transparent)]
    Divergence(#[from] divergence::DivergenceError),
    #[error(transparent)]
    Export(#[from] export::ExportError),
    #[error("invalid run configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
