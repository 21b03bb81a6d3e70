//! Error types shared across the engine.

use thiserror::Error;

/// Errors from tensor operations and the autodiff tape.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {detail}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced (NaN/Inf is a hard error)")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar output, got shape {shape:?}; reduce first (sum/mean)")]
    NotScalar { shape: Vec<usize> },
}

/// Errors from graph construction, validation and inverse derivation.
#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown variable '{0}'")]
    UnknownVariable(String),
    #[error("duplicate variable '{0}'")]
    DuplicateVariable(String),
    #[error("variable '{0}' has more than one factor")]
    DuplicateFactor(String),
    #[error("variable '{0}' has no factor")]
    MissingFactor(String),
    #[error("cycle detected: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("missing observed variable '{0}' in minibatch")]
    MissingObservation(String),
    #[error("datum masks out every variable; at least one must stay observed")]
    AllMasked,
    #[error("{0}")]
    Invalid(String),
}

/// Errors from densities and samplers.
#[derive(Debug, Error)]
pub enum DensityError {
    #[error("value outside the support of {family}: {detail}")]
    OutOfSupport { family: &'static str, detail: String },
    #[error("implicit samplers have no evaluable density; use an adversarial objective")]
    ImplicitDensity,
    #[error("configuration requires differentiating through a discrete sample of '{0}'; use a continuous (Gaussian/implicit) latent or an enumeration-based objective")]
    DiscreteSampleGradient(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Errors from training, objectives and checkpointing.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} in factor '{factor}': {source}")]
    NanAbort {
        step: u64,
        factor: String,
        source: TensorError,
    },
    #[error("objective '{variant}' incompatible with model: {detail}")]
    VariantMismatch { variant: String, detail: String },
    #[error("no adversary registered for factor '{0}'")]
    MissingAdversary(String),
    #[error("empty sample set passed to {0}")]
    EmptyBatch(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Config(String),
}
