use std::fmt;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("numerical divergence{}: state {state:?}", StepCtx(*.step))]
    Divergence { step: Option<usize>, state: Vec<f64> },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("insufficient recurrence data: accepted {accepted} samples, need {required} (raise epsilon or the orbit length)")]
    InsufficientData { accepted: usize, required: usize },

    #[error("insufficient samples in replay buffer: have {available}, requested {requested}")]
    InsufficientSamples { available: usize, requested: usize },

    #[error("cluster index {index} out of range ({count} clusters)")]
    ClusterOutOfRange { index: usize, count: usize },

    #[error("root finder did not converge: {0}")]
    RootFinding(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("episode {episode}: {source}")]
    Episode {
        episode: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-parsable category used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Divergence { .. } => "divergence",
            Error::DimensionMismatch { .. } => "dimension",
            Error::InsufficientData { .. } => "insufficient-data",
            Error::InsufficientSamples { .. } => "insufficient-samples",
            Error::ClusterOutOfRange { .. } => "cluster-range",
            Error::RootFinding(_) => "root-finding",
            Error::NonFinite(_) => "non-finite",
            Error::Contract(_) => "contract",
            Error::InvalidConfig(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Episode { source, .. } => source.category(),
            Error::Io(_) => "io",
        }
    }
}

struct StepCtx(Option<usize>);

impl fmt::Display for StepCtx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(k) => write!(f, " at step {k}"),
            None => Ok(()),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
