use thiserror::Error;

use crate::graph::VariableKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing value for variable {0}")]
    MissingKey(VariableKey),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("variable {key} was registered with dimension {registered}")]
    KeyDimConflict { key: VariableKey, registered: usize },

    #[error("invalid factor: {0}")]
    InvalidFactor(String),

    #[error("factor graph is empty")]
    EmptyGraph,

    #[error("information matrix is singular; unconstrained variables: {}", fmt_keys(.keys))]
    Singular { keys: Vec<VariableKey> },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("satellite {sat}: {what} observation not available")]
    MissingObservation { sat: String, what: &'static str },

    #[error("epoch {0} has no predecessor")]
    NoPredecessor(usize),

    #[error("ambiguity slot {slot} out of range for dimension {dim}")]
    SlotOutOfRange { slot: usize, dim: usize },

    #[error("epoch {epoch}: only {visible} visible satellites, at least 4 required")]
    UnderDetermined { epoch: usize, visible: usize },

    #[error("epoch {epoch}: no reference satellite for {system}")]
    NoReference { epoch: usize, system: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("line {line}: {message} (last good line: {last_good})")]
    Parse {
        line: usize,
        last_good: usize,
        message: String,
    },

    #[error("unsupported epoch file version {0}")]
    UnsupportedVersion(u64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

fn fmt_keys(keys: &[VariableKey]) -> String {
    keys.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}
