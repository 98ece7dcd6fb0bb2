//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch between two coupled arrays, naming the offending axis.
    #[error("dimension mismatch on axis `{axis}`: expected {expected}, got {got}")]
    Dimension {
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    /// A numeric quantity became NaN or infinite.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A Langevin state escaped the stability region.
    #[error("divergence guard tripped: |x| = {norm:.3e} > {guard:.1e} at iteration {iter}, chain m={m}, n={n}")]
    Divergence {
        norm: f64,
        guard: f64,
        iter: u64,
        m: usize,
        n: usize,
    },

    /// The selected model lacks a capability the algorithm needs.
    #[error("configuration/model mismatch: {0}")]
    MissingCapability(String),

    /// Invalid configuration value.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Step size violates a stability or admissibility restriction.
    #[error("step size {h} violates the restriction 0 < h <= {h_max} (= 2/(mu+L))")]
    StepRestriction { h: f64, h_max: f64 },

    /// Activation tape no longer matches the parameters it was recorded with.
    #[error("stale tape: parameters were mutated after the forward pass (revision {tape} vs {params})")]
    StaleTape { tape: u64, params: u64 },

    /// On-disk artifact does not match the expected schema.
    #[error("schema error in {path}: {reason}")]
    Schema { path: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn schema(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
