use thiserror::Error;

use crate::lpcore::LpError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid instance: {}", .0.join("; "))]
    InvalidInstance(Vec<String>),

    #[error("unknown {kind} label `{label}`")]
    UnknownLabel { kind: &'static str, label: String },

    #[error("buyer type {0} has zero prior mass; its conditional belief is undefined")]
    DegenerateConditional(String),

    #[error("signal {0} has zero probability under the prior")]
    UnreachableSignal(usize),

    #[error("seller and buyer signals are dependent (max deviation {0:.3e})")]
    DependentSignals(f64),

    #[error("report {report} is not affordable for true type {truth}")]
    UnaffordableReport { truth: String, report: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid protocol: {0}")]
    ProtocolInvalid(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("sampling: {0}")]
    Sampling(String),

    #[error(transparent)]
    Lp(#[from] LpError),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
