use thiserror::Error;

use crate::model::Coefficients;

pub type Result<T> = std::result::Result<T, FedError>;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("linear system is singular even after jitter escalation")]
    SingularSystem,

    #[error("no convergence after {iterations} iterations")]
    NonConvergence {
        iterations: usize,
        last: Box<Coefficients>,
    },

    #[error("dataset has no rows")]
    EmptyDataset,

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid simulation spec: {}", .0.join("; "))]
    InvalidSpec(Vec<String>),

    /// The fit does not carry what was asked of it (e.g. no covariance for a
    /// first-order protocol). Distinct from malformed input.
    #[error("capability absent: {0}")]
    CapabilityAbsent(&'static str),

    #[error("AUC is undefined when labels contain a single class")]
    UndefinedAuc,

    #[error("client {client_id} reported non-positive local objective {value}")]
    NonPositiveObjective { client_id: u32, value: f64 },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
