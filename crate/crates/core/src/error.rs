use thiserror::Error;

/// Errors raised by the overlap, expectation, simulation and integration layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not positive semidefinite (smallest eigenvalue {min_eig:.3e})")]
    NotPsd { min_eig: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("teacher draw is rank deficient after {attempts} attempts")]
    RankDeficientTeacher { attempts: usize },

    #[error("unsupported evaluation strategy: {0}")]
    Unsupported(String),

    #[error("orthogonal space is null (d = {d} <= k = {k}): Q_perp = 0 is a stable point and q need not be tracked")]
    NullOrthogonalSpace { d: usize, k: usize },

    #[error("divergence at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("positive-semidefiniteness lost at t = {t}: smallest eigenvalue {min_eig:.3e}")]
    PsdViolation { t: f64, min_eig: f64 },

    #[error("regime {regime} cannot act on this state: {detail}")]
    RegimeMismatch { regime: String, detail: String },

    #[error("trajectories have disjoint time ranges")]
    DisjointTimes,

    #[error("config error: {0}")]
    Config(String),

    #[error("trajectory format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
