use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed manifest: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("{path}: blob is {actual} bytes, expected {expected} ({count} rows x {dim} dims x 4)")]
    BlobSize {
        path: PathBuf,
        actual: u64,
        expected: u64,
        count: usize,
        dim: usize,
    },

    #[error("row {row}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("class {class} has no members")]
    EmptyClass { class: usize },

    #[error("row {row}, column {col}: non-finite feature value {value}")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroNorm { row: usize },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("removing instance {index} would empty its class {class}")]
    ClassWouldVanish { index: usize, class: usize },

    #[error("ill-conditioned scatter matrix (condition estimate {condition:.3e})")]
    IllConditioned { condition: f64 },

    #[error("IDA upper bound undefined for instance {index}: squared norm {norm_sq:.3e} <= ridge {ridge:.3e}")]
    BoundUndefined {
        index: usize,
        norm_sq: f64,
        ridge: f64,
    },

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("not enough classes with {needed} members: found {eligible}, need {n_way}")]
    InsufficientClasses {
        needed: usize,
        eligible: usize,
        n_way: usize,
    },

    #[error("unknown {kind} '{name}' (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("episode {episode}: {source}")]
    Episode {
        episode: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{failed} of {total} episodes failed (first: {first})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
