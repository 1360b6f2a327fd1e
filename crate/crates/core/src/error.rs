use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad category of an [`Error`], used by the CLI to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input data or configuration.
    Validation,
    /// A computation could not produce a usable number.
    Numerical,
    /// Filesystem failure.
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate label `{label}` in {list}")]
    DuplicateLabel { label: String, list: &'static str },

    #[error("unknown label `{label}` ({context})")]
    UnknownLabel { label: String, context: String },

    #[error("{list} is empty")]
    EmptyClassList { list: &'static str },

    #[error("knowledge graph needs at least 2 object classes, found {found}")]
    TooFewObjectClasses { found: usize },

    #[error("typical_of entry {index} is not a [part, object] pair of labels: {detail}")]
    MalformedEdge { index: usize, detail: String },

    #[error("duplicate typical_of edge ({part}, {object})")]
    DuplicateEdge { part: String, object: String },

    #[error("feature vector carries no evidence (all entries zero)")]
    NoEvidence,

    #[error("negative feature value {value} at index {index}")]
    NegativeFeature { index: usize, value: f64 },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("object class `{class}` has no {which} parts to draw from")]
    NoPartsToDraw { class: String, which: &'static str },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("region weight {weight} at index {index} is negative")]
    NegativeWeight { index: usize, weight: f64 },

    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("exact Shapley enumeration supports at most {max} features, got {n}; use kernel SHAP")]
    TooManyFeatures { n: usize, max: usize },

    #[error("kernel SHAP regression is singular (condition number {condition:e})")]
    SingularSystem { condition: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NoEvidence | Error::NonFiniteLoss { .. } | Error::SingularSystem { .. } => {
                ErrorKind::Numerical
            }
            Error::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn unknown(label: impl Into<String>, context: impl Into<String>) -> Self {
        Error::UnknownLabel {
            label: label.into(),
            context: context.into(),
        }
    }
}
