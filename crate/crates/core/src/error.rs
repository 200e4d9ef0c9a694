use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the pipeline.
///
/// Variants fall into three families that the command line maps onto exit
/// codes: input validation (2), numerical failure (3) and I/O (4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("loss must be a 1x1 tensor, got {0:?}")]
    NonScalarLoss([usize; 2]),
    #[error("variable {0} is not recorded on this tape")]
    NotOnTape(usize),
    #[error("sigma must be positive, entry {index} is {value}")]
    NonPositiveSigma { index: usize, value: f64 },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("ROI {roi} has zero variance{}", subject.as_ref().map(|s| format!(" (subject {s})")).unwrap_or_default())]
    ZeroVariance { subject: Option<String>, roi: usize },
    #[error("connectivity matrix has no positive edges")]
    EmptyGraph,
    #[error("degenerate projection: {0} has zero Frobenius norm")]
    DegenerateProjection(&'static str),
    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("subject {subject}: missing field `{field}`")]
    MissingData { subject: String, field: String },
    #[error("missing demographic field `{0}`")]
    MissingDemographic(&'static str),
    #[error("class {class} has {count} members, fewer than {k} folds")]
    ClassTooSmall { class: usize, count: usize, k: usize },
    #[error("AUC is undefined when only one class is present")]
    SingleClass,
    #[error("model has not been trained")]
    Untrained,
    #[error("no labeled nodes in the loss mask")]
    EmptyLabeledSet,
    #[error("training diverged at epoch {epoch}: {what} is not finite")]
    Divergence { epoch: usize, what: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Process exit code: 2 input validation, 3 numerical failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 4,
            Error::NonFinite(_)
            | Error::Divergence { .. }
            | Error::DegenerateProjection(_)
            | Error::NonScalarLoss(_)
            | Error::NotOnTape(_) => 3,
            _ => 2,
        }
    }
}
