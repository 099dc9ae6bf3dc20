use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value")]
    NonFinite { op: String },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("batchnorm in train mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("point set is empty")]
    EmptyCloud,

    #[error("point cloud is degenerate: all points coincide")]
    DegenerateCloud,

    #[error("point cloud carries no part labels")]
    Unlabeled,

    #[error("label error: {0}")]
    Label(String),

    #[error("index {index} out of range for {what} of size {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("routing iteration {iteration}: non-finite {what}")]
    RoutingNonFinite {
        iteration: usize,
        what: &'static str,
    },

    #[error("capsule selection is empty")]
    EmptySelection,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("training set holds a single class")]
    SingleClass,

    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("unknown point cloud format `{0}`")]
    UnknownFormat(String),

    #[error("checkpoint magic mismatch")]
    MagicMismatch,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("checkpoint tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeDisagreement {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("missing snapshot: {0}")]
    MissingSnapshot(String),

    #[error("gradient check failed: {0}")]
    GradientMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Stable snake-case tag used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::UnknownParam(_) => "unknown_param",
            Error::DuplicateParam(_) => "duplicate_param",
            Error::BatchTooSmall(_) => "batch_too_small",
            Error::Config(_) => "config",
            Error::EmptyCloud => "empty_cloud",
            Error::DegenerateCloud => "degenerate_cloud",
            Error::Unlabeled => "unlabeled",
            Error::Label(_) => "label",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::RoutingNonFinite { .. } => "routing_non_finite",
            Error::EmptySelection => "empty_selection",
            Error::EmptyDataset => "empty_dataset",
            Error::SingleClass => "single_class",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Parse { .. } => "parse",
            Error::UnknownFormat(_) => "unknown_format",
            Error::MagicMismatch => "magic_mismatch",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Truncated(_) => "truncated",
            Error::ShapeDisagreement { .. } => "shape_disagreement",
            Error::MissingSnapshot(_) => "missing_snapshot",
            Error::GradientMismatch(_) => "gradient_mismatch",
            Error::Io(_) => "io",
        }
    }
}
