use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error at layer `{layer}`: {reason}")]
    Shape { layer: String, reason: String },

    #[error("invalid network spec (line {line}): {reason}")]
    Spec { line: usize, reason: String },

    #[error("non-finite loss (first offending sample {sample} in batch)")]
    NonFiniteLoss { sample: usize },

    #[error("training diverged at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },

    #[error("invalid training policy: {0}")]
    Policy(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid label {label} at index {index} (class count {classes})")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("accumulator for layer `{expected}` fed pre-activations of `{got}`")]
    LayerMismatch { expected: String, got: String },

    #[error("layer `{0}` is not eligible for linearization")]
    NotEligible(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("not foldable: {0}")]
    NotFoldable(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error at byte offset {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            reason: reason.into(),
        }
    }

    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable name of the variant, used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Spec { .. } => "spec",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Divergence { .. } => "divergence",
            Error::Policy(_) => "policy",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::Label { .. } => "label",
            Error::LayerMismatch { .. } => "layer_mismatch",
            Error::NotEligible(_) => "not_eligible",
            Error::UnknownLayer(_) => "unknown_layer",
            Error::NotFoldable(_) => "not_foldable",
            Error::Domain(_) => "domain",
            Error::Parse { .. } => "parse",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::File { .. } => "file",
            Error::Iteration { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
