//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by the automatic differentiation engine.
#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("dimension mismatch in {op}: left is {left:?}, right is {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid argument to {op}: {message}")]
    InvalidArgument { op: &'static str, message: String },
    #[error("numeric domain violation in {op}: {message}")]
    NumericDomain { op: &'static str, message: String },
}

/// Errors raised when loading, generating or transforming datasets.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error in {path} at row {row}, column {col}: {message}")]
    Parse {
        path: String,
        row: usize,
        col: usize,
        message: String,
    },
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("unstable VAR system: companion spectral radius {radius:.4} >= 1")]
    Unstable { radius: f64 },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Errors raised by model construction and forward passes.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Errors raised by the training loop.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: loss non-finite twice consecutively")]
    Diverged { epoch: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Errors raised by evaluation and causal analysis.
#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("report error: {0}")]
    Report(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}
