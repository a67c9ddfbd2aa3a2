use std::io;

use thiserror::Error;

/// Errors produced anywhere in the modeling stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("softmax row {row} has every entry masked")]
    DegenerateMask { row: usize },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("non-finite loss while probing coordinate {coordinate}")]
    Instability { coordinate: String },

    #[error("gradient check failed: relative error {relative_error:e} at {coordinate}")]
    GradientMismatch { coordinate: String, relative_error: f64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("interval error: {0}")]
    Interval(String),

    #[error("unstable Hawkes parameters: spectral radius {spectral_radius} >= 1")]
    Stability { spectral_radius: f64 },

    #[error("recipe infeasible: {rejections} rejections while collecting {wanted} sequences")]
    InfeasibleRecipe { rejections: usize, wanted: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
