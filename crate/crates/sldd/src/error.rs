use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by the process exit code the CLI maps them to:
/// configuration problems (2), numeric failures (3) and I/O or format
/// problems (4).
#[derive(Debug, Error)]
pub enum SlddError {
    #[error("non-finite value in {what} at index {index:?}")]
    NonFinite { what: String, index: Vec<usize> },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "solver diverged at iteration {iteration}: last finite objective {last_objective:.6e}"
    )]
    Divergence {
        last_objective: f64,
        iteration: usize,
    },

    #[error("no path entry satisfies the sparsity budget; smallest available n_per_class is {smallest_n_per_class}")]
    BudgetUnsatisfied { smallest_n_per_class: f64 },

    #[error("feature selection stalled after {selected} features: no new feature entered the path")]
    SelectionStalled { selected: usize },

    #[error("tie detected in {context} between indices {indices:?}")]
    Tie {
        context: String,
        indices: Vec<usize>,
    },

    #[error("extractor returned a non-finite value at patch cell ({x}, {y}), size {size}")]
    ExtractorNonFinite { x: usize, y: usize, size: usize },

    #[error("training aborted at epoch {epoch}, step {step}: loss is not finite")]
    TrainingAborted { epoch: usize, step: usize },

    #[error("bad file format in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SlddError {
    /// Process exit code for the CLI: 2 config, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            SlddError::Config(_) | SlddError::DimensionMismatch { .. } => 2,
            SlddError::NonFinite { .. }
            | SlddError::Divergence { .. }
            | SlddError::BudgetUnsatisfied { .. }
            | SlddError::SelectionStalled { .. }
            | SlddError::Tie { .. }
            | SlddError::ExtractorNonFinite { .. }
            | SlddError::TrainingAborted { .. } => 3,
            SlddError::Format { .. } | SlddError::Io(_) | SlddError::Json(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, SlddError>;
