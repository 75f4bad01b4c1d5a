use thiserror::Error;

#[derive(Debug, Error)]
pub enum DcsError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("step index {index} out of range 0..={max}")]
    Index { index: usize, max: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate posterior: {0}")]
    DegeneratePosterior(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl DcsError {
    /// True for errors caused by bad user input rather than by the run itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            DcsError::Config(_) | DcsError::Json(_) | DcsError::Argument(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, DcsError>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(DcsError::Dimension {
            context,
            expected,
            got,
        })
    }
}
