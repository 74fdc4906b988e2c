use thiserror::Error;

#[derive(Debug, Error)]
pub enum FluxError {
    /// A point or stencil fell outside the domain it must live in.
    #[error("domain error: {0}")]
    Domain(String),
    /// Caller violated an API contract (shape mismatch, stale cache, ...).
    #[error("contract error: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A loop passes through a wire; the caller should draw another one.
    #[error("rejected path: {0}")]
    RejectedPath(String),
    #[error("path generation failed: {0}")]
    Generation(String),
    #[error("reference solver did not converge after {iterations} sweeps (relative residual {residual:e})")]
    Solver { iterations: usize, residual: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("nothing to evaluate: {0}")]
    Empty(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FluxError {
    /// Numeric and solver failures are distinguished from validation
    /// failures so the CLI can map them onto separate exit codes.
    pub fn is_numeric(&self) -> bool {
        matches!(self, FluxError::Numeric(_) | FluxError::Solver { .. })
    }
}

pub type Result<T> = std::result::Result<T, FluxError>;
