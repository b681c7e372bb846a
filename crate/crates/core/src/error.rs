use thiserror::Error;

/// Errors raised across the simulator.
#[derive(Debug, Error)]
pub enum CisacError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible layout: {0}")]
    Infeasible(String),

    #[error("singular information matrix: {reason} (condition number {condition:.3e})")]
    Singular { reason: String, condition: f64 },

    #[error("degenerate prior: {0}")]
    DegeneratePrior(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, CisacError>;
