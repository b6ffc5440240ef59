use thiserror::Error;

/// Errors raised across the fitting laboratory.
#[derive(Debug, Error)]
pub enum VolfitError {
    #[error("invalid parameter vector: {0}")]
    InvalidParameter(String),
    #[error("moneyness grid is empty")]
    EmptyGrid,
    #[error("invalid moneyness grid: {0}")]
    InvalidGrid(String),
    #[error("invalid volatility {0}: must be finite and > 0")]
    InvalidVol(f64),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("division by zero spread at grid point {0}")]
    ZeroSpread(usize),
    #[error("episode already finished; call reset first")]
    EpisodeDone,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("stale forward cache: {0}")]
    StaleCache(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = VolfitError> = std::result::Result<T, E>;

impl VolfitError {
    /// Short machine-readable tag, used for the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            VolfitError::InvalidParameter(_) => "invalid_parameter",
            VolfitError::EmptyGrid => "empty_grid",
            VolfitError::InvalidGrid(_) => "invalid_grid",
            VolfitError::InvalidVol(_) => "invalid_vol",
            VolfitError::Config(_) => "config",
            VolfitError::ZeroSpread(_) => "zero_spread",
            VolfitError::EpisodeDone => "lifecycle",
            VolfitError::Shape(_) => "shape",
            VolfitError::StaleCache(_) => "stale_cache",
            VolfitError::Checkpoint(_) => "checkpoint",
            VolfitError::Io(_) => "io",
            VolfitError::Json(_) => "json",
            VolfitError::Csv(_) => "csv",
        }
    }
}
