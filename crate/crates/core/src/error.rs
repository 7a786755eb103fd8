use thiserror::Error;

/// Errors raised anywhere in the smoothing and FPCA pipeline.
#[derive(Debug, Error)]
pub enum SymCovError {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("point {point} outside domain [{lo}, {hi}]")]
    Domain { point: f64, lo: f64, hi: f64 },

    #[error("t = {t} outside the mean fit domain [{lo}, {hi}]")]
    Extrapolation { t: f64, lo: f64, hi: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("rank deficient system for term `{term}`")]
    RankDeficient { term: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate model: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SymCovError {
    /// True for errors caused by user input rather than numerical trouble.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            SymCovError::Schema(_)
                | SymCovError::Parse { .. }
                | SymCovError::EmptyInput(_)
                | SymCovError::InvalidSpec(_)
                | SymCovError::Domain { .. }
                | SymCovError::Extrapolation { .. }
                | SymCovError::Config(_)
                | SymCovError::Io(_)
                | SymCovError::Csv(_)
                | SymCovError::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, SymCovError>;
