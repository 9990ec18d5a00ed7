use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown dataset token {0}")]
    UnknownToken(usize),

    #[error("dataset `{0}` is already registered")]
    TokenCollision(String),

    #[error("checkpoint has no EMA shadow parameters")]
    MissingEma,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("sampling diverged: {0}")]
    Sampling(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("training diverged at step {step}: loss {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("checkpoint container: {0}")]
    Container(#[from] safetensors::SafeTensorError),
}

impl Error {
    /// Stable name for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "ConfigError",
            Error::Shape(_) => "ShapeError",
            Error::Domain(_) => "DomainError",
            Error::UnknownToken(_) => "UnknownTokenError",
            Error::TokenCollision(_) => "TokenCollisionError",
            Error::MissingEma => "MissingEMAError",
            Error::Parse(_) => "ParseError",
            Error::InsufficientData(_) => "InsufficientDataError",
            Error::Sampling(_) => "SamplingError",
            Error::Numerical(_) => "NumericalError",
            Error::Schema(_) => "SchemaError",
            Error::NonFiniteLoss { .. } => "NonFiniteLossError",
            Error::Tensor(_) => "TensorError",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
            Error::Csv(_) => "CsvError",
            Error::Container(_) => "CheckpointError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
