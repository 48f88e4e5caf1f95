use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical divergence at t = {t:.6} s: {context}")]
    Divergence { t: f64, context: String },

    #[error("no feasible operating point: {0}")]
    NoOperatingPoint(String),

    #[error("positive-sequence voltage collapse")]
    VoltageCollapse,

    #[error("property failure: {0}")]
    Property(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) | Error::Csv(_) => 2,
            Error::Divergence { .. } => 3,
            Error::NoOperatingPoint(_) | Error::VoltageCollapse => 4,
            Error::Property(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
