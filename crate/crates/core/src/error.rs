use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or parameters (bad epsilon/delta, malformed
    /// workload spec, inconsistent schema, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (CSV cells, schema mismatches).
    #[error("data error: {0}")]
    Data(String),

    /// A privacy charge was refused because it would overdraw the budget.
    #[error("budget exhausted charging `{label}`: requested rho={requested}, remaining rho={remaining}")]
    BudgetExhausted {
        label: String,
        requested: f64,
        remaining: f64,
    },

    /// Numerical failure (non-finite activation or loss).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
