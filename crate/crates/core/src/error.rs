use thiserror::Error;

/// Errors surfaced by the adaptation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid value: {0}")]
    Value(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! value_err {
    ($($arg:tt)*) => { $crate::error::Error::Value(format!($($arg)*)) };
}
macro_rules! state_err {
    ($($arg:tt)*) => { $crate::error::Error::State(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! usage_err {
    ($($arg:tt)*) => { $crate::error::Error::Usage(format!($($arg)*)) };
}
macro_rules! format_err {
    ($($arg:tt)*) => { $crate::error::Error::Format(format!($($arg)*)) };
}

pub(crate) use {config_err, format_err, shape_err, state_err, usage_err, value_err};
