use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("[{module}] contract violation: {msg}")]
    Contract { module: &'static str, msg: String },

    #[error("[{module}] non-finite value at {location} (norm {norm})")]
    NonFinite { module: &'static str, location: String, norm: f64 },

    #[error("[config] {0}")]
    Config(String),

    #[error("[config] unknown key `{key}`; nearest valid keys: {}", suggestions.join(", "))]
    UnknownKey { key: String, suggestions: Vec<String> },

    #[error("[{what}] digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { what: String, expected: String, found: String },

    #[error("[format] {0}")]
    Format(String),

    #[error("[io] {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("[json] {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(module: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract { module, msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
