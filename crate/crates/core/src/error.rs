use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value at index {index} in {context}")]
    NonFinite { context: &'static str, index: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("decode error at byte offset {offset}: {reason}")]
    Decode { offset: usize, reason: String },

    #[error("protocol error (code {code}): {message}")]
    Protocol { code: u32, message: String },

    #[error("handshake rejected: {0}")]
    Handshake(String),

    #[error("transport failure at step {step}: {source}")]
    Transport {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("cloud closed the session at step {step}")]
    RemoteShutdown { step: usize },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for CLI front ends: 1 assertion, 2 usage/config, 3 I/O or protocol.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Parse(_) => 2,
            Error::Io(_)
            | Error::Decode { .. }
            | Error::Protocol { .. }
            | Error::Handshake(_)
            | Error::Transport { .. }
            | Error::RemoteShutdown { .. } => 3,
            _ => 1,
        }
    }
}
