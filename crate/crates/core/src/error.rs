// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors produced by circuit-cutter.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape {
        /// Operation that rejected its operands.
        op: &'static str,
        /// Human-readable description of the offending shapes.
        detail: String,
    },

    /// A value became NaN or infinite.
    #[error("numeric overflow in {op} (tape node {node})")]
    NumericOverflow {
        /// Operation whose output was non-finite.
        op: &'static str,
        /// Index of the tape node.
        node: usize,
    },

    /// The caller violated a precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// A graph failed a structural check.
    #[error("structural error: {0}")]
    Structural(String),

    /// Training diverged or missed its quality bar.
    #[error("training failure: {0}")]
    Training(String),

    /// A file did not match its expected binary layout.
    #[error("format error in {path}: {detail} (byte offset {offset})")]
    Format {
        /// File being parsed.
        path: PathBuf,
        /// Byte offset where parsing failed.
        offset: u64,
        /// What was wrong.
        detail: String,
    },

    /// A pipeline stage needs an artifact that has not been produced.
    #[error("missing artifact {artifact}: run stage `{stage}` first")]
    MissingArtifact {
        /// Artifact name.
        artifact: String,
        /// Stage producing it.
        stage: String,
    },

    /// Underlying I/O failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        /// File involved.
        path: PathBuf,
        /// Original error.
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// CSV (de)serialization failure.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
