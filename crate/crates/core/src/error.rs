// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid length: {0}")]
    InvalidLength(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    LengthOverflow { len: usize, max_len: usize },

    #[error("summary task requires a desired length")]
    MissingLength,

    #[error("training mixture has no included components")]
    EmptyMixture,

    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: schema error: {msg}")]
    Schema {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: u64, msg: String },

    #[error("pipeline failed: {0}")]
    Pipeline(String),

    #[error("backend failure: {0}")]
    Backend(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
