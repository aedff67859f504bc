// Copyright 2026 The sdplab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("dataset file not found: {0}")]
    MissingFile(PathBuf),

    #[error("empty dataset file: {0}")]
    EmptyFile(PathBuf),

    #[error("non-numeric feature at line {line}, column '{column}': {value:?}")]
    NonNumericCell {
        line: usize,
        column: String,
        value: String,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint version error: expected header '{expected}', found '{found}'")]
    CheckpointVersion { expected: String, found: String },

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint shape inconsistency: {0}")]
    CheckpointShape(String),

    #[error("stale forward trace: trace was produced by network {trace_id}@{trace_version}, not {net_id}@{net_version}")]
    StaleTrace {
        trace_id: u64,
        trace_version: u64,
        net_id: u64,
        net_version: u64,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Stable class name, used by the CLI when reporting failures.
    pub fn class_name(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::NonFinite(_) => "NonFinite",
            Error::MissingFile(_) => "MissingFile",
            Error::EmptyFile(_) => "EmptyFile",
            Error::NonNumericCell { .. } => "NonNumericCell",
            Error::Csv(_) => "Csv",
            Error::Io(_) => "Io",
            Error::CheckpointVersion { .. } => "CheckpointVersion",
            Error::CheckpointTruncated(_) => "CheckpointTruncated",
            Error::CheckpointShape(_) => "CheckpointShape",
            Error::StaleTrace { .. } => "StaleTrace",
            Error::Diverged { .. } => "Diverged",
        }
    }
}
