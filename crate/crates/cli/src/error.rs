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

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] sdplab_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("output {0} already exists; pass --force to overwrite")]
    OutputExists(PathBuf),

    #[error("{0}")]
    Schema(String),

    #[error("{failed} of {total} sweep cells failed")]
    PartialSweep { failed: usize, total: usize },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class_name(&self) -> &'static str {
        match self {
            CliError::Config(_) => "ConfigError",
            CliError::Core(e) => e.class_name(),
            CliError::Io { .. } => "Io",
            CliError::OutputExists(_) => "OutputExists",
            CliError::Schema(_) => "SchemaMismatch",
            CliError::PartialSweep { .. } => "PartialSweep",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::PartialSweep { .. } => 4,
            _ => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
