use std::path::PathBuf;

use thiserror::Error;
use xvkd_core::distill::DistillError;
use xvkd_core::evalkit::EvalError;
use xvkd_core::experiments::ExperimentError;
use xvkd_core::locmodel::ModelError;
use xvkd_core::synthcv::SynthError;

/// Exit codes of the `xvkd` binary. Usage errors exit with 2 (clap).
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const MISSING_DEPENDENCY: i32 = 3;
    pub const HASH_MISMATCH: i32 = 4;
    pub const INVALID_CONFIG: i32 = 5;
    pub const RUNTIME: i32 = 6;
    pub const CHECK_FAILED: i32 = 7;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing dependency {path}: run `{producer}` first")]
    MissingDependency { path: PathBuf, producer: &'static str },
    #[error("config-hash mismatch for {what}: stored {stored}, current config gives {computed}")]
    HashMismatch {
        what: String,
        stored: String,
        computed: String,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Runtime(String),
    #[error("directional checks failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingDependency { .. } => exit::MISSING_DEPENDENCY,
            CliError::HashMismatch { .. } => exit::HASH_MISMATCH,
            CliError::InvalidConfig(_) => exit::INVALID_CONFIG,
            CliError::Runtime(_) => exit::RUNTIME,
            CliError::CheckFailed(_) => exit::CHECK_FAILED,
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(m) => CliError::InvalidConfig(m),
            ExperimentError::Synth(s) => s.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::HashMismatch { stored, computed } => CliError::HashMismatch {
                what: "world".into(),
                stored,
                computed,
            },
            SynthError::InvalidConfig(m) => CliError::InvalidConfig(m),
            e @ SynthError::IndivisibleGeometry { .. } => CliError::InvalidConfig(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(ModelError, DistillError, EvalError, std::io::Error, serde_json::Error);
