use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] squash_core::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if is_parameter_error(e) => 2,
            _ => 1,
        }
    }
}

fn is_parameter_error(e: &squash_core::Error) -> bool {
    use squash_core::Error::*;
    matches!(e, Domain(_) | SingularParameters(_) | Unstable(_) | Nonphysical(_) | StepSize(_))
}

pub type Result<T> = std::result::Result<T, CliError>;
