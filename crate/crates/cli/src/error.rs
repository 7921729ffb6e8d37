use std::path::PathBuf;

use danas::Error;

/// Failure of a CLI run, grouped into the categories reported through the exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("{} exists; another run may be writing to this directory (remove it if not)", .0.display())]
    Locked(PathBuf),
    #[error(transparent)]
    Core(#[from] Error),
}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_INPUT: i32 = 4;
pub const EXIT_COMPUTE: i32 = 5;
pub const EXIT_IO: i32 = 6;
pub const EXIT_LOCK: i32 = 7;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Input(_) => EXIT_INPUT,
            CliError::Locked(_) => EXIT_LOCK,
            CliError::Core(e) => match e {
                Error::Usage(_) => EXIT_USAGE,
                Error::InvalidSpec(_) | Error::InvalidConfig(_) => EXIT_CONFIG,
                Error::Decode(_)
                | Error::Parse(_)
                | Error::Remap(_)
                | Error::Dataset(_)
                | Error::Schema { .. }
                | Error::DanglingCheckpoint(_)
                | Error::Archive(_) => EXIT_INPUT,
                Error::Shape(_) | Error::Embedding(_) | Error::Adaptation(_) | Error::Distill(_) | Error::Search(_) => {
                    EXIT_COMPUTE
                }
                Error::Io(_) | Error::Json(_) => EXIT_IO,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}
