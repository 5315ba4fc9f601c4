//! IO companion for `mosaic-core`: file formats (schemas, datasets, results
//! tables, checkpoints, reports), bundled reference grids, run manifests,
//! SVG charts, and the implementations behind the `mosaic` command-line
//! tool.

pub mod commands;
pub mod fixtures;
pub mod formats;
pub mod manifest;
pub mod svg;

/// Exit-code policy: 0 success, 1 runtime failure, 2 usage or validation.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, unreadable or invalid inputs.
    Usage(String),
    /// A failure while executing a valid request.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;
