use std::fmt;
use std::path::Path;

use atmv_core::Error;

/// Exit codes: 2 config/usage, 3 data/compatibility, 4 internal invariant.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            code: 4,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::data(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Dimension(_) | Error::TimestepRange { .. } => 2,
            Error::Checkpoint { .. } | Error::Data(_) | Error::Io { .. } => 3,
            Error::Tensor(_) | Error::Invariant(_) => 4,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}
