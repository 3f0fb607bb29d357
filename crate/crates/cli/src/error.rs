use std::fmt;

/// Why a command stopped. Each kind maps to a process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Spec unreadable, not valid against the schema, or inconsistent.
    /// `path` is the dotted field path, empty for the whole document.
    InvalidSpec { path: String, message: String },
    /// Training produced a non-finite loss.
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    /// Anything else: I/O, a failed self-test, a failed ablation cell.
    Failed(String),
}

impl CliError {
    pub fn invalid(path: impl Into<String>, message: impl fmt::Display) -> Self {
        CliError::InvalidSpec {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::InvalidSpec { .. } => 2,
            CliError::NonFiniteLoss { .. } => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::InvalidSpec { path, message } if path.is_empty() => {
                write!(f, "invalid spec: {message}")
            }
            CliError::InvalidSpec { path, message } => {
                write!(f, "invalid spec at `{path}`: {message}")
            }
            CliError::NonFiniteLoss { epoch, batch, loss } => {
                write!(f, "non-finite loss {loss} at epoch {epoch}, batch {batch}")
            }
            CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<msca::Error> for CliError {
    fn from(e: msca::Error) -> Self {
        match e {
            msca::Error::NonFiniteLoss { epoch, batch, loss } => {
                CliError::NonFiniteLoss { epoch, batch, loss }
            }
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}
