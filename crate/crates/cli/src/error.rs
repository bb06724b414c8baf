use std::fmt;
use std::io;

/// Process exit codes. Stable: scripts depend on them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Args = 2,
    Io = 3,
    Data = 4,
    Checkpoint = 5,
    Target = 6,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ExitKind, message: impl fmt::Display) -> Self {
        Self {
            kind,
            message: message.to_string(),
        }
    }

    pub fn args(message: impl fmt::Display) -> Self {
        Self::new(ExitKind::Args, message)
    }

    pub fn io(message: impl fmt::Display) -> Self {
        Self::new(ExitKind::Io, message)
    }

    pub fn data(message: impl fmt::Display) -> Self {
        Self::new(ExitKind::Data, message)
    }

    pub fn checkpoint(message: impl fmt::Display) -> Self {
        Self::new(ExitKind::Checkpoint, message)
    }

    pub fn target(message: impl fmt::Display) -> Self {
        Self::new(ExitKind::Target, message)
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Self::io(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;
