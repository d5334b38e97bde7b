use std::fmt;
use std::path::PathBuf;

use crate::config::ConfigError;

/// Failure category; the discriminant is the process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Internal = 1,
    /// Bad command line. Argument parsing also exits with this code.
    Usage = 2,
    Config = 3,
    /// Missing or unreadable file.
    File = 4,
    /// Dataset, label or checkpoint content.
    Data = 5,
    Numerical = 6,
    /// A gradient check exceeded its tolerance.
    CheckFailed = 7,
}

impl Category {
    pub fn code(self) -> i32 {
        self as i32
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Internal => "internal",
            Category::Usage => "usage",
            Category::Config => "config",
            Category::File => "file",
            Category::Data => "data",
            Category::Numerical => "numerical",
            Category::CheckFailed => "check failed",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        CliError { category, message: message.into() }
    }

    pub fn file(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        CliError::new(Category::File, format!("{}: {err}", path.into().display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.category.name(), self.message)
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(Category::Config, e.to_string())
    }
}

impl From<lfam_core::Error> for CliError {
    fn from(e: lfam_core::Error) -> Self {
        use lfam_core::Error as E;
        let category = match &e {
            E::Config(_) => Category::Config,
            E::Io { .. } => Category::File,
            E::Shape(_) | E::Label(_) | E::Format(_) | E::Generation(_) => Category::Data,
            E::Numerical(_) | E::DegenerateWindow => Category::Numerical,
            E::Contract(_) | E::ScaleGuard(_) => Category::Internal,
        };
        CliError::new(category, e.to_string())
    }
}
