use std::fmt;

/// A failure with a short machine-readable category, printed as
/// `error[category]: message`.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub category: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(category: &'static str, message: impl Into<String>) -> Self {
        CliError {
            category,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.category, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<lowlight_cm::Error> for CliError {
    fn from(e: lowlight_cm::Error) -> Self {
        CliError::new(e.category(), e.to_string())
    }
}

pub(crate) fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::new("io", format!("{}: {e}", path.display()))
}
