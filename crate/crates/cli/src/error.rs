use std::fmt;

use dmnil::ErrorClass;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

/// A failure carrying the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<dmnil::Error> for CliError {
    fn from(e: dmnil::Error) -> Self {
        let code = match e.class() {
            ErrorClass::Config => EXIT_CONFIG,
            ErrorClass::Data => EXIT_DATA,
            ErrorClass::Numeric => EXIT_NUMERIC,
        };
        Self { code, message: e.to_string() }
    }
}
