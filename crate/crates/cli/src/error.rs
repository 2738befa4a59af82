use std::fmt;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn code_for(e: &regibox::Error) -> u8 {
    if e.is_usage() {
        EXIT_USAGE
    } else if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_DATA
    }
}

impl From<regibox::Error> for CliError {
    fn from(e: regibox::Error) -> Self {
        CliError {
            code: code_for(&e),
            message: e.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub trait Context<T> {
    fn context(self, what: impl fmt::Display) -> CliResult<T>;
}

impl<T> Context<T> for regibox::Result<T> {
    fn context(self, what: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| CliError {
            code: code_for(&e),
            message: format!("{what}: {e}"),
        })
    }
}
