use std::fmt;
use std::path::Path;

/// Failure of a run, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, flags or missing input artifacts (exit code 2).
    Config(String),
    /// A numerical routine failed (exit code 3).
    Numerical(String),
    /// Reading or writing files failed (exit code 1).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    /// Prefixes the message with the phase it came from.
    pub fn in_phase(self, phase: &str) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("[{phase}] {m}")),
            CliError::Numerical(m) => CliError::Numerical(format!("[{phase}] {m}")),
            CliError::Io(m) => CliError::Io(format!("[{phase}] {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<coed::Error> for CliError {
    fn from(e: coed::Error) -> Self {
        use coed::Error as E;
        match e {
            E::Config(m) | E::InvalidArgument(m) => CliError::Config(m),
            E::NumericalFailure(_) | E::ContractViolation(_) | E::DegenerateData(_) => {
                CliError::Numerical(e.to_string())
            }
            E::Io(err) => CliError::Io(err.to_string()),
        }
    }
}
