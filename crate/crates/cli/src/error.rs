use std::fmt;

use stackstep::Error;

/// Process exit codes.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_PROPERTY: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or invalid configuration, missing inputs, bad flags.
    Config(String),
    /// A solver or iteration failed numerically.
    Numerical(String),
    /// The run finished but a checked property does not hold.
    Property(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Property(_) => EXIT_PROPERTY,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Property(m) => write!(f, "property check failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidArgument(_)
            | Error::ActivationNotAllowed { .. }
            | Error::NotStronglyConvex(_)
            | Error::InvalidMdp(_)
            | Error::Dimension { .. }
            | Error::Io(_) => CliError::Config(msg),
            Error::NotPositiveDefinite { .. }
            | Error::Singular { .. }
            | Error::NonFinite { .. }
            | Error::NoConvergence { .. }
            | Error::ProxStagnation { .. }
            | Error::Diverged { .. }
            | Error::FeatureCovariance { .. }
            | Error::Inconsistent(_) => CliError::Numerical(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
