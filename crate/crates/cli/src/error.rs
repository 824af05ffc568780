use fedtree_core::config::ConfigError;

/// Everything a command can fail with, each kind mapped to its exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Unknown key, wrong type, invariant violation, bad flag value or
    /// unknown sweep parameter.
    #[error("config error: {0}")]
    Config(String),
    /// Config file that is not valid JSON at all.
    #[error("malformed config: {0}")]
    Syntax(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Io(_) => 3,
            CliError::Check(_) => 4,
            CliError::Syntax(_) => 5,
        }
    }

    pub(crate) fn io(what: impl std::fmt::Display, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{what}: {err}"))
    }
}

impl From<fedtree_core::Error> for CliError {
    fn from(e: fedtree_core::Error) -> Self {
        match e {
            fedtree_core::Error::Numeric(msg) => CliError::Numeric(msg),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Syntax(err) if err.is_syntax() || err.is_eof() => CliError::Syntax(err.to_string()),
            ConfigError::Syntax(err) => CliError::Config(err.to_string()),
            ConfigError::Invalid(err) => CliError::Config(err.to_string()),
        }
    }
}
