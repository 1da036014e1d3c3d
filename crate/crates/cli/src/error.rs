use std::path::Path;

use thiserror::Error;

/// Failures the runner reports, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config value for `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("incomplete run: {0}")]
    Incomplete(String),

    #[error("training diverged: non-finite value in {0}")]
    NonFinite(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(conmatch_core::Error),

    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            context: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Incomplete(_) => 2,
            CliError::NonFinite(_) => 3,
            _ => 1,
        }
    }
}

impl From<conmatch_core::Error> for CliError {
    fn from(e: conmatch_core::Error) -> Self {
        match e {
            conmatch_core::Error::InvalidConfig { key, reason } => CliError::Config { key, reason },
            conmatch_core::Error::NonFiniteLoss(what) => CliError::NonFinite(what),
            other => CliError::Core(other),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(format!("json: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(format!("csv: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::config("dataset.manifest", "missing").exit_code(), 2);
        assert_eq!(CliError::Incomplete("x".into()).exit_code(), 2);
        let diverged: CliError = conmatch_core::Error::NonFiniteLoss("sup".into()).into();
        assert_eq!(diverged.exit_code(), 3);
        let bad: CliError = conmatch_core::Error::InvalidConfig {
            key: "tau".into(),
            reason: "too big".into(),
        }
        .into();
        assert!(bad.to_string().contains("`tau`"));
        assert_eq!(CliError::Other("x".into()).exit_code(), 1);
    }
}
