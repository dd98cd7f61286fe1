use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    /// A configuration value is out of its domain; `field` names it.
    #[error("invalid `{field}`: {msg}")]
    Validation { field: String, msg: String },
    #[error("dataset not found: {0}")]
    DatasetMissing(String),
    #[error("non-finite loss at epoch {epoch}, step {step} (global step {global_step})")]
    NonFinite {
        epoch: usize,
        step: usize,
        global_step: usize,
    },
    #[error(transparent)]
    Core(#[from] sparsekit_core::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn invalid(field: &str, msg: impl Into<String>) -> Self {
        Error::Validation {
            field: field.to_string(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by user input rather than by running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. } | Error::Core(sparsekit_core::Error::Config(_))
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
