use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] avfusion_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Check(String),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn config(key: &str, msg: impl Into<String>) -> Self {
        CliError::Config {
            key: key.to_string(),
            msg: msg.into(),
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
