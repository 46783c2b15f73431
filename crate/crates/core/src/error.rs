use std::path::PathBuf;

use thiserror::Error;

/// Every failure the pipeline can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("batch of {0} is too small for batch statistics")]
    DegenerateBatch(usize),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("missing stream file {}", .0.display())]
    MissingStream(PathBuf),
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("{file}:{line}: timestamp does not increase")]
    Order { file: String, line: usize },
    #[error("{stream} stream has no valid data in [{start:.2} s, {end:.2} s]")]
    Gap {
        stream: &'static str,
        start: f64,
        end: f64,
    },
    #[error("zero variance")]
    ZeroVariance,
    #[error("config error: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("value {0} outside [0, 10]")]
    Range(f64),
    #[error("window holds {have} samples, {need} required")]
    ShortWindow { have: usize, need: usize },
    #[error("loss diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(file: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Short machine-readable category used by the command line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Divergence { .. } => "divergence",
            Error::Io(_) => "io",
            Error::Contract(_) => "internal",
            _ => "data",
        }
    }

    /// Process exit status: 2 bad config, 3 data validation, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "data" => 3,
            "divergence" => 4,
            _ => 1,
        }
    }
}
