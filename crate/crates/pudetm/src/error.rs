use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] pudetm_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed CSV input; `line` is 1-based and counts the header.
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("model file: {0}")]
    Model(String),
    /// Experiment configuration problem, located by field path.
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(line: u64, message: impl Into<String>) -> Self {
        Error::Csv {
            line,
            message: message.into(),
        }
    }

    /// Process exit status: 2 for input or configuration errors, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(
                pudetm_core::Error::Singular { .. }
                | pudetm_core::Error::NonConvergence { .. }
                | pudetm_core::Error::Feasibility(_),
            ) => 3,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(e) => match e {
                pudetm_core::Error::Data(_) => "data",
                pudetm_core::Error::Config(_) => "config",
                pudetm_core::Error::Domain(_) => "domain",
                pudetm_core::Error::Singular { .. } => "singular",
                pudetm_core::Error::NonConvergence { .. } => "non_convergence",
                pudetm_core::Error::Feasibility(_) => "feasibility",
                pudetm_core::Error::Tie(_) => "tie",
                pudetm_core::Error::Rank(_) => "rank",
            },
            Error::Io { .. } => "io",
            Error::Csv { .. } => "csv",
            Error::Model(_) => "model",
            Error::Config(_) => "config",
        }
    }
}
