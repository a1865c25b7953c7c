use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// Two tables or vectors that must share a shape do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A phase-1 task does not carry enough samples for reliable clustering.
    #[error(
        "clustering precondition violated: task {task} at (s={state}, a={action}) has radius {radius:.4} > {limit:.4}"
    )]
    ClusteringPrecondition {
        task: usize,
        state: usize,
        action: usize,
        radius: f64,
        limit: f64,
    },

    /// Clustering produced more groups than the declared model-count bound.
    #[error("clustering produced {found} groups but at most {bound} models were declared")]
    TooManyGroups { found: usize, bound: usize },

    /// Random MDP family generation gave up.
    #[error("family generation failed after {attempts} attempts: {reason}")]
    Generation { attempts: usize, reason: String },

    /// A text file did not follow the expected grammar.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// An error from a multi-task round, tagged with the round index.
    #[error("in round {round}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
