use std::path::PathBuf;

use crate::corpus::TaskId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("cluster {cluster} appears in both train and eval splits")]
    Split { cluster: String },

    #[error("duplicate {kind} id {id:?}")]
    DuplicateId { kind: &'static str, id: String },

    #[error("unknown task {0}")]
    UnknownTask(TaskId),

    #[error("unbalanced placeholder brace at byte {position}: {detail}")]
    UnbalancedPlaceholder { position: usize, detail: &'static str },

    #[error("embedding backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("vector norm {norm:e} is below 1e-12; cosine is undefined")]
    ZeroNorm { norm: f64 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("insufficient pairs: {0}")]
    InsufficientPairs(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error("no eligible training tasks for target {0}")]
    NoEligibleTasks(TaskId),

    #[error("task {0} has no selection-visible instructions")]
    NoInstructions(TaskId),

    #[error("task {0} has no instances available")]
    MissingInstances(TaskId),

    #[error("need at least 3 common tasks for rank correlation, found {found}")]
    InsufficientOverlap { found: usize },

    #[error("rank correlation undefined: {0} ranking is constant")]
    ConstantRanking(&'static str),

    #[error("placeholder {{{{{name}}}}} has no matching instance field")]
    UnresolvedPlaceholder { name: String },

    #[error("task {task} has {found} positive examples, need 2")]
    MissingExamples { task: TaskId, found: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
