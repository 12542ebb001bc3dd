use thiserror::Error;

use crate::task::TaskKind;

#[derive(Debug, Error)]
pub enum IctpError {
    #[error("{path}: {reason}")]
    Ingest { path: String, reason: String },

    #[error("invalid series: {0}")]
    InvalidSeries(String),

    #[error("{task} window at {start}: {reason}")]
    Window {
        task: TaskKind,
        start: usize,
        reason: String,
    },

    #[error("insufficient disjoint demonstrations: requested {requested}, available {available}")]
    InsufficientDemos { requested: usize, available: usize },

    #[error("empty task set")]
    EmptyTaskSet,

    #[error("task mismatch: context is {context}, query is {query}")]
    TaskMismatch { context: TaskKind, query: TaskKind },

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("adapter: {0}")]
    Adapter(String),

    #[error("invalid synthetic spec: {0}")]
    Synth(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Autodiff(#[from] ictp_autodiff::AutodiffError),
}

pub type Result<T> = std::result::Result<T, IctpError>;

impl IctpError {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        IctpError::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 2 config error, 3 missing input, 4 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            IctpError::Config(_) | IctpError::Protocol(_) | IctpError::Synth(_) => 2,
            IctpError::MissingInput(_) => 3,
            IctpError::Numerical(_) => 4,
            IctpError::Autodiff(ictp_autodiff::AutodiffError::NonFinite { .. }) => 4,
            _ => 1,
        }
    }
}
