use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}:{line}: {msg}", file.display())]
    Parse { file: PathBuf, line: usize, msg: String },

    #[error("{}: no interactions found", file.display())]
    EmptyDataset { file: PathBuf },

    #[error("user {user}: item {item} appears in both train and test")]
    SplitOverlap { user: usize, item: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("user {user} has every item as a train positive; no negative can be sampled")]
    UnsatisfiableSampler { user: usize },

    #[error("non-finite {what} at epoch {epoch}{}", row.map(|r| format!(", {r}")).unwrap_or_default())]
    NonFinite {
        what: &'static str,
        epoch: usize,
        row: Option<crate::encoder::RowId>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("no users with a non-empty test set")]
    NothingToEvaluate,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad user input (config, dimensions, checkpoint
    /// layout) rather than a failure during the run itself.
    pub fn is_usage_error(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Checkpoint(_) | Error::InvalidArgument(_)
        )
    }
}
