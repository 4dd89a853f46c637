use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("lineages `{first}` and `{second}` disagree: both use {rank} name `{name}` but differ above it")]
    Consistency {
        first: String,
        second: String,
        rank: String,
        name: String,
    },

    #[error("duplicate taxon id `{0}`")]
    Duplicate(String),

    #[error("unknown taxon id `{0}`")]
    UnknownTaxon(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("only {qualified} candidates qualify, {requested} requested")]
    Selection { qualified: usize, requested: usize },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("coverage: {0}")]
    Coverage(String),

    #[error("capacity: {0}")]
    Capacity(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
