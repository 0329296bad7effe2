use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("index out of bounds in {op}: {index} (limit {limit})")]
    Index {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("softmax mask leaves row {row} with no allowed entry")]
    DegenerateMask { row: usize },
    #[error("loss has no unmasked position")]
    EmptyLoss,
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("token id {id} outside vocabulary of size {size}")]
    Vocab { id: usize, size: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("aggregation variant {0} records no attention")]
    NoAttention(&'static str),
    #[error("parse error{}: {message}", .param.as_ref().map(|p| format!(" in parameter `{p}`")).unwrap_or_default())]
    Parse {
        param: Option<String>,
        message: String,
    },
    #[error("unsupported checkpoint version `{0}`")]
    Version(String),
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("caption `{0}` matches no template")]
    Unparseable(String),
    #[error("lexicon: {0}")]
    Lexicon(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("cannot split: {0}")]
    Split(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(message: impl Into<String>) -> Self {
        Error::Parse {
            param: None,
            message: message.into(),
        }
    }
}
