use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    /// A cache or record was used with something it was not produced by.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("empty loss support")]
    EmptyLossSupport,

    #[error("no tokens")]
    NoTokens,

    #[error("no proposer output")]
    NoProposerOutput,

    #[error("non-finite loss at step {step}: task={task} balance={balance}")]
    NonFiniteLoss { step: usize, task: f64, balance: f64 },

    #[error("agent {agent}: {detail}")]
    Agent { agent: String, detail: String },

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
