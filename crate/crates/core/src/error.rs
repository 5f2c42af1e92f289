use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("unlabeled document `{0}`: neither model_score nor gold_label is present")]
    Unlabeled(String),

    #[error("country `{0}` has no toxic documents")]
    NoToxicDocuments(String),

    #[error("corpus `{0}` has zero total tokens")]
    EmptyCorpus(&'static str),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("malformed template `{0}`: expected exactly one {{person}} placeholder")]
    MalformedTemplate(String),

    #[error("k = {k} exceeds the number of vectors ({n})")]
    TooFewVectors { k: usize, n: usize },

    #[error(transparent)]
    Score(#[from] ScoreError),

    #[error("digest mismatch for `{path}`: manifest says {expected}, file hashes to {actual}")]
    DigestMismatch {
        path: String,
        expected: String,
        actual: String,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status for this failure: 2 configuration, 3 input,
    /// 4 remote scorer, 5 internal invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Score(e) if e.is_remote() => 4,
            Error::Invariant(_) => 5,
            _ => 3,
        }
    }
}

/// Failures surfaced by a toxicity scorer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoreError {
    #[error("cannot score empty text")]
    EmptyText,

    #[error("remote scorer rejected the request with status {status}: {body}")]
    Rejected { status: u16, body: String },

    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("score cache: {0}")]
    Cache(String),
}

impl ScoreError {
    /// True for failures that originate from a remote service.
    pub fn is_remote(&self) -> bool {
        matches!(
            self,
            ScoreError::Rejected { .. } | ScoreError::Transport { .. } | ScoreError::Protocol(_)
        )
    }
}
