use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid configuration:\n{}", .0.iter().map(|p| format!("  - {p}")).collect::<Vec<_>>().join("\n"))]
    Validation(Vec<String>),

    #[error("unknown group label {0:?} (expected \"interest\" or \"control\")")]
    UnknownGroup(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("endpoint rejected credentials: {0}. Check the BIASLOUPE_API_KEY environment variable")]
    Authentication(String),

    #[error("every generation request failed ({failed} requests); first failure: {first}")]
    AllRequestsFailed { failed: usize, first: String },

    #[error("group {0} has no content tokens; BiasScore is undefined")]
    EmptyGroup(crate::Group),

    #[error("invalid statistic input: {0}")]
    Statistic(String),

    #[error("no class survives the frequency thresholds; a larger corpus is needed")]
    NothingSurvives,

    #[error("fragment {0} matches a class with infinite BiasScore but the table has no finite entries to substitute")]
    NoFiniteReplacement(String),

    #[error("unsupported format {0:?}; supported formats: md, html, json")]
    UnsupportedFormat(String),

    #[error("fragment {fragment} references unknown document {doc_id:?}")]
    DanglingDocument { fragment: String, doc_id: String },

    #[error("lexicon mismatch: {0}")]
    LexiconMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("stage {stage} failed: {source}{}", .last_artifact.as_ref().map(|p| format!(" (last persisted artifact: {})", p.display())).unwrap_or_default())]
    Stage {
        stage: &'static str,
        last_artifact: Option<PathBuf>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// The innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
