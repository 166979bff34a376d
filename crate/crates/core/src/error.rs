use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("sample rate mismatch: clip is {clip_hz} Hz but impulse response is {ir_hz} Hz")]
    SampleRateMismatch { clip_hz: u32, ir_hz: u32 },

    #[error("{0} has zero power")]
    Silent(&'static str),

    #[error("no {pool} pool entry with id `{id}`")]
    MissingPoolEntry { pool: &'static str, id: String },

    #[error("token `{0}` is not in the vocabulary")]
    OutOfVocabulary(String),

    #[error("search space of {size} paths exceeds the exhaustive limit of {limit}")]
    SearchSpaceTooLarge { size: f64, limit: f64 },

    #[error("duplicate record id `{0}`")]
    DuplicateRecord(String),

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { expected: u32, found: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {path}: run `{stage}` first")]
    MissingArtifact { stage: &'static str, path: PathBuf },

    #[error("stale artifact {path}: produced under config hash {found}, expected {expected} (rerun `{stage}` or pass --force)")]
    StaleArtifact {
        stage: &'static str,
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("png error: {0}")]
    Png(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
