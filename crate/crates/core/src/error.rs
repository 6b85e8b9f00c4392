use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("position {position} exceeds rope ceiling {ceiling}")]
    PositionOutOfRange { position: usize, ceiling: usize },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("cache exhausted: {needed} positions exceed max_seq_len {max}")]
    CacheExhausted { needed: usize, max: usize },

    #[error("unknown prompt id {0}")]
    UnknownPrompt(u64),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed store file: {0}")]
    Format(String),

    #[error("store format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch in record {record}")]
    Checksum { record: usize },

    #[error("corpus line {line}: {message}")]
    Corpus { line: usize, message: String },

    #[error("perturbation: {0}")]
    Perturb(String),

    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Attach the failing pipeline stage to an error.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage { stage, source: Box::new(e) })
    }
}
