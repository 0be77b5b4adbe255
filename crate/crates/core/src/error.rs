//! Error type shared across the pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // --- tensor archive ---
    #[error("archive has no arrays")]
    EmptyArchive,
    #[error("duplicate array name `{0}` in archive")]
    DuplicateName(String),
    #[error("malformed archive header: {0}")]
    MalformedHeader(String),
    #[error("archive payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("archive has no array named `{0}`")]
    MissingArray(String),

    // --- configuration ---
    #[error("config: {0}")]
    Config(#[from] crate::config::ConfigError),

    // --- geometry / shapes ---
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("shape mismatch: expected {expected:?}, got {got:?} ({context})")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
        context: &'static str,
    },

    // --- scoring / labels ---
    #[error("label set `{0}` is empty")]
    EmptyLabelSet(&'static str),
    #[error("empty logits vector")]
    EmptyLogits,
    #[error("no text embedding for label `{0}`")]
    MissingLabelEmbedding(String),
    #[error("label `{0}` is not in the negative label set")]
    UnknownNegativeLabel(String),
    #[error("label `{0}` is not in the learnable subset")]
    LabelNotLearnable(String),

    // --- diffusion ---
    #[error("invalid beta range [{start}, {end}]")]
    InvalidBetaRange { start: f64, end: f64 },
    #[error("timestep {t} out of range [1, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("backend `{0}` does not support gradient computation")]
    UnsupportedBackend(String),

    // --- prompts ---
    #[error("context extraction for `{0}` produced no elements beyond the main object")]
    EmptyContext(String),
    #[error("token `{0}` is not in the text-encoder vocabulary")]
    UnknownToken(String),
    #[error("prompt backend unavailable: {0}")]
    BackendUnavailable(String),

    // --- generation / training ---
    #[error("non-finite loss at refinement iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("training set is empty ({0})")]
    EmptyTrainingSet(&'static str),

    // --- mining ---
    #[error("lexicon too small: {available} candidates, {requested} requested")]
    LexiconTooSmall { available: usize, requested: usize },
    #[error("duplicate label `{0}` in lexicon")]
    DuplicateLexiconEntry(String),

    // --- evaluation ---
    #[error("score list `{0}` is empty")]
    EmptyScoreList(&'static str),
    #[error("ablation grid is empty")]
    EmptyGrid,
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("dataset category `{0}` has no images")]
    EmptyCategory(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact(_) | Error::MissingArray(_) => 3,
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
            Error::NonFiniteLoss { .. } => 4,
            _ => 1,
        }
    }
}
