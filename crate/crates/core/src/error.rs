use thiserror::Error;

/// Errors shared across the library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid caption: {0}")]
    InvalidCaption(String),

    #[error("token index {index} out of range for vocabulary of size {size}")]
    TokenOutOfRange { index: usize, size: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid grammar state: {0}")]
    InvalidGrammarState(String),

    #[error("no beam terminated within {max_len} steps ({partial} partial beams alive)")]
    NoTerminatedBeam { max_len: usize, partial: usize },

    #[error("aggregation span is empty after EOS exclusion")]
    EmptyAggregationSpan,

    #[error("no reference caption shares the prefix at position {k}")]
    NoMatchingPrefix { k: usize },

    #[error("estimator shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    NonFiniteLoss { epoch: usize },

    #[error("scored set has no positive labels")]
    NoPositiveLabels,

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("span [{start}, {end}) out of bounds for caption of length {len}")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CoreError>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("malformed record: {0}")]
    MalformedRecord(String),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoreError>;
