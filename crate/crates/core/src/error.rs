use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("tokenizer training error: {0}")]
    TokenizerTraining(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceLength { len: usize, max: usize },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at stage {stage} step {step}: {reason} (last good checkpoint: {})",
        last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Diverged {
        stage: String,
        step: usize,
        reason: String,
        last_good: Option<PathBuf>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable identifier used by the CLI's machine-parsable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidBatch(_) => "invalid_batch",
            Error::Encoding(_) => "encoding",
            Error::TokenizerTraining(_) => "tokenizer_training",
            Error::Vocabulary(_) => "vocabulary",
            Error::Config(_) => "config",
            Error::EmptyInput(_) => "empty_input",
            Error::SequenceLength { .. } => "sequence_length",
            Error::Generation(_) => "generation",
            Error::Pairing(_) => "pairing",
            Error::Checkpoint(_) => "checkpoint",
            Error::Diverged { .. } => "diverged",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
        }
    }
}
