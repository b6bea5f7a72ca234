use thiserror::Error;

#[derive(Debug, Error)]
pub enum VkbError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("missing mention: {0}")]
    MissingMention(String),
    #[error("cannot supply {needed} hard negatives for pair ({topic}, {target}), found {found}")]
    InsufficientNegatives {
        topic: u32,
        target: u32,
        needed: usize,
        found: usize,
    },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("unknown relation {0}")]
    UnknownRelation(String),
    #[error("no pair in the vocabulary has a supporting passage")]
    EmptyMemory,
    #[error("entity set is empty")]
    EmptySet,
    #[error("hop {hop} out of range (max {max})")]
    HopOutOfRange { hop: usize, max: usize },
    #[error("hop {0} produced no entities")]
    EmptyIntermediate(usize),
    #[error("no candidate matches the anchor pair")]
    NoPositive,
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("insufficient examples: {0}")]
    InsufficientExamples(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl VkbError {
    /// True for errors caused by bad input data rather than a bug or I/O failure.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, VkbError::Io(_) | VkbError::NonFiniteGradient(_))
    }
}

impl From<serde_json::Error> for VkbError {
    fn from(e: serde_json::Error) -> Self {
        VkbError::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, VkbError>;
