use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("duplicate domain id `{0}`")]
    DuplicateDomain(String),
    #[error("unknown domain id `{0}`")]
    UnknownDomain(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("sequence {0} does not begin with the start-of-sequence token")]
    MissingStartToken(usize),
    #[error("vector is not unit-norm (norm = {0})")]
    NotNormalized(f64),
    #[error("zero vector cannot be normalized")]
    ZeroVector,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),
    #[error("data access violation: {0}")]
    AccessViolation(String),
    #[error("label spaces differ: {0}")]
    LabelSpace(String),
    #[error("EWC penalty requested before any anchor was set")]
    NoAnchor,
    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),
}
