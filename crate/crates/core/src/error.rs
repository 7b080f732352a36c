use alloc::string::String;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("degenerate embedding: projector output has zero norm")]
    DegenerateEmbedding,
    #[error("invalid length: {0}")]
    InvalidLength(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid shift {shift} for {bins} mel bins")]
    InvalidShift { shift: i64, bins: usize },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("step {step} outside schedule range [0, {total}]")]
    InvalidStep { step: u64, total: u64 },
    #[error("poisoned step: non-finite gradient for `{0}`")]
    PoisonedStep(String),
    #[error("unsupported modality: {0}")]
    UnsupportedModality(String),
    #[error("average precision undefined: no positive labels")]
    UndefinedAp,
    #[error("AUC undefined: both classes must be present")]
    UndefinedAuc,
    #[error("d-prime is infinite for AUC = {0}")]
    InfiniteDPrime(f64),
    #[error("label/feature mismatch: {0}")]
    LabelMismatch(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

pub type Result<T> = core::result::Result<T, Error>;
