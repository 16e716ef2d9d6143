use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("all points coincide; cannot normalize")]
    AllPointsIdentical,
    #[error("cloud contains non-finite coordinates")]
    NonFinite,
    #[error("requested {requested} samples from a cloud of {available} points")]
    GTooLarge { requested: usize, available: usize },
    #[error("requested {requested} neighbours from a cloud of {available} points")]
    KTooLarge { requested: usize, available: usize },
    #[error("index {index} out of range for {len} points")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("mask ratio {0} outside [0, 1)")]
    MaskRatioOutOfRange(f64),
    #[error("point set is empty")]
    EmptySet,
    #[error("cloud has {available} points, corruption needs at least {needed}")]
    CloudTooSmall { needed: usize, available: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no visible tokens")]
    EmptyVisibleSet,
    #[error("no masked tokens to reconstruct")]
    NoMaskedTokens,
    #[error("optimizer state does not match parameters")]
    StateMismatch,
    #[error("corrupt snapshot blob: {0}")]
    CorruptBlob(String),
    #[error("training diverged at epoch {epoch}")]
    DivergenceDetected { epoch: usize },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
}
