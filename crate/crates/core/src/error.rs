use thiserror::Error;

/// Errors raised by the registration engine.
#[derive(Debug, Error)]
pub enum RegError {
    #[error("invalid scale: {0}")]
    InvalidScale(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty region: {0}")]
    EmptyRegion(String),
    #[error("input too small: {0}")]
    TooSmall(String),
    #[error("invalid tape: {0}")]
    InvalidTape(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("optimisation aborted at step {step}: {reason}")]
    OptimAbort { step: usize, reason: String },
    #[error("optimisation aborted at scale {scale_index} (scale {scale}): {source}")]
    ScaleAbort {
        scale_index: usize,
        scale: String,
        #[source]
        source: Box<RegError>,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated file: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RegError {
    /// True for failures of the optimiser itself (divergence, non-finite loss).
    pub fn is_optim_abort(&self) -> bool {
        match self {
            RegError::OptimAbort { .. } => true,
            RegError::ScaleAbort { source, .. } => source.is_optim_abort(),
            _ => false,
        }
    }

    pub fn is_parse_error(&self) -> bool {
        matches!(
            self,
            RegError::BadMagic { .. }
                | RegError::Truncated { .. }
                | RegError::Unsupported(_)
                | RegError::Header(_)
        )
    }
}

pub type Result<T, E = RegError> = std::result::Result<T, E>;
