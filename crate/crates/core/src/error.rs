use alloc::string::String;

/// Errors raised by the core numerics.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("degenerate quantization range [{min}, {max}]")]
    DegenerateRange { min: f64, max: f64 },
    #[error("activations are stale: graph version {graph} but forward ran at {acts}")]
    Stale { graph: u64, acts: u64 },
    #[error("loss node {0} is not scalar")]
    NotScalar(usize),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("checkpoint decode failed: {0}")]
    Decode(String),
    #[error("diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(alloc::format!($($arg)*)) };
}
pub(crate) use shape_err;
