use alloc::string::String;

/// Error type shared by every module of the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Tensor or matrix dimensions do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A scalar parameter is outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// Input data is empty, non-finite or otherwise unusable.
    #[error("input error: {0}")]
    Input(String),
    /// An architecture or grid definition is inconsistent.
    #[error("config error: {0}")]
    Config(String),
    /// A factorization failed (matrix not positive definite, singular ...).
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Training produced a non-finite loss.
    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },
    /// A parameter set cannot be loaded into a model of a different shape.
    #[error("load error: {0}")]
    Load(String),
    /// The autodiff graph was used incorrectly.
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(alloc::format!($($arg)*)) };
}
pub(crate) use dim_err;
