use thiserror::Error;

/// Errors surfaced by the numerical layers and the model plumbing.
///
/// `Singular` and `NonFinite` abort computations (CLI exit code 2);
/// everything else is a contract violation reported to the caller.
#[derive(Debug, Error)]
pub enum SdictError {
    #[error("length {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("singular dictionary: Gram matrix is not positive definite (pivot {pivot} at column {col})")]
    Singular { col: usize, pivot: f64 },

    #[error("dictionary capacity exceeded: {requested} atoms but only {available} usable bins")]
    Capacity { requested: usize, available: usize },

    #[error("atom {atom} frequency {freq} is off the 1/{len} grid (nearest bin {bin}, error {err:.3e})")]
    OffGrid { atom: usize, freq: f64, len: usize, bin: usize, err: f64 },

    #[error("fft path requires a zero phase bias but atom {atom} has a nonzero entry")]
    BiasedFftPath { atom: usize },

    #[error("phase bias holds {have} rows but the sequence needs {need}")]
    BiasTooShort { have: usize, need: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SdictError>;
