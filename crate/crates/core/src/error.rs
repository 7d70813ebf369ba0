use thiserror::Error;

/// Failures while decoding a PTB tensor file or a PGM plane.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated header: no terminating newline")]
    TruncatedHeader,
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("truncated payload: {trailing} trailing bytes do not form a whole f32 value")]
    TruncatedPayload { trailing: usize },
    #[error("size mismatch: header declares {expected} values but payload holds {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("malformed PGM: {0}")]
    Pgm(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("non-hermitian spectrum: imaginary residue {residue:.3e} exceeds tolerance {tolerance:.3e}")]
    SymmetryViolation { residue: f64, tolerance: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),
}

impl Error {
    /// True for failures of the numerics (fits, symmetry, degenerate statistics)
    /// as opposed to bad files or malformed arguments.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SymmetryViolation { .. }
                | Error::InsufficientData(_)
                | Error::DegenerateFit(_)
                | Error::DegenerateInput(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
