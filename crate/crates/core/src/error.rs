use thiserror::Error;

/// Errors raised by model construction, simulation, fitting and identification.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    Validation(String),

    #[error("coefficient {name} = {value} must be strictly positive (floor {floor})")]
    NonPositiveRate {
        name: String,
        value: f64,
        floor: f64,
    },

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("insufficient data: {samples} samples cannot determine {params} parameters")]
    InsufficientData { samples: usize, params: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("excretion rate not identifiable: sum of beta/lambda is {denominator:e}")]
    NonIdentifiableExcretion { denominator: f64 },

    #[error(
        "identifiability breakdown at step {step}: {quantity} = {value:e} (threshold {threshold:e})"
    )]
    Breakdown {
        step: usize,
        quantity: String,
        value: f64,
        threshold: f64,
    },

    #[error("fit did not converge after {iterations} iterations: J = {j_value:e}, scaled gradient {gradient:e}")]
    NotConverged {
        iterations: usize,
        j_value: f64,
        gradient: f64,
    },

    #[error("{failed} of {total} noiseless runs exceeded the relative tolerance {tolerance:e}")]
    ToleranceExceeded {
        failed: usize,
        total: usize,
        tolerance: f64,
    },

    #[error("replicate with seed {seed} failed: {message}")]
    Replicate {
        seed: u64,
        code: u8,
        message: String,
    },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// Process exit status: 2 validation, 3 fit non-convergence,
    /// 4 identifiability breakdown, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Validation(_)
            | Error::NonPositiveRate { .. }
            | Error::InsufficientData { .. }
            | Error::InvalidInput(_)
            | Error::Format(_) => 2,
            Error::NotConverged { .. } => 3,
            Error::DegenerateSpectrum(_)
            | Error::NonIdentifiableExcretion { .. }
            | Error::Breakdown { .. } => 4,
            Error::Replicate { code, .. } => *code,
            Error::LinearAlgebra(_) | Error::ToleranceExceeded { .. } | Error::Io(_) => 1,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
