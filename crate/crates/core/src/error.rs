use thiserror::Error;

use crate::moments::Dims;
use crate::s2sls::Phase;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema mismatch: expected (d_beta={}, d_g={}), found (d_beta={}, d_g={})",
        expected.d_beta, expected.d_g, found.d_beta, found.d_g)]
    Schema { expected: Dims, found: Dims },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("instrument Gram matrix is singular (smallest eigenvalue {min_eigenvalue:e}); pass a positive eta0 to regularize")]
    SingularInitialization { min_eigenvalue: f64 },

    #[error("numerical breakdown at step {step}: {detail}")]
    NumericalBreakdown { step: u64, detail: String },

    #[error("iterate diverged at step {step} (|beta| = {norm:e})")]
    DivergenceDetected { step: u64, norm: f64 },

    #[error("operation requires phase {expected:?}, state is in {found:?}")]
    InvalidPhase { expected: Phase, found: Phase },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("random-scaling variance matrix is singular")]
    SingularLrv,

    #[error("model is not over-identified (d_g = {d_g}, d_beta = {d_beta})")]
    NotOveridentified { d_g: usize, d_beta: usize },

    #[error("degenerate initialization sample: every scaled moment norm is zero")]
    DegenerateInitialization,

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("ingest error at line {line}: {message}")]
    Ingest { line: u64, message: String },

    #[error("step {index}: {source}")]
    AtStep {
        index: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_step(self, index: u64) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep { index, source: Box::new(e) },
        }
    }

    /// Strips any [`Error::AtStep`] wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            e => e,
        }
    }
}
