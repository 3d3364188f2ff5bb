use thiserror::Error;

/// Errors raised anywhere in the solver stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector conformance mismatch: {0}")]
    Conformance(String),

    #[error("linear combination needs at least one term")]
    EmptyCombination,

    #[error("collective protocol violation: {0}")]
    Protocol(String),

    #[error("communication failure: {0}")]
    Communication(String),

    #[error("exchange not finished")]
    NotReady,

    #[error("index out of range: {0}")]
    Range(String),

    #[error("boundary condition misuse: {0}")]
    BoundaryMisuse(String),

    #[error("equation of state undefined at local cell {cell}: {detail}")]
    EosDomain { cell: usize, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("singular Jacobian block at cell {cell}")]
    SingularBlock { cell: usize },

    #[error("nonlinear solver did not converge: {0}")]
    NonConvergence(String),

    #[error("time evolution failed at t = {t}: {reason}")]
    Evolution { t: f64, reason: String },

    #[error("fatal solver failure in {phase} phase, slow step {step}: {source}")]
    Fatal {
        phase: &'static str,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("refinement study: {0}")]
    Study(String),

    #[error("arithmetic error: {0}")]
    Arithmetic(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures a step-size controller may recover from by retrying.
    pub fn is_recoverable(&self) -> bool {
        matches!(self, Error::NonConvergence(_) | Error::SingularBlock { .. })
    }
}
