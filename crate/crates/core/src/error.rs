use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the pipeline.
///
/// The variants map one-to-one onto the CLI exit-code taxonomy (see
/// [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network description: {0}")]
    Schema(String),

    #[error("network graph is disconnected: bus `{0}` is unreachable")]
    Disconnected(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("equilibrium load voltage must be positive (bus {bus}: {voltage})")]
    NonPositiveVoltage { bus: usize, voltage: f64 },

    #[error("equilibrium too close to ellipsoid boundary at load {index}: v + inf Δv = {margin}")]
    BoundaryViolation { index: usize, margin: f64 },

    #[error("certification failed: {0}")]
    CertificationInfeasible(String),

    #[error("synthesis infeasible because of the stability voltage floor: {0}")]
    FloorInfeasible(String),

    #[error("synthesis infeasible under operating bounds alone: {0}")]
    BoundInfeasible(String),

    #[error("power flow did not converge after {iterations} iterations (residual {residual:e})")]
    PowerFlowDivergence { iterations: usize, residual: f64 },

    #[error("power flow converged to a low-voltage branch (min voltage {0})")]
    LowVoltageBranch(f64),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("simulation failure: {0}")]
    Simulation(String),

    #[error("falsification: {0}")]
    Falsified(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    ///
    /// `0` success, `2` parse, `3` infeasible, `4` solver failure,
    /// `5` falsification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema(_)
            | Error::Disconnected(_)
            | Error::Dimension(_)
            | Error::Json(_)
            | Error::Io(_) => 2,
            Error::NonPositiveVoltage { .. }
            | Error::BoundaryViolation { .. }
            | Error::CertificationInfeasible(_)
            | Error::FloorInfeasible(_)
            | Error::BoundInfeasible(_)
            | Error::LowVoltageBranch(_) => 3,
            Error::PowerFlowDivergence { .. } | Error::Solver(_) | Error::Simulation(_) => 4,
            Error::Falsified(_) => 5,
        }
    }
}
