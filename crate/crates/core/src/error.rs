use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing cell for unit {unit} in year {year}")]
    MissingCell { unit: String, year: i32 },

    #[error("duplicate cell for unit {unit} in year {year}")]
    DuplicateCell { unit: String, year: i32 },

    #[error("non-finite value for unit {unit} in year {year}")]
    NonFiniteValue { unit: String, year: i32 },

    #[error("units observed over different year sets: {0}")]
    RaggedYears(String),

    #[error("degenerate (zero-variance) units: {}", .0.join(", "))]
    DegenerateUnit(Vec<String>),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("unknown unit id {0:?}")]
    UnknownUnit(String),

    #[error("self loop on unit {0:?}")]
    SelfLoop(String),

    #[error("every unit was removed as an island")]
    EmptyGraph,

    #[error("eigensolver failed to converge at index {index} after {iterations} iterations")]
    ConvergenceFailure { index: usize, iterations: usize },

    #[error("rho = {rho} outside admissible interval ({lo}, {hi})")]
    RhoOutOfBounds { rho: f64, lo: f64, hi: f64 },

    #[error("singular regressor matrix: {0}")]
    SingularRegressor(String),

    #[error("linear solve failed, residual {residual:e}")]
    SolveFailure { residual: f64 },

    #[error("non-finite activation at step {step}")]
    NonFiniteActivation { step: usize },

    #[error("non-finite gradient at epoch {epoch}, batch {batch}")]
    NonFiniteGradient { epoch: usize, batch: usize },

    #[error("unit sets do not match: {0}")]
    UnitMismatch(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
