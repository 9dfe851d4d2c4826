use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite entry in {matrix} at row {row}, column {col}")]
    NonFiniteEntry { matrix: &'static str, row: usize, col: usize },
    #[error("zero-variance column {col} in {matrix}")]
    ZeroVarianceColumn { matrix: &'static str, col: usize },
    #[error("covariate matrix is rank deficient")]
    RankDeficientCovariates,
    #[error("aggregate is numerically zero")]
    ZeroAggregate,
    #[error("aggregates are collinear: 1 - alpha^2 = {0:.3e} below floor")]
    CollinearAggregates(f64),
    #[error("|tau| = {0:.3e} below floor")]
    TauBelowFloor(f64),
    #[error("invalid penalty configuration: {0}")]
    InvalidPenalty(String),
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
    #[error("block system is singular")]
    SingularBlockSystem,
    #[error("no admissible solution among {restarts} restarts")]
    NoAdmissibleSolution { restarts: usize },
    #[error("augmented Lagrangian increased by {increase:.3e} at iteration {iteration}")]
    NonDescentDetected { iteration: usize, increase: f64 },
    #[error("invalid fold count {k} for n = {n}")]
    InvalidFoldCount { n: usize, k: usize },
    #[error("every grid cell failed")]
    AllCellsFailed,
    #[error("invalid rho {0}")]
    InvalidRho(f64),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("degenerate regime: gamma + alpha * eta = 0")]
    DegenerateRegime,
    #[error("empty input")]
    EmptyInput,
    #[error("oracle grid has no admissible point")]
    InfeasibleEverywhere,
    #[error("non-finite function value during differencing")]
    NonFiniteEvaluation,
    #[error("moment matrix deviates from rank one (relative residual {0:.3e})")]
    RankOneViolation(f64),
    #[error("identified |tau| below floor")]
    DegenerateTau,
    #[error("{0} self-check(s) failed")]
    SelfCheckFailed(usize),
    #[error("parse error at row {row}, column {col}: {msg}")]
    ParseError { row: usize, col: usize, msg: String },
    #[error("ragged rows: row {row} has {found} fields, expected {expected}")]
    RaggedRows { row: usize, found: usize, expected: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Stable process exit code for each error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) => 3,
            Error::ParseError { .. } | Error::RaggedRows { .. } => 4,
            Error::DimensionMismatch(_)
            | Error::NonFiniteEntry { .. }
            | Error::ZeroVarianceColumn { .. }
            | Error::RankDeficientCovariates => 5,
            Error::InvalidPenalty(_)
            | Error::InvalidOptions(_)
            | Error::InvalidFoldCount { .. }
            | Error::InvalidRho(_) => 6,
            Error::ZeroAggregate
            | Error::CollinearAggregates(_)
            | Error::TauBelowFloor(_)
            | Error::SingularBlockSystem => 7,
            Error::NoAdmissibleSolution { .. } | Error::AllCellsFailed => 8,
            Error::NonDescentDetected { .. } => 9,
            Error::NotPositiveDefinite | Error::DegenerateRegime | Error::EmptyInput => 10,
            Error::InfeasibleEverywhere
            | Error::NonFiniteEvaluation
            | Error::RankOneViolation(_)
            | Error::DegenerateTau => 11,
            Error::SelfCheckFailed(_) => 12,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
