use thiserror::Error;

/// Errors produced by the estimation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("design matrix is empty")]
    EmptyMatrix,
    #[error("design matrix entry ({row}, {col}) = {value} is not 0 or 1")]
    NonBinaryEntry { row: usize, col: usize, value: i64 },
    #[error("design matrix row {0} loads on no factor")]
    AllZeroRow(usize),
    #[error("design matrix rows have unequal lengths")]
    RaggedMatrix,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("factor index {index} out of range for K = {k}")]
    FactorIndexOutOfRange { index: usize, k: usize },
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("K = {0} exceeds the subset-enumeration limit of 20")]
    FactorCountTooLarge(usize),
    #[error("Gram matrix of item {item} is not positive definite after maximum jitter")]
    FactorizationFailed { item: usize },
    #[error("loading ({item}, {factor}) is nonzero where the design matrix is 0")]
    ZeroPatternViolated { item: usize, factor: usize },
    #[error("loading ({item}, {factor}) is constrained to zero")]
    ConstrainedLoading { item: usize, factor: usize },
    #[error("objective or gradient is not finite and could not be recovered")]
    NonFiniteObjective,
    #[error("data matrix has fewer than {k} nonzero singular values after centering")]
    RankDeficient { k: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("vector has zero sample variance")]
    DegenerateVariance,
    #[error("class labels are required but missing")]
    MissingLabels,
    #[error("J = {j} is not divisible by the scenario block count {blocks}")]
    IndivisibleJ { j: usize, blocks: usize },
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("could not draw well-conditioned factor scores after {0} attempts")]
    DegenerateDraw(usize),
    #[error("least-squares subproblem is singular")]
    SingularSubproblem,
    #[error("data contain a non-finite entry at ({row}, {col})")]
    NonFiniteData { row: usize, col: usize },
    #[error("at least {min} rows are required, got {got}")]
    TooFewRows { min: usize, got: usize },
    #[error("expected {expected} columns, found {got}")]
    WrongColumnCount { expected: usize, got: usize },
    #[error("data have {data} columns but the design matrix has {design} rows")]
    DimensionMismatch { data: usize, design: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
