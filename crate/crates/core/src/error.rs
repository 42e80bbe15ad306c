//! Error type shared across the crate.

use std::fmt;

/// Which treatment arm of a cell a message refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Treated,
    Control,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Treated => write!(f, "treated"),
            Arm::Control => write!(f, "control"),
        }
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    #[error("covariate domain must have at least one level")]
    EmptyDomain,

    #[error("duplicate level `{0}` in covariate domain")]
    DuplicateLevel(String),

    #[error("level `{0}` is not part of the covariate domain")]
    UnknownLevel(String),

    #[error("level `{0}` has no entry in the input")]
    MissingLevel(String),

    #[error("{0}")]
    DomainMismatch(String),

    #[error("stratum bounds must be contiguous half-open intervals with lo < hi")]
    InvalidStrata,

    #[error("stratum edges must be strictly increasing with at least two entries")]
    InvalidStratumEdges,

    #[error("value {0} lies outside the stratified support")]
    ValueOutOfSupport(f64),

    #[error("all weights are zero; cannot normalize an allocation")]
    AllZeroWeights,

    #[error("negative weight {value} at level `{level}`")]
    NegativeWeight { level: String, value: f64 },

    #[error("propensity at level `{level}` must lie strictly inside (0, 1); got {value}")]
    InvalidPropensity { level: String, value: f64 },

    #[error("sigma at level `{level}` must be nonnegative and finite; got {value}")]
    InvalidSigma { level: String, value: f64 },

    #[error("variance at level `{level}` must be nonnegative and finite; got {value}")]
    InvalidVariance { level: String, value: f64 },

    #[error("unit cost at level `{level}` must be positive; got {value}")]
    InvalidCost { level: String, value: f64 },

    #[error("budget must be positive; got {0}")]
    InvalidBudget(f64),

    #[error("outcome model entries must be finite")]
    NonFiniteModel,

    #[error("bandwidth must be positive and finite; got {0}")]
    InvalidBandwidth(f64),

    #[error("level `{0}` is not numeric; kernel smoothing needs ordinal levels")]
    NonNumericLevel(String),

    #[error("parameter `{name}` must lie in [{lo}, {hi}]; got {value}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("no trial units at level `{0}`")]
    EmptyCell(String),

    #[error("dataset contains no trial units")]
    EmptyTrial,

    #[error("positivity violation at level `{0}`: required mass with no trial support")]
    PositivityViolation(String),

    #[error("no unit receives positive kernel weight around x = {0}")]
    ZeroKernelMass(f64),

    #[error("degenerate variability: every weighted sigma is zero")]
    DegenerateVariability,

    #[error("level `{level}` has fewer than two {arm} units; cannot estimate a variance")]
    InsufficientCell { level: String, arm: Arm },

    #[error("unit `{0}` has no recorded outcome")]
    MissingOutcome(String),

    #[error("cannot draw {requested} units from {available} available")]
    InfeasibleDraw { requested: usize, available: usize },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("regression design matrix is singular; cannot impute outcomes")]
    SingularRegression,

    #[error("missing required column `{0}`")]
    SchemaError(String),

    #[error("row {row}, column `{column}`: {message}")]
    ParseError {
        row: usize,
        column: String,
        message: String,
    },

    #[error("io error on `{path}`: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable tag, used by the CLI's structured stderr output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyDomain => "empty_domain",
            Error::DuplicateLevel(_) => "duplicate_level",
            Error::UnknownLevel(_) => "unknown_level",
            Error::MissingLevel(_) => "missing_level",
            Error::DomainMismatch(_) => "domain_mismatch",
            Error::InvalidStrata => "invalid_strata",
            Error::InvalidStratumEdges => "invalid_stratum_edges",
            Error::ValueOutOfSupport(_) => "value_out_of_support",
            Error::AllZeroWeights => "all_zero_weights",
            Error::NegativeWeight { .. } => "negative_weight",
            Error::InvalidPropensity { .. } => "invalid_propensity",
            Error::InvalidSigma { .. } => "invalid_sigma",
            Error::InvalidVariance { .. } => "invalid_variance",
            Error::InvalidCost { .. } => "invalid_cost",
            Error::InvalidBudget(_) => "invalid_budget",
            Error::NonFiniteModel => "non_finite_model",
            Error::InvalidBandwidth(_) => "invalid_bandwidth",
            Error::NonNumericLevel(_) => "non_numeric_level",
            Error::OutOfRange { .. } => "out_of_range",
            Error::EmptyCell(_) => "empty_cell",
            Error::EmptyTrial => "empty_trial",
            Error::PositivityViolation(_) => "positivity_violation",
            Error::ZeroKernelMass(_) => "zero_kernel_mass",
            Error::DegenerateVariability => "degenerate_variability",
            Error::InsufficientCell { .. } => "insufficient_cell",
            Error::MissingOutcome(_) => "missing_outcome",
            Error::InfeasibleDraw { .. } => "infeasible_draw",
            Error::DegenerateFit(_) => "degenerate_fit",
            Error::SingularRegression => "singular_regression",
            Error::SchemaError(_) => "schema_error",
            Error::ParseError { .. } => "parse_error",
            Error::Io { .. } => "io_error",
        }
    }
}
