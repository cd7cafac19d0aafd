use thiserror::Error;

/// Errors raised across the solver, recovery and verification layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid marginal: {0}")]
    InvalidMarginal(String),

    #[error("empty input")]
    EmptyInput,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Consecutive marginals of one asset are not in convex order.
    /// `period` and `asset` are 1-based; `witness` is a point where the
    /// potential-function criterion fails.
    #[error("marginals of asset {asset} at maturities {period} and {} are not in convex order (witness x = {witness})", period + 1)]
    ConvexOrderViolation {
        period: usize,
        asset: usize,
        witness: f64,
    },

    #[error("grid of {paths} paths exceeds the configured budget of {budget}")]
    GridBudgetExceeded { paths: u128, budget: u128 },

    #[error("payoff parse error at byte {pos}: {msg}")]
    PayoffParseError { pos: usize, msg: String },

    #[error("payoff is not finite on path {path:?}")]
    NonFiniteCost { path: Vec<f64> },

    #[error("declared bound violated on path {path:?}: |c| = {cost_abs} > {bound}")]
    BoundViolation {
        path: Vec<f64>,
        cost_abs: f64,
        bound: f64,
    },

    #[error("linear program is infeasible (phase-one residual {residual:e})")]
    Infeasible { residual: f64 },

    #[error("linear program is unbounded")]
    Unbounded,

    #[error("iteration limit of {0} reached")]
    IterationLimit(usize),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("entropic iteration stalled at violation {violation:e} after {iterations} sweeps")]
    Stalled { violation: f64, iterations: usize },

    #[error("numeric underflow in entropic iteration: {0}; increase epsilon")]
    NumericUnderflow(String),

    #[error("invalid epsilon schedule: {0}")]
    InvalidSchedule(String),

    #[error("dual multipliers inconsistent: {msg} (worst path {path:?}, violation {violation:e})")]
    InconsistentDuals {
        msg: String,
        path: Vec<f64>,
        violation: f64,
    },

    #[error("anchor component {asset} = {value} lies outside the domain of maturities {period} -> {}", period + 1)]
    AnchorOutsideDomain {
        period: usize,
        asset: usize,
        value: f64,
    },

    #[error("envelope recovery supports d <= 2 assets, got {0}")]
    DimensionUnsupported(usize),

    #[error("degenerate envelope: {0}")]
    EnvelopeDegenerate(String),

    #[error("artifact belongs to a different instance (expected {expected}, found {found})")]
    MismatchedInstance { expected: String, found: String },

    /// Failure of one route of a cross-validation run.
    #[error("{route}: {source}")]
    Route {
        route: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl Error {
    /// Tags the error with the computation that raised it.
    pub fn in_route(self, route: impl Into<String>) -> Self {
        Error::Route {
            route: route.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping route tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Route { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
