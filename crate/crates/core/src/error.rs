use std::fmt;

/// Errors produced by the solvers and harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("domain mask is disconnected: {components} components (largest has {largest} cells)")]
    Disconnected { components: usize, largest: usize },
    #[error("domain has no interior cells")]
    EmptyDomain,
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("domain has no boundary faces")]
    EmptyBoundary,
    #[error("{name} = {value} out of range: {constraint}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        constraint: &'static str,
    },
    #[error("mobility violates {condition}: {detail}")]
    ConditionViolated {
        condition: Condition,
        detail: String,
    },
    #[error("mass mismatch: {mass0} vs {mass1} (relative gap {gap:e})")]
    MassMismatch { mass0: f64, mass1: f64, gap: f64 },
    #[error("incompatible right-hand side: integral {integral:e} exceeds {bound:e}")]
    Incompatible { integral: f64, bound: f64 },
    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },
    #[error("negative input density: min {0:e}")]
    NegativeDensity(f64),
    #[error("instability detected in {0}; try a smaller dt")]
    Unstable(&'static str),
    #[error("density {value} exceeds entropy tabulation cap {cap}")]
    BeyondCap { value: f64, cap: f64 },
    #[error("finite-difference step too large: Richardson disagreement {disagreement:.3} in {what}")]
    StepTooLarge { what: &'static str, disagreement: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
}

/// Structural conditions on a regularized mobility.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    /// Lipschitz mobility with semi-convex square.
    Mlsc,
    /// Bounded ratio of (m')^2 to |m'' m|.
    Ma,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Mlsc => write!(f, "(M-LSC)"),
            Condition::Ma => write!(f, "(M-A)"),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
