use thiserror::Error;

/// Failure modes shared by every module of the crate.
#[derive(Debug, Error)]
pub enum WeakKamError {
    #[error("custom Lagrangian table is not strictly convex in velocity (x-row {row}, v-index {col})")]
    NonConvexModel { row: usize, col: usize },

    #[error("no window radius up to {ceiling} passes the superlinearity test")]
    WindowSearchFailed { ceiling: f64 },

    #[error("grid functions or kernels live on different grids")]
    GridMismatch,

    #[error("window radius {radius} does not reach the grid spacing {spacing}")]
    WindowTooSmall { radius: f64, spacing: f64 },

    #[error("discount product tau*delta = {0} is outside (0, 1)")]
    InvalidDiscount(f64),

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    MaxIterExceeded { iterations: usize, residual: f64 },

    #[error("kernel graph is not strongly connected")]
    DisconnectedGraph,

    #[error("delta schedule exhausted before the Cauchy gap fell below tolerance (last gap {gap:e})")]
    ScheduleExhausted { gap: f64 },

    #[error("reduced weights contain a cycle of sum {sum:e}; the effective action is inconsistent")]
    NegativeCycle { sum: f64 },

    #[error("chain too short: {0}")]
    ChainTooShort(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("refinement ladder is not converging: {0}")]
    LadderNotConverging(String),

    #[error("rate fit needs at least {needed} positive points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("property violated: {0}")]
    PropertyViolation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, WeakKamError>;
