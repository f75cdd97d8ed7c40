use thiserror::Error;

/// Failure modes shared by every solver in the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("degenerate column {column}: pivot norm {norm:e}")]
    Degenerate { column: usize, norm: f64 },

    #[error("eigenvalue iteration did not converge within {iterations} iterations")]
    EigenNonConvergence { iterations: usize },

    #[error("step size underflow at t = {t}: h = {h:e}")]
    StepUnderflow { t: f64, h: f64 },

    #[error("non-finite right-hand side at t = {t}")]
    Evaluation { t: f64 },

    #[error("time {t} outside the integrated span [{lo}, {hi}]")]
    Range { t: f64, lo: f64, hi: f64 },

    #[error("Newton iteration failed to converge (residual {residual:e})")]
    Convergence { residual: f64 },

    #[error("mesh budget of {max_nodes} nodes exceeded (max residual {residual:e})")]
    MeshBudget { max_nodes: usize, residual: f64 },

    #[error("singular collocation Jacobian")]
    Singular,

    #[error("state rewrite still active after {rounds} rounds")]
    RewriteCycle { rounds: usize },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("spectral gap violated: kappa = {kappa}")]
    GapViolation { kappa: f64 },

    #[error("empty sample")]
    EmptySample,
}

pub type Result<T> = std::result::Result<T, Error>;
