use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("matrix is not positive definite: pivot {pivot} is {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is singular: pivot {pivot} is {value:e}")]
    Singular { pivot: usize, value: f64 },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("activation {activation} is not allowed here: {reason}")]
    ActivationNotAllowed { activation: String, reason: String },

    #[error("lower-level problem is not strongly convex: {0}")]
    NotStronglyConvex(String),

    #[error("{solver} did not converge after {iters} iterations (residual {residual:e})")]
    NoConvergence {
        solver: &'static str,
        iters: usize,
        residual: f64,
    },

    #[error("prox solver stagnated after {iters} iterations (residual {residual:e})")]
    ProxStagnation {
        iters: usize,
        residual: f64,
        last_iterate: Vec<f64>,
    },

    #[error("non-finite update at iteration {k}: {detail}")]
    Diverged {
        k: usize,
        detail: String,
        body: Vec<f64>,
        head: Vec<f64>,
    },

    #[error("feature covariance C(M) has smallest eigenvalue {lambda_min:e}, below the floor {floor:e}; C(M) must stay uniformly positive definite")]
    FeatureCovariance { lambda_min: f64, floor: f64 },

    #[error("inconsistent results: {0}")]
    Inconsistent(String),

    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("{0}")]
    Io(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
