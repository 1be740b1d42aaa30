use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix has rank zero")]
    RankZero,

    #[error("matrix is rank deficient (smallest singular value {smallest:e}, largest {largest:e})")]
    RankDeficient { smallest: f64, largest: f64 },

    #[error("channel vector of user {user} is zero")]
    ZeroChannel { user: usize },

    #[error("requested output power {requested:e} W exceeds the maximum reachable {max_reachable:e} W")]
    Saturated { requested: f64, max_reachable: f64 },

    #[error("antenna {antenna}: output power {rho_tx:e} W exceeds the limit {rho_max:e} W")]
    ConstraintViolation {
        antenna: usize,
        rho_tx: f64,
        rho_max: f64,
    },

    #[error("closed-form gradient supports third-order amplifiers only (got order {order})")]
    UnsupportedOrder { order: usize },

    #[error("target sum rate {target} bits/c.u. unreachable; best achieved {achieved} bits/c.u.")]
    RateUnreachable { target: f64, achieved: f64 },

    #[error("distortion covariance not PSD: eigenvalue {min_eigenvalue:e} against trace {trace:e}")]
    NotPositiveSemidefinite { min_eigenvalue: f64, trace: f64 },

    #[error("antenna {antenna} has a zero precoder row; consumed power is not differentiable there")]
    ZeroRow { antenna: usize },

    #[error("energy efficiency undefined: zero consumed power with nonzero rate")]
    ZeroConsumedPower,

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
