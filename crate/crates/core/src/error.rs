use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("control evaluator returned a non-finite value at s = {s}")]
    Propagation { s: f64 },

    #[error("target not reachable within horizon cap t_max = {t_max} s")]
    HorizonUnreachable { t_max: f64 },

    #[error("min-time iteration did not converge after {iterations} steps (last t = {last_t}, phi = {last_phi})")]
    NonConvergence {
        iterations: usize,
        last_t: f64,
        last_phi: f64,
    },

    #[error("channel fit failed: {0}")]
    Fit(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
