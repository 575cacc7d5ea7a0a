//! Time-optimal control of linear systems through the generalized Hopf formula.
//!
//! The crate evaluates the viscosity solution of the Hamilton–Jacobi equation
//! for linear dynamics with a norm-ball control set by minimizing the Hopf
//! objective over the initial costate, instead of sweeping a state grid. On top
//! of that it provides:
//!
//! - [`timeopt`]: minimum time-to-reach by a safeguarded Newton iteration on the
//!   horizon, with Pontryagin control extraction and delay-aware schedules that
//!   lock the first `tau` seconds of every new plan to the previous one.
//! - [`channel`]: Gaussian-process estimation of a channel-to-noise ratio field
//!   whose transmitter location is unknown, using a path-loss kernel
//!   marginalized over a uniform prior.
//! - [`sim`]: a closed-loop re-planning simulation that ties the two together.

pub mod channel;
pub mod error;
pub mod hopf;
pub mod lbfgs;
pub mod lincontrol;
pub mod quadrature;
pub mod sim;
pub mod timeopt;

pub use error::{Error, Result};
