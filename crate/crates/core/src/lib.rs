//! Two-time-scale projected stochastic (sub)gradient descent for layered
//! objectives `f(M, w)` with a nonlinear body `M` and a linear head `w`,
//! together with the reduced objective `Φ(M) = f(M, w*(M))`, its Moreau
//! envelope, gradient-TD policy evaluation with a two-layer network, and
//! loss-landscape slicing.

pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod landscape;
pub mod numcore;
pub mod optimizer;
pub mod problems;
pub mod ratefit;
pub mod stackelberg;
pub mod tdc;

pub use error::{Error, Result};
