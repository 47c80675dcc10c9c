//! Learning-based model predictive control with certified safety.
//!
//! The crate combines a Gaussian-process model of the error between a known
//! prior model and the true dynamics with ellipsoidal reachability analysis,
//! a receding-horizon controller that only applies inputs from certified
//! plans, and experiment drivers for an inverted pendulum and a cart-pole.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cautious;
pub mod constraints;
pub mod ellipsoid;
pub mod env;
pub mod error;
pub mod experiments;
pub mod gp;
pub mod linalg;
pub mod mpc;
pub mod optim;
pub mod performance;
pub mod propagation;

pub use error::{Error, Result};
