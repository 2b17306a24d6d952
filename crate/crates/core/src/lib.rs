//! Composite control-barrier-function safety layer for reinforcement learning.
//!
//! Multiple obstacle barriers are merged into a single Log-Sum-Exp composite
//! barrier so that the CBF quadratic program has one constraint and a
//! closed-form solution. The closed form is used as the last layer of a soft
//! actor-critic policy, with its analytic Jacobian carrying gradients back
//! into the policy network. A dense dual-ascent QP solver for the original
//! multi-constraint program serves as oracle and timing baseline.

pub mod barriers;
pub mod bench;
pub mod check;
pub mod config;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod filter;
pub mod learner;
pub mod qp;
pub mod trace;

pub use error::{Error, Result};
