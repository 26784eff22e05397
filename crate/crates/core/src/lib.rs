//! Adversarial visual imitation learning with patch-level discriminator
//! rewards.
//!
//! A fully-convolutional discriminator scores every receptive-field patch of
//! an observation pair; the patch scores are turned into rewards, aggregated
//! and optionally regularized by how closely the agent's patch distribution
//! matches the expert's. A pixel actor-critic learns from those rewards
//! alone, and the patch rewards can be mapped back onto pixels for
//! inspection.

pub mod agent;
pub mod discriminator;
pub mod env;
pub mod error;
pub mod explain;
pub mod nets;
pub mod parallel;
pub mod reward;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
