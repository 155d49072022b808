//! Recurrent reinforcement-learning laboratory built around a
//! perception/prediction/reaction agent with a slow-ticking recurrent
//! core, trained by actor-critic with off-policy corrected returns.
//!
//! Everything is deterministic: dense f64 math with fixed reduction
//! order, explicitly seeded RNG streams, and checkpoints that restore
//! training bit-for-bit.

pub mod agents;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod cores;
pub mod envs;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use autograd::{finite_diff_check, FdReport, Gradients, MatLayout, ParamStore, Tape, Tensor};
pub use error::{Error, Result};
