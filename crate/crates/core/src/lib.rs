//! Cooperative multi-agent reinforcement learning with controllable agents
//! that must keep coordinating when their uncontrolled teammates switch
//! policy in the middle of an episode.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`env`]: open multi-agent gridworlds (level-based foraging and a
//!   discrete predator-prey) with a waiting-time scheduler that swaps the
//!   active teammate set and policy.
//! - [`teammates`]: scripted and learned teammate policies, teammate groups
//!   and their trajectory buffers.
//! - [`crp`]: trajectory encoder/decoder and Chinese-restaurant-process
//!   assignment of teammate groups to behavioural clusters.
//! - [`context`]: global and local context encoders and the auxiliary
//!   context losses.
//! - [`qmix`]: recurrent agent Q-networks, monotonic mixer and TD loss.
//! - [`trainer`]: replay, rollouts, optimisation and the training loop.
//! - [`eval`]: non-stationary evaluation, cross-play, PCA and reports.
//!
//! Runnable walkthroughs live in the crate's `examples/` directory.

pub mod tape;
pub mod nn;
pub mod error;
pub mod env;
pub mod teammates;
pub mod crp;
pub mod context;
pub mod qmix;
pub mod trainer;
pub mod eval;
pub mod stats;
pub mod gradcheck;

pub use error::{Error, Result};
