//! Dual-system robot learning pipeline at desk scale.
//!
//! The crate couples a deterministic 2D mobile-manipulation simulator with a
//! small vision-language-action model trained in three stages (autoregressive
//! cross-embodiment pre-training, single-embodiment flow-matching
//! pre-training, task post-training) and an asynchronous runtime in which a
//! low-frequency subtask planner feeds a high-frequency action-chunk
//! executor. Everything is seeded and single-threaded per instance, so runs
//! are bit-reproducible.

pub mod cfg;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod harness;
pub mod net;
pub mod planner;
pub mod runtime;
pub mod sim;
pub mod tok;
pub mod vla;

pub use error::{Error, Result};
