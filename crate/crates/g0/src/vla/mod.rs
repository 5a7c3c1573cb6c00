//! The two action-generation heads and their losses: the stage-1
//! autoregressive token head and the stage-2/3 flow-matching action expert,
//! plus the chunk samplers used at rollout time.

pub mod chunk;
pub mod loss;
pub mod sample;

pub use chunk::{interpolate, ActionChunk, FlowSample};
pub use loss::{ar_loss, ar_loss_graph, flow_loss, flow_loss_for_prediction, flow_loss_graph};
pub use sample::{sample_chunk_ar, sample_chunk_flow, ArSampleOutcome, DecodeMode};
