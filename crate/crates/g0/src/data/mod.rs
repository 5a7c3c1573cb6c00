//! Episode recording, atomic-subtask annotation, quality filtering, corpus
//! storage, statistics, and stage-aware minibatch sampling.

pub mod corpus;
pub mod episode;
pub mod label;
pub mod sampler;
pub mod stats;

pub use corpus::{read_corpus, write_corpus, CorpusWriter};
pub use episode::{quality_filter, record_episode, Episode, Frame, QualityIssue, QualityReport};
pub use label::{Noun, Skill, SubtaskLabel};
pub use sampler::{sample_batch, Batch, ChunkSample, PlannerSample, Purpose, Sampler};
pub use stats::{corpus_stats, CorpusStats};
