//! Deterministic 2D kinematic simulator: synthetic embodiments, task scenes,
//! attach-on-grasp manipulation, rasterized observations, scripted experts,
//! and progress rubrics.

pub mod embodiment;
pub mod expert;
pub mod render;
pub mod rubric;
pub mod scene;
pub mod world;

pub use embodiment::EmbodimentSpec;
pub use expert::{scripted_expert, PhaseMemory};
pub use render::{render, Observation};
pub use rubric::check_progress;
pub use scene::{ObjectClass, SceneSpec, SkillCategory, WorldParams};
pub use world::{reset, ObjectState, WorldState};
