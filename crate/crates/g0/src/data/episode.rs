//! Episode recording and quality filtering. An episode is the unit of
//! storage: flattened frames plus the subtask segmentation derived from the
//! scripted expert's label stream.

use serde::{Deserialize, Serialize};

use crate::cfg::Config;
use crate::data::label::SubtaskLabel;
use crate::error::{Error, Result};
use crate::sim::expert::{scripted_expert, PhaseMemory};
use crate::sim::render::render;
use crate::sim::rubric::check_progress;
use crate::sim::scene::SceneSpec;
use crate::sim::world::reset;

/// Allowed relative deviation of an inter-frame interval from 1/source_rate.
pub const RATE_TOLERANCE: f64 = 0.25;
/// Slack on normalized proprio when checking joint limits.
const LIMIT_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QualityIssue {
    RateAnomaly,
    ExpertFailure,
    LimitViolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub pass: bool,
    pub reasons: Vec<QualityIssue>,
}

impl QualityReport {
    fn from_reasons(reasons: Vec<QualityIssue>) -> QualityReport {
        QualityReport {
            pass: reasons.is_empty(),
            reasons,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub t: f32,
    /// Flattened observation (head grid then both wrists, channel-major).
    pub observation: Vec<f32>,
    pub proprio: Vec<f32>,
    pub action: Vec<f32>,
    pub subtask: SubtaskLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub task: String,
    /// High-level instruction text (what stage-1 batches see).
    pub task_name: String,
    pub embodiment: String,
    pub frames: Vec<Frame>,
    /// (start, end) frame ranges, end exclusive; they tile [0, len).
    pub segments: Vec<(u32, u32, SubtaskLabel)>,
    pub source_rate: f32,
    pub final_score: u32,
    pub max_score: u32,
    pub quality: QualityReport,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Segment covering a frame index.
    pub fn segment_at(&self, frame: usize) -> Option<usize> {
        self.segments
            .iter()
            .position(|(s, e, _)| (*s as usize) <= frame && frame < (*e as usize))
    }

    /// Validate the segment partition invariant.
    pub fn check_segments(&self) -> Result<()> {
        let mut cursor = 0u32;
        for (s, e, label) in &self.segments {
            if *s != cursor || e <= s {
                return Err(Error::contract(format!(
                    "episode {}: segments must tile frames, found ({s}, {e})",
                    self.id
                )));
            }
            for f in *s..*e {
                if self.frames[f as usize].subtask != *label {
                    return Err(Error::contract(format!(
                        "episode {}: frame {f} label disagrees with segment",
                        self.id
                    )));
                }
            }
            cursor = *e;
        }
        if cursor as usize != self.frames.len() {
            return Err(Error::contract(format!(
                "episode {}: segments cover {cursor} of {} frames",
                self.id,
                self.frames.len()
            )));
        }
        Ok(())
    }
}

pub fn episode_id(task: &str, embodiment: &str, seed: u64) -> String {
    format!("{task}-{embodiment}-{seed:08}")
}

/// Roll the scripted expert in the simulator and log frames at the control
/// rate. Failed rollouts are returned with quality.pass = false rather than
/// as errors, so the filter path stays testable.
pub fn record_episode(cfg: &Config, task: &str, embodiment: &str, seed: u64) -> Result<Episode> {
    let scene = SceneSpec::from_config(cfg, task)?;
    if scene.embodiment != embodiment {
        return Err(Error::contract(format!(
            "task `{task}` is registered for embodiment `{}`, not `{embodiment}`",
            scene.embodiment
        )));
    }
    let dt = scene.world.dt;
    let source_rate = (1.0 / dt) as f32;
    let mut world = reset(&scene, seed)?;
    let mut mem = PhaseMemory::default();
    let mut frames: Vec<Frame> = Vec::new();
    for i in 0..scene.world.expert_budget {
        let (action, label, done) = scripted_expert(&world, task, &mut mem)?;
        if done {
            break;
        }
        frames.push(Frame {
            t: (i as f64 * dt) as f32,
            observation: render(&world).flatten(),
            proprio: world.proprio(),
            action: action.clone(),
            subtask: label,
        });
        world = world.step(&action, dt)?;
    }
    let (final_score, _) = check_progress(&world, task)?;
    let segments = derive_segments(&frames);
    let mut ep = Episode {
        id: episode_id(task, embodiment, seed),
        task: task.to_string(),
        task_name: scene.instruction.clone(),
        embodiment: embodiment.to_string(),
        frames,
        segments,
        source_rate,
        final_score,
        max_score: scene.max_points,
        quality: QualityReport {
            pass: true,
            reasons: Vec::new(),
        },
    };
    ep.quality = quality_filter(&ep);
    Ok(ep)
}

fn derive_segments(frames: &[Frame]) -> Vec<(u32, u32, SubtaskLabel)> {
    let mut segments = Vec::new();
    let mut start = 0u32;
    for i in 1..=frames.len() {
        if i == frames.len() || frames[i].subtask != frames[start as usize].subtask {
            segments.push((start, i as u32, frames[start as usize].subtask));
            start = i as u32;
        }
    }
    segments
}

/// Evaluate the exclusion rules: irregular frame intervals, an expert that
/// never reached the rubric maximum, or joint-limit breaches.
pub fn quality_filter(ep: &Episode) -> QualityReport {
    let mut reasons = Vec::new();
    let nominal = 1.0 / ep.source_rate as f64;
    let rate_bad = ep.frames.windows(2).any(|w| {
        let dt = (w[1].t - w[0].t) as f64;
        (dt - nominal).abs() > RATE_TOLERANCE * nominal
    });
    if rate_bad {
        reasons.push(QualityIssue::RateAnomaly);
    }
    if ep.final_score < ep.max_score || ep.frames.len() < 2 {
        reasons.push(QualityIssue::ExpertFailure);
    }
    let limits_bad = ep
        .frames
        .iter()
        .any(|f| f.proprio.iter().any(|p| p.abs() > 1.0 + LIMIT_EPS));
    if limits_bad {
        reasons.push(QualityIssue::LimitViolation);
    }
    QualityReport::from_reasons(reasons)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::label::{Noun, Skill};

    #[test]
    fn table_bussing_records_six_segments() {
        let cfg = Config::default_config();
        let ep = record_episode(&cfg, "table_bussing", "full", 1).unwrap();
        assert!(ep.quality.pass, "reasons: {:?}", ep.quality.reasons);
        assert_eq!(ep.segments.len(), 6);
        ep.check_segments().unwrap();
        assert_eq!(ep.final_score, 6);
    }

    #[test]
    fn blocks_segment_objects_are_letter_blocks() {
        let cfg = Config::default_config();
        let ep = record_episode(&cfg, "blocks_stacking", "full", 3).unwrap();
        assert!(ep.quality.pass);
        for (_, _, label) in &ep.segments {
            assert!(

                matches!(
                    label.object,
                    Noun::BlockA | Noun::BlockB | Noun::BlockC | Noun::BlockD | Noun::BlockE | Noun::BlockF
                ),
                "label {label:?}"
            );
        }
    }

    #[test]
    fn wrong_embodiment_is_contract_violation() {
        let cfg = Config::default_config();
        assert!(record_episode(&cfg, "table_bussing", "single_arm", 0).is_err());
    }

    #[test]
    fn clean_episode_passes_filter() {
        let cfg = Config::default_config();
        let ep = record_episode(&cfg, "arm_pick", "single_arm", 5).unwrap();
        assert!(quality_filter(&ep).pass);
    }

    #[test]
    fn halved_rate_is_an_anomaly() {
        let cfg = Config::default_config();
        let mut ep = record_episode(&cfg, "arm_pick", "single_arm", 6).unwrap();
        // Stretch timestamps to half the nominal rate.
        for f in ep.frames.iter_mut() {
            f.t *= 2.0;
        }
        let q = quality_filter(&ep);
        assert!(q.reasons.contains(&QualityIssue::RateAnomaly));
    }

    #[test]
    fn one_doubled_interval_is_an_anomaly() {
        let cfg = Config::default_config();
        let mut ep = record_episode(&cfg, "arm_pick", "single_arm", 7).unwrap();
        let shift = 1.0 / ep.source_rate;
        let n = ep.frames.len();
        for f in ep.frames[n / 2..].iter_mut() {
            f.t += shift;
        }
        let q = quality_filter(&ep);
        assert!(q.reasons.contains(&QualityIssue::RateAnomaly));
        assert!(!q.pass);
    }

    #[test]
    fn truncated_episode_is_expert_failure() {
        let cfg = Config::default_config();
        let mut ep = record_episode(&cfg, "arm_pick", "single_arm", 8).unwrap();
        ep.final_score = 1; // as if stopped before completion
        let q = quality_filter(&ep);
        assert!(q.reasons.contains(&QualityIssue::ExpertFailure));
    }

    #[test]
    fn limit_breach_is_detected() {
        let cfg = Config::default_config();
        let mut ep = record_episode(&cfg, "arm_pick", "single_arm", 9).unwrap();
        ep.frames[0].proprio[0] = 1.5;
        let q = quality_filter(&ep);
        assert!(q.reasons.contains(&QualityIssue::LimitViolation));
    }

    #[test]
    fn bed_making_contains_expected_skill_sequence() {
        let cfg = Config::default_config();
        let ep = record_episode(&cfg, "bed_making", "full", 11).unwrap();
        let skills: Vec<Skill> = ep.segments.iter().map(|(_, _, l)| l.skill).collect();
        let want = [Skill::MoveTo, Skill::LiftTorso, Skill::Pick, Skill::Flatten];
        let mut cursor = 0;
        for s in &skills {
            if cursor < want.len() && *s == want[cursor] {
                cursor += 1;
            }
        }
        assert_eq!(cursor, want.len(), "skills: {skills:?}");
    }
}
