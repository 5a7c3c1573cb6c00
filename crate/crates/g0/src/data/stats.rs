//! Corpus statistics: per-task episode counts, duration and
//! subtasks-per-episode histograms, skill frequencies, and the split of
//! interaction time by body-part usage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::episode::Episode;
use crate::error::{Error, Result};
use crate::sim::embodiment::EmbodimentSpec;

/// An action dim counts as active above this magnitude.
pub const ACTIVE_THRESHOLD: f32 = 0.05;
/// Duration histogram bin width in seconds.
pub const DURATION_BIN_S: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyPartUsage {
    pub arms_only: f64,
    pub arms_torso: f64,
    pub whole_body: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub episodes: usize,
    pub episodes_per_task: BTreeMap<String, usize>,
    /// Bin index = floor(duration / DURATION_BIN_S).
    pub duration_hist: Vec<usize>,
    /// Bin index = number of subtask segments in the episode.
    pub subtasks_hist: Vec<usize>,
    /// Segment counts per skill verb.
    pub skill_freq: BTreeMap<String, usize>,
    /// Fractions of frames by most-demanding active body part; sums to 1.
    pub body_part: BodyPartUsage,
}

pub fn corpus_stats(episodes: &[Episode]) -> Result<CorpusStats> {
    if episodes.is_empty() {
        return Err(Error::contract("corpus_stats on an empty corpus"));
    }
    let mut episodes_per_task: BTreeMap<String, usize> = BTreeMap::new();
    let mut duration_hist: Vec<usize> = Vec::new();
    let mut subtasks_hist: Vec<usize> = Vec::new();
    let mut skill_freq: BTreeMap<String, usize> = BTreeMap::new();
    let mut frames_total = 0usize;
    let mut frames_torso = 0usize;
    let mut frames_chassis = 0usize;
    for ep in episodes {
        *episodes_per_task.entry(ep.task.clone()).or_insert(0) += 1;
        let duration = ep.frames.len() as f64 / ep.source_rate as f64;
        let bin = (duration / DURATION_BIN_S).floor() as usize;
        if duration_hist.len() <= bin {
            duration_hist.resize(bin + 1, 0);
        }
        duration_hist[bin] += 1;
        let n_seg = ep.segments.len();
        if subtasks_hist.len() <= n_seg {
            subtasks_hist.resize(n_seg + 1, 0);
        }
        subtasks_hist[n_seg] += 1;
        for (_, _, label) in &ep.segments {
            *skill_freq.entry(label.skill.key().to_string()).or_insert(0) += 1;
        }
        let spec = EmbodimentSpec::by_id(&ep.embodiment)?;
        for f in &ep.frames {
            frames_total += 1;
            let chassis_active = (0..spec.chassis_dof)
                .any(|d| f.action.get(d).map(|a| a.abs() > ACTIVE_THRESHOLD).unwrap_or(false));
            let torso_active = (0..spec.torso_dof).any(|i| {
                f.action
                    .get(spec.torso_dim() + i)
                    .map(|a| a.abs() > ACTIVE_THRESHOLD)
                    .unwrap_or(false)
            });
            if chassis_active {
                frames_chassis += 1;
            } else if torso_active {
                frames_torso += 1;
            }
        }
    }
    let total = frames_total as f64;
    let whole_body = frames_chassis as f64 / total;
    let arms_torso = frames_torso as f64 / total;
    Ok(CorpusStats {
        episodes: episodes.len(),
        episodes_per_task,
        duration_hist,
        subtasks_hist,
        skill_freq,
        body_part: BodyPartUsage {
            arms_only: 1.0 - whole_body - arms_torso,
            arms_torso,
            whole_body,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::Config;
    use crate::data::episode::record_episode;

    #[test]
    fn counts_are_additive() {
        let cfg = Config::default_config();
        let ep = record_episode(&cfg, "arm_pick", "single_arm", 2).unwrap();
        let one = corpus_stats(std::slice::from_ref(&ep)).unwrap();
        let ten = corpus_stats(&vec![ep; 10]).unwrap();
        assert_eq!(ten.episodes, 10);
        for (k, v) in &one.skill_freq {
            assert_eq!(ten.skill_freq[k], v * 10);
        }
        assert_eq!(
            ten.duration_hist.iter().sum::<usize>(),
            10,
            "histogram mass equals episode count"
        );
        assert_eq!(ten.subtasks_hist.iter().sum::<usize>(), 10);
    }

    #[test]
    fn bed_making_uses_the_whole_body() {
        let cfg = Config::default_config();
        let eps: Vec<_> = (0..3)
            .map(|s| record_episode(&cfg, "bed_making", "full", s).unwrap())
            .collect();
        let stats = corpus_stats(&eps).unwrap();
        assert!(stats.body_part.whole_body > 0.0);
        let sum = stats.body_part.arms_only + stats.body_part.arms_torso + stats.body_part.whole_body;
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn skill_table_totals_equal_segment_count() {
        let cfg = Config::default_config();
        let eps: Vec<_> = (0..2)
            .map(|s| record_episode(&cfg, "microwave", "full", s).unwrap())
            .collect();
        let stats = corpus_stats(&eps).unwrap();
        let total_segments: usize = eps.iter().map(|e| e.segments.len()).sum();
        assert_eq!(stats.skill_freq.values().sum::<usize>(), total_segments);
    }

    #[test]
    fn empty_corpus_is_contract_violation() {
        assert!(corpus_stats(&[]).is_err());
    }
}
