//! Stage-aware minibatch sampling. Stage-1 samples carry the high-level task
//! instruction, stage-2 samples the rendered subtask text, and planner
//! samples carry frame history at 1-second spacing with keyframes (segment
//! endings and gripper state changes) upweighted. Episodes that fail the
//! quality filter are never sampled.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::episode::Episode;
use crate::data::label::SubtaskLabel;
use crate::error::{Error, Result};
use crate::sim::embodiment::EmbodimentSpec;

/// Gripper opening change between consecutive frames that marks a keyframe.
pub const GRIPPER_KEY_DELTA: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Purpose {
    Stage1,
    Stage2,
    Planner { k: usize, keyframe_weight: f64 },
}

#[derive(Debug, Clone)]
pub struct ChunkSample<'a> {
    pub obs: &'a [f32],
    pub instruction: String,
    pub proprio: &'a [f32],
    /// H x action_dim, padded past the episode end by repeating the final
    /// action.
    pub chunk: Vec<f32>,
    pub episode: usize,
    pub frame: usize,
}

#[derive(Debug, Clone)]
pub struct PlannerSample<'a> {
    /// k observations, oldest first, most recent last.
    pub obs_history: Vec<&'a [f32]>,
    /// Actions at the same sampled instants.
    pub action_history: Vec<&'a [f32]>,
    pub instruction: String,
    pub proprio: &'a [f32],
    /// Label of the segment after the current one, or the terminal entry.
    pub target: SubtaskLabel,
    pub episode: usize,
    pub frame: usize,
}

#[derive(Debug)]
pub enum Batch<'a> {
    Chunks(Vec<ChunkSample<'a>>),
    Planner(Vec<PlannerSample<'a>>),
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        match self {
            Batch::Chunks(v) => v.len(),
            Batch::Planner(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reusable sampler over the quality-passing subset of a corpus.
pub struct Sampler<'a> {
    corpus: &'a [Episode],
    purpose: Purpose,
    chunk_h: usize,
    /// (episode index, frame index) per drawable frame.
    frames: Vec<(usize, usize)>,
    /// Cumulative weights aligned with `frames`.
    cum_weights: Vec<f64>,
    total_weight: f64,
}

/// Whether a frame is a keyframe: final frame of its segment, or a gripper
/// state change to the next frame.
pub fn is_keyframe(ep: &Episode, frame: usize) -> bool {
    if ep
        .segments
        .iter()
        .any(|(_, end, _)| frame + 1 == *end as usize)
    {
        return true;
    }
    if frame + 1 < ep.frames.len() {
        if let Ok(spec) = EmbodimentSpec::by_id(&ep.embodiment) {
            for arm in 0..spec.arms {
                let gd = spec.gripper_dim(arm);
                // proprio stores opening mapped to [-1, 1]
                let a = (ep.frames[frame].proprio[gd] + 1.0) / 2.0;
                let b = (ep.frames[frame + 1].proprio[gd] + 1.0) / 2.0;
                if (a - b).abs() > GRIPPER_KEY_DELTA {
                    return true;
                }
            }
        }
    }
    false
}

impl<'a> Sampler<'a> {
    pub fn new(corpus: &'a [Episode], purpose: Purpose, chunk_h: usize) -> Result<Sampler<'a>> {
        let mut frames = Vec::new();
        let mut cum_weights = Vec::new();
        let mut total = 0.0f64;
        for (ei, ep) in corpus.iter().enumerate() {
            if !ep.quality.pass {
                continue;
            }
            for fi in 0..ep.frames.len() {
                let w = match purpose {
                    Purpose::Planner { keyframe_weight, .. } => {
                        if is_keyframe(ep, fi) {
                            keyframe_weight
                        } else {
                            1.0
                        }
                    }
                    _ => 1.0,
                };
                total += w;
                frames.push((ei, fi));
                cum_weights.push(total);
            }
        }
        if frames.is_empty() {
            return Err(Error::contract(
                "sampler: no quality-passing frames in corpus",
            ));
        }
        Ok(Sampler {
            corpus,
            purpose,
            chunk_h,
            frames,
            cum_weights,
            total_weight: total,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    fn draw_frame(&self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let r: f64 = rng.gen_range(0.0..self.total_weight);
        let idx = self.cum_weights.partition_point(|w| *w <= r);
        self.frames[idx.min(self.frames.len() - 1)]
    }

    pub fn batch(&self, size: usize, rng: &mut ChaCha8Rng) -> Batch<'a> {
        match self.purpose {
            Purpose::Stage1 | Purpose::Stage2 => {
                let mut out = Vec::with_capacity(size);
                for _ in 0..size {
                    let (ei, fi) = self.draw_frame(rng);
                    out.push(self.chunk_sample(ei, fi));
                }
                Batch::Chunks(out)
            }
            Purpose::Planner { k, .. } => {
                let mut out = Vec::with_capacity(size);
                for _ in 0..size {
                    let (ei, fi) = self.draw_frame(rng);
                    out.push(self.planner_sample(ei, fi, k));
                }
                Batch::Planner(out)
            }
        }
    }

    fn chunk_sample(&self, ei: usize, fi: usize) -> ChunkSample<'a> {
        let ep = &self.corpus[ei];
        let dim = ep.frames[fi].action.len();
        let mut chunk = Vec::with_capacity(self.chunk_h * dim);
        for step in 0..self.chunk_h {
            let idx = (fi + step).min(ep.frames.len() - 1);
            chunk.extend_from_slice(&ep.frames[idx].action);
        }
        let instruction = match self.purpose {
            Purpose::Stage1 => ep.task_name.clone(),
            _ => ep.frames[fi].subtask.rendered_text(),
        };
        ChunkSample {
            obs: &ep.frames[fi].observation,
            instruction,
            proprio: &ep.frames[fi].proprio,
            chunk,
            episode: ei,
            frame: fi,
        }
    }

    fn planner_sample(&self, ei: usize, fi: usize, k: usize) -> PlannerSample<'a> {
        let ep = &self.corpus[ei];
        let stride = (ep.source_rate as f64).round().max(1.0) as usize;
        let mut obs_history = Vec::with_capacity(k);
        let mut action_history = Vec::with_capacity(k);
        for i in 0..k {
            let back = (k - 1 - i) * stride;
            let idx = fi.saturating_sub(back);
            obs_history.push(ep.frames[idx].observation.as_slice());
            action_history.push(ep.frames[idx].action.as_slice());
        }
        let target = match ep.segment_at(fi) {
            Some(seg) if seg + 1 < ep.segments.len() => ep.segments[seg + 1].2,
            _ => SubtaskLabel::done(),
        };
        PlannerSample {
            obs_history,
            action_history,
            instruction: ep.task_name.clone(),
            proprio: &ep.frames[fi].proprio,
            target,
            episode: ei,
            frame: fi,
        }
    }
}

/// One-shot deterministic batch: identical (corpus, purpose, seed) yield
/// identical batches.
pub fn sample_batch<'a>(
    corpus: &'a [Episode],
    purpose: Purpose,
    chunk_h: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Batch<'a>> {
    let sampler = Sampler::new(corpus, purpose, chunk_h)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sampler.batch(batch_size, &mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::Config;
    use crate::data::episode::{quality_filter, record_episode, Episode, Frame, QualityReport};
    use crate::data::label::{Noun, Skill};

    /// Hand-built episode: `n` frames, keyframes at every 10th frame via
    /// segment boundaries.
    fn synthetic_episode(n: usize, seg_len: usize) -> Episode {
        let frames: Vec<Frame> = (0..n)
            .map(|i| Frame {
                t: i as f32 * 0.1,
                observation: vec![0.0; 4],
                proprio: vec![0.0; 3],
                action: vec![0.1; 3],
                subtask: SubtaskLabel::new(
                    if (i / seg_len) % 2 == 0 { Skill::Pick } else { Skill::Place },
                    Noun::Block,
                ),
            })
            .collect();
        let mut segments = Vec::new();
        let mut s = 0;
        while s < n {
            let e = (s + seg_len).min(n);
            segments.push((s as u32, e as u32, frames[s].subtask));
            s = e;
        }
        let mut ep = Episode {
            id: "synthetic-00000001".into(),
            task: "arm_pick".into(),
            task_name: "put the block on the tray".into(),
            embodiment: "single_arm".into(),
            frames,
            segments,
            source_rate: 10.0,
            final_score: 2,
            max_score: 2,
            quality: QualityReport {
                pass: true,
                reasons: vec![],
            },
        };
        ep.quality = quality_filter(&ep);
        ep
    }

    #[test]
    fn keyframe_weighting_matches_expected_ratio() {
        // 10% keyframes at weight 5: expected fraction 0.1*5/(0.1*5+0.9).
        let ep = synthetic_episode(100, 10);
        let corpus = vec![ep];
        let sampler = Sampler::new(
            &corpus,
            Purpose::Planner {
                k: 3,
                keyframe_weight: 5.0,
            },
            16,
        )
        .unwrap();
        let key_count: usize = (0..100).filter(|f| is_keyframe(&corpus[0], *f)).count();
        assert_eq!(key_count, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut hits = 0usize;
        let total = 100_000usize;
        for _ in 0..total / 1000 {
            if let Batch::Planner(samples) = sampler.batch(1000, &mut rng) {
                hits += samples
                    .iter()
                    .filter(|s| is_keyframe(&corpus[0], s.frame))
                    .count();
            }
        }
        let frac = hits as f64 / total as f64;
        let expected = 0.1 * 5.0 / (0.1 * 5.0 + 0.9);
        assert!((frac - expected).abs() < 0.01, "frac {frac} vs {expected}");
    }

    #[test]
    fn unit_weight_is_uniform() {
        let ep = synthetic_episode(50, 10);
        let corpus = vec![ep];
        let sampler = Sampler::new(
            &corpus,
            Purpose::Planner {
                k: 3,
                keyframe_weight: 1.0,
            },
            16,
        )
        .unwrap();
        assert_eq!(sampler.total_weight, 50.0);
    }

    #[test]
    fn failed_episodes_are_never_sampled() {
        let good = synthetic_episode(40, 10);
        let mut bad = synthetic_episode(40, 10);
        bad.final_score = 0;
        bad.quality = quality_filter(&bad);
        assert!(!bad.quality.pass);
        let corpus = vec![bad, good];
        let sampler = Sampler::new(&corpus, Purpose::Stage1, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        if let Batch::Chunks(samples) = sampler.batch(256, &mut rng) {
            assert!(samples.iter().all(|s| s.episode == 1));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let corpus = vec![synthetic_episode(60, 10)];
        let a = sample_batch(&corpus, Purpose::Stage2, 16, 8, 99).unwrap();
        let b = sample_batch(&corpus, Purpose::Stage2, 16, 8, 99).unwrap();
        match (a, b) {
            (Batch::Chunks(x), Batch::Chunks(y)) => {
                for (s, t) in x.iter().zip(&y) {
                    assert_eq!((s.episode, s.frame), (t.episode, t.frame));
                    assert_eq!(s.chunk, t.chunk);
                }
            }
            _ => panic!("wrong batch kind"),
        }
    }

    #[test]
    fn chunk_pads_by_repeating_final_action() {
        let ep = synthetic_episode(5, 5);
        let corpus = vec![ep];
        let sampler = Sampler::new(&corpus, Purpose::Stage2, 8).unwrap();
        let sample = sampler.chunk_sample(0, 3);
        assert_eq!(sample.chunk.len(), 8 * 3);
        let last = &corpus[0].frames[4].action;
        for step in 2..8 {
            assert_eq!(&sample.chunk[step * 3..(step + 1) * 3], last.as_slice());
        }
    }

    #[test]
    fn stage1_instructions_never_contain_subtask_phrases() {
        let cfg = Config::default_config();
        let eps: Vec<Episode> = vec![
            record_episode(&cfg, "table_bussing", "full", 0).unwrap(),
            record_episode(&cfg, "bed_making", "full", 1).unwrap(),
        ];
        let batch = sample_batch(&eps, Purpose::Stage1, 16, 64, 7).unwrap();
        let verbs: Vec<String> = crate::data::label::ALL_SKILLS
            .iter()
            .map(|s| s.words().to_string())
            .collect();
        if let Batch::Chunks(samples) = batch {
            for s in samples {
                for v in &verbs {
                    assert!(
                        !s.instruction.contains(v.as_str()),
                        "instruction `{}` contains skill verb `{v}`",
                        s.instruction
                    );
                }
            }
        }
    }

    #[test]
    fn planner_history_is_front_padded_and_targets_next_segment() {
        let ep = synthetic_episode(40, 10);
        let corpus = vec![ep];
        let sampler = Sampler::new(
            &corpus,
            Purpose::Planner {
                k: 3,
                keyframe_weight: 1.0,
            },
            16,
        )
        .unwrap();
        // Frame 2 is younger than k seconds: history clamps to frame 0.
        let s = sampler.planner_sample(0, 2, 3);
        assert_eq!(s.obs_history.len(), 3);
        assert!(std::ptr::eq(s.obs_history[0], s.obs_history[1]));
        // Frame 9 is segment-final in segment 0; target = segment 1 label.
        let s = sampler.planner_sample(0, 9, 3);
        assert_eq!(s.target, corpus[0].segments[1].2);
        // Final segment targets the terminal entry.
        let s = sampler.planner_sample(0, 39, 3);
        assert!(s.target.is_done());
    }
}
