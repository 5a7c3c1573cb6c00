//! Subtask planner: a classifier over the closed subtask vocabulary,
//! predicting the segment that follows the current moment from task name,
//! k-frame observation/action history at 1-second spacing, and proprio. Its
//! verbal response comes from a fixed per-skill template table.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cfg::Config;
use crate::data::episode::Episode;
use crate::data::label::{tokenize_words, Skill, SubtaskLabel};
use crate::data::sampler::{Batch, PlannerSample, Purpose, Sampler};
use crate::error::{Error, Result};
use crate::net::checkpoint::{read_checkpoint, save_checkpoint};
use crate::net::model::{
    add_planner_params, extract_patches, init_backbone, pad_instruction, pad_with_mask,
    planner_forward, BackboneConfig, NetCtx, PlannerInputHost,
};
use crate::net::store::{AdamParams, ParamStore};

/// Indexed list of all (skill, object) pairs in a corpus plus the terminal
/// entry, stable across train and eval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskVocab {
    pub entries: Vec<SubtaskLabel>,
}

impl SubtaskVocab {
    pub fn from_corpus(corpus: &[Episode]) -> SubtaskVocab {
        let mut set: BTreeSet<SubtaskLabel> = BTreeSet::new();
        for ep in corpus {
            for (_, _, label) in &ep.segments {
                set.insert(*label);
            }
        }
        let mut entries: Vec<SubtaskLabel> = set.into_iter().collect();
        entries.push(SubtaskLabel::done());
        SubtaskVocab { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, label: &SubtaskLabel) -> Option<usize> {
        self.entries.iter().position(|l| l == label)
    }

    pub fn label(&self, index: usize) -> SubtaskLabel {
        self.entries[index]
    }
}

/// The planner's own weights (same backbone architecture, separate store)
/// plus its vocabulary and history depth.
pub struct PlannerModel {
    pub cfg: BackboneConfig,
    pub k: usize,
    pub vocab: SubtaskVocab,
    pub store: ParamStore,
}

/// Everything the planner conditions on at one decision point.
#[derive(Debug, Clone)]
pub struct PlannerInput {
    pub task_name: String,
    /// k observations, oldest first (front-padded by repeating the earliest).
    pub obs_history: Vec<Vec<f32>>,
    pub action_history: Vec<Vec<f32>>,
    pub proprio: Vec<f32>,
}

/// Fixed response templates keyed by skill.
#[derive(Debug, Clone)]
pub struct TemplateTable {
    entries: Vec<(Skill, String)>,
}

impl TemplateTable {
    pub fn from_config(cfg: &Config) -> Result<TemplateTable> {
        let section = cfg.require_section("templates")?;
        let mut entries = Vec::new();
        for skill in crate::data::label::ALL_SKILLS {
            let template = section
                .get(skill.key())
                .ok_or_else(|| Error::config(format!("[templates] missing `{}`", skill.key())))?;
            entries.push((skill, template.to_string()));
        }
        Ok(TemplateTable { entries })
    }

    pub fn render(&self, label: &SubtaskLabel) -> String {
        let template = self
            .entries
            .iter()
            .find(|(s, _)| *s == label.skill)
            .map(|(_, t)| t.as_str())
            .unwrap_or("{obj}");
        template.replace("{obj}", &label.object.words())
    }
}

/// Per-task alternative phrasings used as training-time augmentation.
#[derive(Debug, Clone, Default)]
pub struct ParaphraseTable {
    entries: Vec<(String, Vec<String>)>,
}

impl ParaphraseTable {
    pub fn from_config(cfg: &Config) -> ParaphraseTable {
        let mut entries = Vec::new();
        for (task, section) in cfg.sections_with_prefix("paraphrase") {
            let mut alts = Vec::new();
            let mut i = 0;
            while let Some(alt) = section.get(&format!("alt.{i}")) {
                alts.push(alt.to_string());
                i += 1;
            }
            entries.push((task.to_string(), alts));
        }
        ParaphraseTable { entries }
    }

    /// Either the canonical name or one of its paraphrases.
    pub fn augment(&self, task: &str, canonical: &str, rng: &mut ChaCha8Rng) -> String {
        let Some((_, alts)) = self.entries.iter().find(|(t, _)| t == task) else {
            return canonical.to_string();
        };
        if alts.is_empty() {
            return canonical.to_string();
        }
        let pick = rng.gen_range(0..=alts.len());
        if pick == 0 {
            canonical.to_string()
        } else {
            alts[pick - 1].clone()
        }
    }
}

fn build_host_input(
    cfg: &BackboneConfig,
    k: usize,
    samples: &[(&PlannerSample, String)],
) -> PlannerInputHost {
    let mut patches = Vec::new();
    let mut instr_ids = Vec::new();
    let mut action_hist = Vec::new();
    let mut proprio = Vec::new();
    for (s, instruction) in samples {
        for obs in &s.obs_history {
            patches.extend(extract_patches(obs, cfg));
        }
        instr_ids.extend(pad_instruction(&tokenize_words(instruction), cfg.instr_len));
        for a in &s.action_history {
            action_hist.extend(pad_with_mask(a, cfg.proprio_dim));
        }
        proprio.extend(pad_with_mask(s.proprio, cfg.proprio_dim));
    }
    PlannerInputHost {
        patches,
        instr_ids,
        action_hist,
        proprio,
        batch: samples.len(),
        k,
    }
}

pub struct PlannerTrainOptions {
    pub k: usize,
    pub keyframe_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub stride: usize,
    pub seed: u64,
}

impl PlannerTrainOptions {
    pub fn from_config(cfg: &Config, seed: u64) -> Result<PlannerTrainOptions> {
        let p = cfg.require_section("planner")?;
        Ok(PlannerTrainOptions {
            k: p.usize_or("k", 3)?,
            keyframe_weight: p.f64_or("keyframe_weight", 5.0)?,
            epochs: p.usize_or("epochs", 2)?,
            batch_size: p.usize_or("batch", 32)?,
            lr: p.f64_or("lr", 1e-3)?,
            stride: p.usize_or("stride", 10)?,
            seed,
        })
    }
}

/// Train the classifier head on the shared backbone architecture (separate
/// weights) with keyframe-weighted sampling.
pub fn train_planner(
    net_cfg: &BackboneConfig,
    corpus: &[Episode],
    paraphrases: &ParaphraseTable,
    opts: &PlannerTrainOptions,
) -> Result<(PlannerModel, Vec<(usize, f64)>)> {
    let vocab = SubtaskVocab::from_corpus(corpus);
    if vocab.len() < 2 {
        return Err(Error::contract("planner corpus has no subtask labels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut store = init_backbone(net_cfg, &mut rng);
    add_planner_params(&mut store, net_cfg, vocab.len(), &mut rng);
    let sampler = Sampler::new(
        corpus,
        Purpose::Planner {
            k: opts.k,
            keyframe_weight: opts.keyframe_weight,
        },
        16,
    )?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xba7c);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xa462);
    let spe = (sampler.n_frames() / (opts.stride * opts.batch_size)).max(1);
    let mut log = Vec::new();
    let mut step = 0usize;
    for _ in 0..opts.epochs {
        for _ in 0..spe {
            let Batch::Planner(samples) = sampler.batch(opts.batch_size, &mut batch_rng) else {
                unreachable!("planner sampler yields planner batches");
            };
            let with_instr: Vec<(&PlannerSample, String)> = samples
                .iter()
                .map(|s| {
                    let task = &corpus[s.episode].task;
                    (s, paraphrases.augment(task, &s.instruction, &mut aug_rng))
                })
                .collect();
            let mut targets = Vec::with_capacity(samples.len());
            for s in &samples {
                let idx = vocab.index_of(&s.target).ok_or_else(|| {
                    Error::contract(format!(
                        "vocabulary drift: label {:?} missing from planner vocab",
                        s.target
                    ))
                })?;
                targets.push(idx as i64);
            }
            let host = build_host_input(net_cfg, opts.k, &with_instr);
            store.zero_grads();
            let mut ctx = NetCtx::<f32>::new(&store, |_| true);
            let logits = planner_forward(&mut ctx, net_cfg, &host)?;
            let loss = ctx.g.ce_mean(logits, &targets);
            let mut graph = ctx.into_graph();
            let loss_val = graph.value(loss).data[0] as f64;
            graph.backward(loss)?;
            store.accumulate_grads(&graph)?;
            store.adam_step(AdamParams::with_lr(opts.lr), |_| true);
            log.push((step, loss_val));
            step += 1;
        }
    }
    Ok((
        PlannerModel {
            cfg: net_cfg.clone(),
            k: opts.k,
            vocab,
            store,
        },
        log,
    ))
}

impl PlannerModel {
    /// Argmax prediction (ties toward the lowest index) plus the rendered
    /// response text.
    pub fn predict_subtask(
        &self,
        input: &PlannerInput,
        templates: &TemplateTable,
    ) -> Result<(SubtaskLabel, String)> {
        let label = self.predict_label(input)?;
        let response = templates.render(&label);
        Ok((label, response))
    }

    pub fn predict_label(&self, input: &PlannerInput) -> Result<SubtaskLabel> {
        if input.obs_history.len() != self.k || input.action_history.len() != self.k {
            return Err(Error::contract(format!(
                "planner input history must have exactly k = {} entries",
                self.k
            )));
        }
        let sample = PlannerSample {
            obs_history: input.obs_history.iter().map(|o| o.as_slice()).collect(),
            action_history: input.action_history.iter().map(|a| a.as_slice()).collect(),
            instruction: input.task_name.clone(),
            proprio: &input.proprio,
            target: SubtaskLabel::done(),
            episode: 0,
            frame: 0,
        };
        let pairs = vec![(&sample, input.task_name.clone())];
        let host = build_host_input(&self.cfg, self.k, &pairs);
        let mut ctx = NetCtx::<f32>::frozen(&self.store);
        let logits = planner_forward(&mut ctx, &self.cfg, &host)?;
        let row = ctx.g.value(logits);
        let mut best = 0usize;
        for i in 0..row.cols() {
            if row.data[i] > row.data[best] {
                best = i;
            }
        }
        Ok(self.vocab.label(best))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = PlannerMeta {
            kind: "planner".to_string(),
            k: self.k,
            vocab: self.vocab.clone(),
        };
        save_checkpoint(
            &self.store,
            self.cfg.hash(),
            &serde_json::to_string(&meta).expect("meta serializes"),
            path,
        )
    }

    pub fn load(path: &Path, cfg: &BackboneConfig) -> Result<PlannerModel> {
        let loaded = read_checkpoint(path)?;
        if loaded.config_hash != cfg.hash() {
            return Err(Error::contract(format!(
                "planner checkpoint {} was built for a different architecture",
                path.display()
            )));
        }
        let meta: PlannerMeta = serde_json::from_str(&loaded.meta)
            .map_err(|e| Error::contract(format!("planner meta does not parse: {e}")))?;
        Ok(PlannerModel {
            cfg: cfg.clone(),
            k: meta.k,
            vocab: meta.vocab,
            store: loaded.store,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PlannerMeta {
    kind: String,
    k: usize,
    vocab: SubtaskVocab,
}

/// Whose predictions the accuracy metric scores.
pub enum Predictor<'a> {
    Trained(&'a PlannerModel),
    /// Reads the ground-truth target; scores 100% by construction.
    Oracle,
    /// Uniform over the eval vocabulary.
    UniformRandom { seed: u64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskAccuracy {
    pub task: String,
    pub frames: usize,
    pub accuracy: f64,
}

/// Fraction of 1 Hz evaluation frames whose predicted label equals the
/// ground-truth next-subtask label, per task.
pub fn instruction_accuracy(
    predictor: Predictor,
    corpus: &[Episode],
    k: usize,
) -> Result<Vec<TaskAccuracy>> {
    let passing: Vec<&Episode> = corpus.iter().filter(|e| e.quality.pass).collect();
    if passing.is_empty() {
        return Err(Error::contract("instruction_accuracy needs a nonempty eval set"));
    }
    let vocab = SubtaskVocab::from_corpus(corpus);
    let mut rng = match &predictor {
        Predictor::UniformRandom { seed } => ChaCha8Rng::seed_from_u64(*seed),
        _ => ChaCha8Rng::seed_from_u64(0),
    };
    let mut per_task: std::collections::BTreeMap<String, (usize, usize)> =
        std::collections::BTreeMap::new();
    for ep in &passing {
        let stride = (ep.source_rate as f64).round().max(1.0) as usize;
        let mut f = 0usize;
        while f < ep.frames.len() {
            let target = match ep.segment_at(f) {
                Some(seg) if seg + 1 < ep.segments.len() => ep.segments[seg + 1].2,
                _ => SubtaskLabel::done(),
            };
            let predicted = match &predictor {
                Predictor::Oracle => target,
                Predictor::UniformRandom { .. } => {
                    vocab.label(rng.gen_range(0..vocab.len()))
                }
                Predictor::Trained(model) => {
                    let mut obs_history = Vec::with_capacity(k);
                    let mut action_history = Vec::with_capacity(k);
                    for i in 0..k {
                        let back = (k - 1 - i) * stride;
                        let idx = f.saturating_sub(back);
                        obs_history.push(ep.frames[idx].observation.clone());
                        action_history.push(ep.frames[idx].action.clone());
                    }
                    let input = PlannerInput {
                        task_name: ep.task_name.clone(),
                        obs_history,
                        action_history,
                        proprio: ep.frames[f].proprio.clone(),
                    };
                    model.predict_label(&input)?
                }
            };
            let entry = per_task.entry(ep.task.clone()).or_insert((0, 0));
            entry.0 += 1;
            if predicted == target {
                entry.1 += 1;
            }
            f += stride;
        }
    }
    Ok(per_task
        .into_iter()
        .map(|(task, (frames, hits))| TaskAccuracy {
            task,
            frames,
            accuracy: hits as f64 / frames as f64,
        })
        .collect())
}

/// Accuracy report CSV: task, frames, accuracy.
pub fn write_accuracy_csv(rows: &[TaskAccuracy], path: &Path) -> Result<()> {
    let mut text = String::from("task,frames,accuracy\n");
    for r in rows {
        text.push_str(&format!("{},{},{:.6}\n", r.task, r.frames, r.accuracy));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::episode::record_episode;
    use crate::data::label::Noun;
    use crate::net::model::tiny_config;

    fn tiny_corpus(n: u64) -> Vec<Episode> {
        let cfg = Config::default_config();
        let mut eps: Vec<Episode> = (0..n)
            .map(|s| record_episode(&cfg, "arm_pick", "single_arm", s).unwrap())
            .collect();
        // shrink observations to the tiny net's grids
        let net = tiny_config();
        let len = net.channels
            * (net.head_grid * net.head_grid + 2 * net.wrist_grid * net.wrist_grid);
        for ep in eps.iter_mut() {
            for f in ep.frames.iter_mut() {
                f.observation.truncate(len);
            }
        }
        eps
    }

    #[test]
    fn vocab_is_stable_and_bijective() {
        let corpus = tiny_corpus(3);
        let a = SubtaskVocab::from_corpus(&corpus);
        let b = SubtaskVocab::from_corpus(&corpus);
        assert_eq!(a, b);
        for (i, label) in a.entries.iter().enumerate() {
            assert_eq!(a.index_of(label), Some(i));
        }
        assert!(a.entries.last().unwrap().is_done());
    }

    #[test]
    fn oracle_accuracy_is_exactly_one() {
        let corpus = tiny_corpus(2);
        let rows = instruction_accuracy(Predictor::Oracle, &corpus, 3).unwrap();
        for r in rows {
            assert_eq!(r.accuracy, 1.0);
        }
    }

    #[test]
    fn empty_eval_set_is_contract_violation() {
        assert!(instruction_accuracy(Predictor::Oracle, &[], 3).is_err());
    }

    #[test]
    fn random_predictor_matches_uniform_rate() {
        // Build a long synthetic eval set by repeating episodes.
        let mut corpus = tiny_corpus(4);
        let copies = corpus.clone();
        for _ in 0..400 {
            corpus.extend(copies.clone());
        }
        let vocab = SubtaskVocab::from_corpus(&corpus);
        let rows = instruction_accuracy(Predictor::UniformRandom { seed: 3 }, &corpus, 3).unwrap();
        let frames: usize = rows.iter().map(|r| r.frames).sum();
        assert!(frames >= 5000, "need enough frames, got {frames}");
        let acc: f64 = rows
            .iter()
            .map(|r| r.accuracy * r.frames as f64)
            .sum::<f64>()
            / frames as f64;
        let expected = 1.0 / vocab.len() as f64;
        assert!((acc - expected).abs() < 0.02, "acc {acc} vs uniform {expected}");
    }

    #[test]
    fn templates_render_from_config() {
        let cfg = Config::default_config();
        let table = TemplateTable::from_config(&cfg).unwrap();
        let text = table.render(&SubtaskLabel::new(Skill::Pick, Noun::Pen));
        assert_eq!(text, "picking the pen now");
        let done = table.render(&SubtaskLabel::done());
        assert_eq!(done, "all finished");
    }

    #[test]
    fn overfit_small_corpus_reaches_high_training_accuracy() {
        let corpus = tiny_corpus(8);
        let net = tiny_config();
        let opts = PlannerTrainOptions {
            k: 3,
            keyframe_weight: 5.0,
            epochs: 60,
            batch_size: 16,
            lr: 3e-3,
            stride: 4,
            seed: 5,
        };
        let (model, _) =
            train_planner(&net, &corpus, &ParaphraseTable::default(), &opts).unwrap();
        // Training accuracy over 1 Hz frames.
        let rows = instruction_accuracy(Predictor::Trained(&model), &corpus, 3).unwrap();
        let acc: f64 = rows
            .iter()
            .map(|r| r.accuracy * r.frames as f64)
            .sum::<f64>()
            / rows.iter().map(|r| r.frames).sum::<usize>() as f64;
        assert!(acc > 0.95, "training accuracy {acc}");
    }

    #[test]
    fn prediction_is_deterministic() {
        let corpus = tiny_corpus(2);
        let net = tiny_config();
        let opts = PlannerTrainOptions {
            k: 3,
            keyframe_weight: 1.0,
            epochs: 1,
            batch_size: 4,
            lr: 1e-3,
            stride: 16,
            seed: 1,
        };
        let (model, _) = train_planner(&net, &corpus, &ParaphraseTable::default(), &opts).unwrap();
        let ep = &corpus[0];
        let input = PlannerInput {
            task_name: ep.task_name.clone(),
            obs_history: vec![ep.frames[0].observation.clone(); 3],
            action_history: vec![ep.frames[0].action.clone(); 3],
            proprio: ep.frames[0].proprio.clone(),
        };
        let a = model.predict_label(&input).unwrap();
        let b = model.predict_label(&input).unwrap();
        assert_eq!(a, b);
    }
}
