//! Three-stage training pipeline. Stage 1 trains the backbone and token head
//! autoregressively on mixed-embodiment corpora with task-level instructions;
//! stage 2 transfers the backbone, initializes a fresh flow expert, and
//! trains end-to-end with the flow loss on subtask instructions;
//! post-training reuses the stage-2 machinery on a capped task corpus.
//!
//! An "epoch" is a fixed sample budget of total_frames / stride draws
//! (neighboring chunk starts are near-duplicates, so covering every frame
//! once per epoch buys nothing); batches draw frames uniformly at random
//! under that budget. Every loop is seeded, so identical plans produce
//! bit-identical checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::episode::Episode;
use crate::data::sampler::{Batch, Purpose, Sampler};
use crate::error::{Error, Result};
use crate::net::checkpoint::{load_with_transfer, read_checkpoint, save_checkpoint, TransferMap};
use crate::net::model::{add_expert_params, init_backbone, BackboneConfig, NetCtx};
use crate::net::store::{AdamParams, ParamStore};
use crate::tok::Tokenizer;
use crate::vla::loss::{ar_loss_graph, flow_loss_graph};

/// Post-training never sees more than this many trajectories.
pub const POSTTRAIN_CAP: usize = 100;
/// Few-shot protocol: trajectory budget and epochs.
pub const FEWSHOT_CAP: usize = 20;
pub const FEWSHOT_EPOCHS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Stage1,
    Stage2,
    PostTrain,
    FewShot,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::PostTrain => "posttrain",
            Stage::FewShot => "fewshot",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epoch sample budget divisor; see module docs.
    pub stride: usize,
    pub trajectory_cap: Option<usize>,
    pub seed: u64,
    pub freeze_backbone: bool,
}

impl StagePlan {
    pub fn from_config(cfg: &crate::cfg::Config, stage: Stage, seed: u64) -> Result<StagePlan> {
        let section = cfg.require_section(stage.name())?;
        let defaults: (usize, Option<usize>) = match stage {
            Stage::Stage1 | Stage::Stage2 => (3, None),
            Stage::PostTrain => (4, Some(POSTTRAIN_CAP)),
            Stage::FewShot => (FEWSHOT_EPOCHS, Some(FEWSHOT_CAP)),
        };
        let cap = match section.get_usize("cap")? {
            Some(c) => Some(c),
            None => defaults.1,
        };
        let plan = StagePlan {
            stage,
            epochs: section.usize_or("epochs", defaults.0)?,
            batch_size: section.usize_or("batch", 32)?,
            lr: section.f64_or("lr", 1e-3)?,
            stride: section.usize_or("stride", 8)?,
            trajectory_cap: cap,
            seed,
            freeze_backbone: section.usize_or("freeze_backbone", 0)? != 0,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.stride == 0 {
            return Err(Error::contract("plan needs positive epochs/batch/stride"));
        }
        match self.stage {
            Stage::PostTrain => {
                let cap = self.trajectory_cap.unwrap_or(POSTTRAIN_CAP);
                if cap > POSTTRAIN_CAP {
                    return Err(Error::contract(format!(
                        "post-training cap {cap} exceeds the {POSTTRAIN_CAP}-trajectory limit"
                    )));
                }
            }
            Stage::FewShot => {
                if self.trajectory_cap.unwrap_or(FEWSHOT_CAP) > FEWSHOT_CAP {
                    return Err(Error::contract(format!(
                        "few-shot cap exceeds {FEWSHOT_CAP} trajectories"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Provenance and shape metadata embedded in checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkptMeta {
    pub kind: String,
    pub stage: String,
    pub embodiment: String,
    pub chunk_h: usize,
    pub action_dim: usize,
    pub provenance: String,
    pub trajectories: usize,
    pub epochs: usize,
}

impl CkptMeta {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("meta serializes")
    }

    pub fn parse(meta: &str) -> Result<CkptMeta> {
        serde_json::from_str(meta)
            .map_err(|e| Error::contract(format!("checkpoint meta does not parse: {e}")))
    }
}

pub type MetricsLog = Vec<(usize, f64)>;

/// Cosine decay from the peak rate to 10% of it over the training run.
fn lr_at(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let progress = step as f64 / (total - 1) as f64;
    let floor = 0.1 * base;
    floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Write a metrics log as `step,loss` CSV.
pub fn write_metrics(log: &MetricsLog, path: &Path) -> Result<()> {
    let mut text = String::from("step,loss\n");
    for (step, loss) in log {
        text.push_str(&format!("{step},{loss}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn steps_per_epoch(total_frames: usize, plan: &StagePlan) -> usize {
    (total_frames / (plan.stride * plan.batch_size)).max(1)
}

/// Stage-1: autoregressive pre-training over an embodiment mixture. Corpora
/// are (embodiment id, episodes, mixture weight); each batch is drawn wholly
/// from one corpus picked by weight, with that embodiment's tokenizer.
pub fn stage1_train(
    cfg: &BackboneConfig,
    plan: &StagePlan,
    corpora: &[(String, Vec<Episode>, f64)],
    tokenizers: &BTreeMap<String, Tokenizer>,
) -> Result<(ParamStore, MetricsLog)> {
    if plan.stage != Stage::Stage1 {
        return Err(Error::contract("stage1_train requires a stage1 plan"));
    }
    let chunk_h = tokenizers
        .values()
        .next()
        .map(|t| t.config.chunk_horizon)
        .ok_or_else(|| Error::contract("stage1_train needs at least one tokenizer"))?;
    let mut samplers = Vec::new();
    let mut weights = Vec::new();
    let mut total_frames = 0usize;
    for (emb, episodes, weight) in corpora {
        if !tokenizers.contains_key(emb) {
            return Err(Error::contract(format!("no tokenizer for embodiment `{emb}`")));
        }
        let sampler = Sampler::new(episodes, Purpose::Stage1, chunk_h)?;
        total_frames += sampler.n_frames();
        samplers.push((emb.clone(), sampler));
        weights.push(*weight);
    }
    let weight_total: f64 = weights.iter().sum();
    if weight_total <= 0.0 {
        return Err(Error::contract("mixture weights must sum to a positive value"));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut store = init_backbone(cfg, &mut init_rng);
    let mut mix_rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x5131);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0xba7c);
    let mut log = MetricsLog::new();
    let spe = steps_per_epoch(total_frames, plan);
    let total_steps = spe * plan.epochs;
    let mut step = 0usize;
    for _epoch in 0..plan.epochs {
        for _ in 0..spe {
            let pick = pick_weighted(&weights, weight_total, &mut mix_rng);
            let (emb, sampler) = &samplers[pick];
            let tokenizer = &tokenizers[emb];
            let Batch::Chunks(samples) = sampler.batch(plan.batch_size, &mut batch_rng) else {
                unreachable!("stage1 sampler yields chunk batches");
            };
            store.zero_grads();
            let mut ctx = NetCtx::<f32>::new(&store, |_| true);
            let loss = ar_loss_graph(&mut ctx, cfg, tokenizer, &samples)?;
            let mut graph = ctx.into_graph();
            let loss_val = graph.value(loss).data[0] as f64;
            graph.backward(loss)?;
            store.accumulate_grads(&graph)?;
            store.adam_step(AdamParams::with_lr(lr_at(plan.lr, step, total_steps)), |_| true);
            log.push((step, loss_val));
            step += 1;
        }
    }
    Ok((store, log))
}

pub fn pick_weighted(weights: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let r: f64 = rng.gen_range(0.0..total);
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if r < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Initialize a stage-2 parameter set from a stage-1 checkpoint: backbone
/// tensors copied by name, flow expert fresh from the seed.
pub fn transfer_weights(
    stage1_ckpt: &Path,
    cfg: &BackboneConfig,
    chunk_h: usize,
    action_dim: usize,
    seed: u64,
) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut target = init_backbone(cfg, &mut rng);
    add_expert_params(&mut target, cfg, action_dim, chunk_h, &mut rng);
    let require: Vec<String> = target
        .names()
        .filter(|n| !n.starts_with("expert."))
        .cloned()
        .collect();
    load_with_transfer(stage1_ckpt, &mut target, TransferMap::CopyMatchingNames, &require)?;
    Ok(target)
}

/// Fresh parameters with an expert, for scratch baselines.
pub fn scratch_init(
    cfg: &BackboneConfig,
    chunk_h: usize,
    action_dim: usize,
    seed: u64,
) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = init_backbone(cfg, &mut rng);
    add_expert_params(&mut store, cfg, action_dim, chunk_h, &mut rng);
    store
}

fn single_embodiment(corpus: &[Episode]) -> Result<String> {
    let mut emb: Option<&str> = None;
    for ep in corpus {
        match emb {
            None => emb = Some(&ep.embodiment),
            Some(e) if e == ep.embodiment => {}
            Some(e) => {
                return Err(Error::contract(format!(
                    "corpus mixes embodiments `{e}` and `{}`",
                    ep.embodiment
                )))
            }
        }
    }
    emb.map(str::to_string)
        .ok_or_else(|| Error::contract("empty corpus"))
}

/// Stage-2 / post-training loop: flow-matching on subtask-instruction
/// batches, backbone and expert end to end (AR head untouched).
pub fn stage2_train(
    cfg: &BackboneConfig,
    plan: &StagePlan,
    corpus: &[Episode],
    mut store: ParamStore,
    chunk_h: usize,
    action_dim: usize,
) -> Result<(ParamStore, MetricsLog)> {
    single_embodiment(corpus)?;
    if !store.contains("expert.out.w") {
        return Err(Error::contract("stage2_train needs flow-expert parameters"));
    }
    let sampler = Sampler::new(corpus, Purpose::Stage2, chunk_h)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0xba7c);
    let mut flow_rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0xf102);
    let freeze = plan.freeze_backbone;
    let trainable = move |name: &str| -> bool {
        if freeze {
            name.starts_with("expert.")
        } else {
            true
        }
    };
    let mut log = MetricsLog::new();
    let spe = steps_per_epoch(sampler.n_frames(), plan);
    let total_steps = spe * plan.epochs;
    let mut step = 0usize;
    for _epoch in 0..plan.epochs {
        for _ in 0..spe {
            let Batch::Chunks(samples) = sampler.batch(plan.batch_size, &mut batch_rng) else {
                unreachable!("stage2 sampler yields chunk batches");
            };
            store.zero_grads();
            let mut ctx = NetCtx::<f32>::new(&store, trainable);
            let (loss, _) =
                flow_loss_graph(&mut ctx, cfg, chunk_h, action_dim, &samples, &mut flow_rng)?;
            let mut graph = ctx.into_graph();
            let loss_val = graph.value(loss).data[0] as f64;
            graph.backward(loss)?;
            store.accumulate_grads(&graph)?;
            store.adam_step(
                AdamParams::with_lr(lr_at(plan.lr, step, total_steps)),
                trainable,
            );
            log.push((step, loss_val));
            step += 1;
        }
    }
    Ok((store, log))
}

/// Deterministically cap a task corpus by episode id order.
pub fn cap_corpus(corpus: &[Episode], cap: usize) -> Vec<Episode> {
    let mut sorted: Vec<&Episode> = corpus.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    sorted.into_iter().take(cap).cloned().collect()
}

/// Post-training: same objective and machinery as stage 2 on a capped
/// single-task corpus.
pub fn posttrain(
    cfg: &BackboneConfig,
    plan: &StagePlan,
    task_corpus: &[Episode],
    init: ParamStore,
    chunk_h: usize,
    action_dim: usize,
) -> Result<(ParamStore, MetricsLog, usize)> {
    if plan.stage != Stage::PostTrain && plan.stage != Stage::FewShot {
        return Err(Error::contract("posttrain requires a posttrain or fewshot plan"));
    }
    plan.validate()?;
    let cap = plan.trajectory_cap.unwrap_or(match plan.stage {
        Stage::FewShot => FEWSHOT_CAP,
        _ => POSTTRAIN_CAP,
    });
    let capped = cap_corpus(task_corpus, cap);
    let used = capped.len();
    let inner = StagePlan {
        stage: Stage::Stage2,
        ..plan.clone()
    };
    let (store, log) = stage2_train(cfg, &inner, &capped, init, chunk_h, action_dim)?;
    Ok((store, log, used))
}

/// Save a trained model with provenance metadata.
#[allow(clippy::too_many_arguments)]
pub fn save_model(
    store: &ParamStore,
    cfg: &BackboneConfig,
    meta: &CkptMeta,
    path: &Path,
) -> Result<()> {
    save_checkpoint(store, cfg.hash(), &meta.to_json(), path)
}

pub fn load_model(path: &Path, cfg: &BackboneConfig) -> Result<(ParamStore, CkptMeta)> {
    let loaded = read_checkpoint(path)?;
    if loaded.config_hash != cfg.hash() {
        return Err(Error::contract(format!(
            "checkpoint {} was built for a different architecture",
            path.display()
        )));
    }
    let meta = CkptMeta::parse(&loaded.meta)?;
    Ok((loaded.store, meta))
}
