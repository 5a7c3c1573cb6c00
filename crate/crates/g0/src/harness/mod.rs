//! Benchmark evaluation and the experiment matrix. Every task is scored as
//! the mean rubric progress over a fixed, committed 10-seed list; the matrix
//! crosses init provenance with the full and few-shot post-training
//! protocols and emits CSV/JSON/SVG reports plus a failure manifest for any
//! cells that error out.

pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cfg::Config;
use crate::curriculum::{self, CkptMeta, Stage, StagePlan};
use crate::data::episode::Episode;
use crate::error::{Error, Result};
use crate::net::model::BackboneConfig;
use crate::net::store::ParamStore;
use crate::planner::{PlannerModel, TemplateTable};
use crate::runtime::{
    run_episode, ExecutorConfig, FlowPolicy, OracleExecutor, OraclePlanner, PlannerKind,
    TrainedPlanner,
};
use crate::sim::scene::{SceneSpec, SkillCategory};

/// The four benchmark tasks and their rubric maxima.
pub const BENCHMARKS: [(&str, u32); 4] = [
    ("table_bussing", 6),
    ("microwave", 5),
    ("bed_making", 4),
    ("blocks_stacking", 6),
];

/// Fixed evaluation seeds, versioned here; reports embed their hash.
pub const EVAL_SEEDS: [u64; 10] = [11, 23, 42, 97, 123, 256, 389, 512, 777, 901];

pub fn seed_list_hash() -> String {
    let mut hasher = Sha256::new();
    for s in EVAL_SEEDS {
        hasher.update(s.to_le_bytes());
    }
    hex_prefix(&hasher.finalize(), 16)
}

pub fn config_fingerprint(cfg_text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(cfg_text.as_bytes());
    hasher.update(seed_list_hash().as_bytes());
    hex_prefix(&hasher.finalize(), 16)
}

fn hex_prefix(digest: &[u8], n: usize) -> String {
    digest
        .iter()
        .take(n / 2)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// System-1 under evaluation.
pub enum EvalPolicy<'a> {
    /// Scripted expert rolled through the chunk interface.
    Oracle,
    Flow {
        net_cfg: &'a BackboneConfig,
        store: &'a ParamStore,
        chunk_h: usize,
        action_dim: usize,
        flow_steps: usize,
    },
}

pub enum EvalPlanner<'a> {
    Oracle,
    Trained(&'a PlannerModel),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub max_points: u32,
    /// (seed, score) for each of the 10 runs.
    pub runs: Vec<(u64, u32)>,
    pub mean: f64,
    /// Mean points per skill category over the runs.
    pub per_skill: BTreeMap<String, f64>,
    pub seed_hash: String,
    pub provenance: String,
}

/// Run the benchmark protocol for one task: one episode per committed seed,
/// aggregated mean plus the per-skill decomposition.
pub fn evaluate(
    cfg: &Config,
    task: &str,
    policy: &mut EvalPolicy,
    planner: &EvalPlanner,
    provenance: &str,
    trace_dir: Option<&Path>,
) -> Result<TaskReport> {
    let scene = SceneSpec::from_config(cfg, task)?;
    let spec = scene.embodiment_spec()?;
    if let EvalPolicy::Flow { action_dim, .. } = policy {
        if *action_dim != spec.action_dim {
            return Err(Error::contract(format!(
                "checkpoint action dim {} does not fit embodiment `{}` ({} dims)",
                action_dim, spec.id, spec.action_dim
            )));
        }
    }
    let templates = TemplateTable::from_config(cfg)?;
    let exec_cfg = ExecutorConfig::from_config(cfg, 7)?;
    let mut runs = Vec::with_capacity(EVAL_SEEDS.len());
    let mut skill_totals: BTreeMap<String, f64> = BTreeMap::new();
    for seed in EVAL_SEEDS {
        let mut planner_kind = match planner {
            EvalPlanner::Oracle => PlannerKind::Oracle(OraclePlanner::new(task, templates.clone())),
            EvalPlanner::Trained(model) => PlannerKind::Trained(TrainedPlanner {
                model,
                task_name: scene.instruction.clone(),
                templates: templates.clone(),
            }),
        };
        let trace = match policy {
            EvalPolicy::Oracle => {
                let mut p = OracleExecutor::new(task, exec_cfg.chunk_horizon);
                run_episode(&scene, seed, &mut p, &mut planner_kind, &exec_cfg)?
            }
            EvalPolicy::Flow {
                net_cfg,
                store,
                chunk_h,
                action_dim,
                flow_steps,
            } => {
                let mut p = FlowPolicy {
                    cfg: net_cfg,
                    store,
                    chunk_h: *chunk_h,
                    action_dim: *action_dim,
                    n_steps: *flow_steps,
                };
                run_episode(&scene, seed, &mut p, &mut planner_kind, &exec_cfg)?
            }
        };
        if let Some(dir) = trace_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            trace.save(&dir.join(format!("{task}-{seed:04}")))?;
        }
        // Final per-skill decomposition from a replayed terminal state.
        let per_skill = final_per_skill(cfg, &trace)?;
        for (cat, pts) in per_skill {
            *skill_totals.entry(cat.name().to_string()).or_insert(0.0) += pts as f64;
        }
        runs.push((seed, trace.final_score));
    }
    let mean = runs.iter().map(|(_, s)| *s as f64).sum::<f64>() / runs.len() as f64;
    let per_skill = skill_totals
        .into_iter()
        .map(|(k, v)| (k, v / runs.len() as f64))
        .collect();
    Ok(TaskReport {
        task: task.to_string(),
        max_points: scene.max_points,
        runs,
        mean,
        per_skill,
        seed_hash: seed_list_hash(),
        provenance: provenance.to_string(),
    })
}

fn final_per_skill(
    cfg: &Config,
    trace: &crate::runtime::EpisodeTrace,
) -> Result<BTreeMap<SkillCategory, u32>> {
    let scene = SceneSpec::from_config(cfg, &trace.task)?;
    let mut world = crate::sim::world::reset(&scene, trace.scene_seed)?;
    for tick in &trace.ticks {
        world = world.step(&tick.action, scene.world.dt)?;
    }
    let (_, per_skill) = crate::sim::rubric::check_progress(&world, &trace.task)?;
    Ok(per_skill)
}

/// One experiment-matrix cell result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixCell {
    pub provenance: String,
    pub protocol: String,
    pub task: String,
    pub trajectories: usize,
    pub epochs: usize,
    pub train_seed: u64,
    pub report: TaskReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixReport {
    pub cells: Vec<MatrixCell>,
    pub failures: Vec<String>,
    pub fingerprint: String,
    pub seed_hash: String,
}

/// Init checkpoints the matrix crosses with post-training protocols.
pub struct MatrixInits<'a> {
    pub stage1_ckpt: &'a Path,
    pub stage2_scratch_ckpt: &'a Path,
    pub stage2_full_ckpt: &'a Path,
    pub scratch_seed: u64,
}

pub const PROVENANCES: [&str; 4] = ["scratch", "stage1", "stage2", "full"];

/// Materialize an init parameter set for a provenance.
pub fn provenance_init(
    name: &str,
    inits: &MatrixInits,
    net_cfg: &BackboneConfig,
    chunk_h: usize,
    action_dim: usize,
) -> Result<ParamStore> {
    match name {
        "scratch" => Ok(curriculum::scratch_init(
            net_cfg,
            chunk_h,
            action_dim,
            inits.scratch_seed,
        )),
        "stage1" => curriculum::transfer_weights(
            inits.stage1_ckpt,
            net_cfg,
            chunk_h,
            action_dim,
            inits.scratch_seed,
        ),
        "stage2" => Ok(curriculum::load_model(inits.stage2_scratch_ckpt, net_cfg)?.0),
        "full" => Ok(curriculum::load_model(inits.stage2_full_ckpt, net_cfg)?.0),
        other => Err(Error::contract(format!("unknown provenance `{other}`"))),
    }
}

/// Train one (provenance, protocol, task) cell and evaluate it with the
/// oracle planner.
#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    cfg: &Config,
    net_cfg: &BackboneConfig,
    corpus: &[Episode],
    inits: &MatrixInits,
    provenance: &str,
    stage: Stage,
    task: &str,
    train_seed: u64,
    chunk_h: usize,
) -> Result<MatrixCell> {
    let scene = SceneSpec::from_config(cfg, task)?;
    let action_dim = scene.embodiment_spec()?.action_dim;
    let task_corpus: Vec<Episode> = corpus
        .iter()
        .filter(|e| e.task == task)
        .cloned()
        .collect();
    if task_corpus.is_empty() {
        return Err(Error::contract(format!("no `{task}` episodes in the corpus")));
    }
    let plan = StagePlan {
        seed: train_seed,
        ..StagePlan::from_config(cfg, stage, train_seed)?
    };
    let init = provenance_init(provenance, inits, net_cfg, chunk_h, action_dim)?;
    let (store, _, used) = curriculum::posttrain(net_cfg, &plan, &task_corpus, init, chunk_h, action_dim)?;
    let mut policy = EvalPolicy::Flow {
        net_cfg,
        store: &store,
        chunk_h,
        action_dim,
        flow_steps: ExecutorConfig::from_config(cfg, 0)?.flow_steps,
    };
    let report = evaluate(cfg, task, &mut policy, &EvalPlanner::Oracle, provenance, None)?;
    Ok(MatrixCell {
        provenance: provenance.to_string(),
        protocol: stage.name().to_string(),
        task: task.to_string(),
        trajectories: used,
        epochs: plan.epochs,
        train_seed,
        report,
    })
}

/// The full grid: provenances x {posttrain, fewshot} x benchmark tasks.
/// Failed cells are recorded and skipped.
#[allow(clippy::too_many_arguments)]
pub fn experiment_matrix(
    cfg: &Config,
    cfg_text: &str,
    net_cfg: &BackboneConfig,
    corpus: &[Episode],
    inits: &MatrixInits,
    tasks: &[&str],
    base_seed: u64,
    chunk_h: usize,
    out_dir: &Path,
) -> Result<MatrixReport> {
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for stage in [Stage::PostTrain, Stage::FewShot] {
        for task in tasks {
            // Paired seeds: identical across provenances for each
            // (task, protocol) pair.
            let train_seed = pair_seed(base_seed, stage.name(), task);
            for provenance in PROVENANCES {
                match run_cell(
                    cfg, net_cfg, corpus, inits, provenance, stage, task, train_seed, chunk_h,
                ) {
                    Ok(cell) => cells.push(cell),
                    Err(e) => failures.push(format!(
                        "{provenance}/{}/{task}: {e}",
                        stage.name()
                    )),
                }
            }
        }
    }
    let report = MatrixReport {
        cells,
        failures,
        fingerprint: config_fingerprint(cfg_text),
        seed_hash: seed_list_hash(),
    };
    report::emit_matrix(&report, out_dir)?;
    Ok(report)
}

/// Deterministic per-(protocol, task) training seed shared by provenances.
pub fn pair_seed(base: u64, protocol: &str, task: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(protocol.as_bytes());
    hasher.update(task.as_bytes());
    u64::from_le_bytes(hasher.finalize()[..8].try_into().unwrap())
}

/// Where pipeline artifacts live under a working directory.
#[derive(Debug, Clone)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: &Path) -> Workdir {
        Workdir {
            root: root.to_path_buf(),
        }
    }

    pub fn corpus(&self, name: &str) -> PathBuf {
        self.root.join("corpora").join(name)
    }

    pub fn tokenizer(&self, embodiment: &str) -> PathBuf {
        self.root.join("tok").join(format!("{embodiment}.g0tk"))
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("ckpt").join(format!("{name}.g0ck"))
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{name}.csv"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn traces(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn ensure(&self) -> Result<()> {
        for sub in ["corpora", "tok", "ckpt", "metrics", "reports", "traces"] {
            let p = self.root.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Read a VLA checkpoint plus its meta, validating against the net config.
pub fn load_vla(path: &Path, net_cfg: &BackboneConfig) -> Result<(ParamStore, CkptMeta)> {
    curriculum::load_model(path, net_cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmarks_match_rubric_maxima() {
        let cfg = Config::default_config();
        for (task, max) in BENCHMARKS {
            let scene = SceneSpec::from_config(&cfg, task).unwrap();
            assert_eq!(scene.max_points, max, "task {task}");
        }
    }

    #[test]
    fn oracle_evaluation_hits_max_on_every_task() {
        let cfg = Config::default_config();
        for (task, max) in BENCHMARKS {
            let report = evaluate(
                &cfg,
                task,
                &mut EvalPolicy::Oracle,
                &EvalPlanner::Oracle,
                "oracle",
                None,
            )
            .unwrap();
            assert_eq!(report.runs.len(), 10);
            assert_eq!(report.mean, max as f64, "task {task}");
        }
    }

    #[test]
    fn pair_seeds_are_stable_and_distinct() {
        let a = pair_seed(1, "fewshot", "table_bussing");
        let b = pair_seed(1, "fewshot", "table_bussing");
        assert_eq!(a, b);
        assert_ne!(a, pair_seed(1, "fewshot", "microwave"));
        assert_ne!(a, pair_seed(1, "posttrain", "table_bussing"));
    }

    #[test]
    fn seed_hash_is_stable() {
        assert_eq!(seed_list_hash(), seed_list_hash());
        assert_eq!(seed_list_hash().len(), 16);
    }
}
