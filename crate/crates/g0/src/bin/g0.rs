//! Command-line driver for the pipeline: corpus collection, statistics,
//! tokenizer fitting, staged training, planner training, evaluation, the
//! dual-system runtime, replay verification, and the experiment matrix.
//!
//! Exit status: 0 on success, 1 on usage/contract violations, 2 on I/O or
//! format errors.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use g0::cfg::Config;
use g0::curriculum::{self, CkptMeta, Stage, StagePlan};
use g0::data::corpus::{read_corpus, CorpusWriter};
use g0::data::episode::{record_episode, Episode};
use g0::data::stats::corpus_stats;
use g0::error::{Error, Result};
use g0::harness::{
    self, config_fingerprint, evaluate, EvalPlanner, EvalPolicy, MatrixInits, Workdir,
};
use g0::net::model::BackboneConfig;
use g0::planner::{
    instruction_accuracy, write_accuracy_csv, ParaphraseTable, PlannerModel, PlannerTrainOptions,
    Predictor, TemplateTable,
};
use g0::runtime::{
    replay, run_episode, EpisodeTrace, ExecutorConfig, FlowPolicy, OracleExecutor, OraclePlanner,
    PlannerKind, ReplayOutcome, TrainedPlanner,
};
use g0::sim::SceneSpec;
use g0::tok::{Tokenizer, TokenizerConfig};

#[derive(Parser)]
#[command(
    name = "g0",
    about = "Desk-scale dual-system robot learning pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file; defaults to the built-in desk configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed for everything the subcommand does.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Artifact directory (corpora, tokenizers, checkpoints, reports).
    #[arg(long, default_value = "runs")]
    workdir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Record demonstration corpora with the scripted experts.
    Collect {
        #[command(flatten)]
        common: Common,
    },
    /// Corpus statistics (counts, histograms, skills, body-part usage).
    Stats {
        #[command(flatten)]
        common: Common,
        /// Corpus name under the workdir (e.g. stage2).
        #[arg(long, default_value = "stage2")]
        corpus: String,
    },
    /// Fit per-embodiment action tokenizers from the stage-1 corpora.
    FitTokenizer {
        #[command(flatten)]
        common: Common,
    },
    /// Cross-embodiment autoregressive pre-training.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
    },
    /// Single-embodiment flow-matching pre-training.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        /// Initial weights: "stage1" (transfer) or "scratch".
        #[arg(long, default_value = "stage1")]
        init: String,
    },
    /// Task post-training under the full or few-shot protocol.
    Posttrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: String,
        /// Provenance: scratch, stage1, stage2, or full.
        #[arg(long, default_value = "full")]
        init: String,
        /// Protocol: "full" (<=100 trajectories) or "fewshot" (20).
        #[arg(long, default_value = "full")]
        protocol: String,
    },
    /// Train the subtask planner on the stage-2 corpus.
    TrainPlanner {
        #[command(flatten)]
        common: Common,
    },
    /// Benchmark a checkpoint (or the oracle) on one task.
    Eval {
        #[command(flatten)]
        common: Common,
        /// VLA checkpoint path, or "oracle".
        #[arg(long)]
        ckpt: String,
        #[arg(long)]
        task: String,
        /// Planner checkpoint path, or "oracle".
        #[arg(long, default_value = "oracle")]
        planner: String,
        /// Also write per-episode traces.
        #[arg(long, default_value_t = true)]
        traces: bool,
    },
    /// Run a single dual-system episode and write its trace.
    RunDual {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: String,
        #[arg(long, default_value = "oracle")]
        ckpt: String,
        #[arg(long, default_value = "oracle")]
        planner: String,
    },
    /// Re-simulate a trace and verify its score record.
    Replay {
        #[command(flatten)]
        common: Common,
        /// Path to a .act trace file.
        #[arg(long)]
        trace: PathBuf,
    },
    /// Train and evaluate the provenance-by-protocol grid.
    Matrix {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes; anything else is usage.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(common: &Common) -> Result<(Config, String)> {
    match &common.config {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| Error::io(path.clone(), e))?;
            Ok((Config::parse(&text)?, text))
        }
        None => Ok((
            Config::default_config(),
            g0::cfg::DEFAULT_CONFIG.to_string(),
        )),
    }
}

/// Episode seed ranges per corpus: disjoint blocks so held-out data can never
/// collide with training data for any base seed below 1000.
fn corpus_seed(corpus_index: u64, base_seed: u64, i: u64) -> u64 {
    corpus_index * 100_000_000 + (base_seed % 1000) * 100_000 + i
}

const CORPORA: [(&str, u64); 5] = [
    ("stage1_full", 1),
    ("stage1_single_arm", 2),
    ("stage1_dual_arm", 3),
    ("stage2", 4),
    ("heldout", 5),
];

fn tasks_for(corpus: &str) -> (&'static str, Vec<&'static str>) {
    match corpus {
        "stage1_single_arm" => ("single_arm", vec!["arm_pick"]),
        "stage1_dual_arm" => ("dual_arm", vec!["dual_sort"]),
        _ => (
            "full",
            vec!["table_bussing", "microwave", "bed_making", "blocks_stacking"],
        ),
    }
}

fn collect(common: &Common) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    let wd = Workdir::new(&common.workdir);
    wd.ensure()?;
    let section = cfg.require_section("collect")?;
    for (name, corpus_idx) in CORPORA {
        let count = match name {
            "stage1_full" => section.usize_or("stage1_full", 300)?,
            "stage1_single_arm" => section.usize_or("stage1_single_arm", 300)?,
            "stage1_dual_arm" => section.usize_or("stage1_dual_arm", 300)?,
            "stage2" => section.usize_or("stage2", 600)?,
            _ => section.usize_or("heldout", 48)?,
        };
        let (embodiment, tasks) = tasks_for(name);
        let dir = wd.corpus(name);
        let mut writer = CorpusWriter::create(&dir)?;
        let mut kept = 0usize;
        for i in 0..count {
            let task = tasks[i % tasks.len()];
            let seed = corpus_seed(corpus_idx, common.seed, i as u64);
            let ep = record_episode(&cfg, task, embodiment, seed)?;
            if ep.quality.pass {
                kept += 1;
            }
            writer.add(&ep)?;
        }
        writer.finish()?;
        println!(
            "collected {name}: {count} episodes ({kept} pass quality) -> {}",
            dir.display()
        );
    }
    Ok(())
}

fn load_named_corpus(wd: &Workdir, name: &str) -> Result<Vec<Episode>> {
    read_corpus(&wd.corpus(name))
}

fn stats(common: &Common, corpus: &str) -> Result<()> {
    let (_, _) = load_config(common)?;
    let wd = Workdir::new(&common.workdir);
    let episodes = load_named_corpus(&wd, corpus)?;
    let stats = corpus_stats(&episodes)?;
    let json = serde_json::to_string_pretty(&stats)
        .map_err(|e| Error::contract(format!("stats serialization: {e}")))?;
    println!("{json}");
    wd.ensure()?;
    let path = wd.reports().join(format!("stats_{corpus}.json"));
    std::fs::write(&path, &json).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Chunk starts from every passing episode, for tokenizer fitting.
fn chunks_from(episodes: &[Episode], h: usize, budget: usize) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    'outer: for ep in episodes.iter().filter(|e| e.quality.pass) {
        let dim = ep.frames.first().map(|f| f.action.len()).unwrap_or(0);
        for f in 0..ep.frames.len() {
            let mut c = Vec::with_capacity(h * dim);
            for step in 0..h {
                let idx = (f + step).min(ep.frames.len() - 1);
                c.extend_from_slice(&ep.frames[idx].action);
            }
            out.push(c);
            if out.len() >= budget {
                break 'outer;
            }
        }
    }
    out
}

fn fit_tokenizer(common: &Common) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    let wd = Workdir::new(&common.workdir);
    wd.ensure()?;
    for (corpus, embodiment) in [
        ("stage1_full", "full"),
        ("stage1_single_arm", "single_arm"),
        ("stage1_dual_arm", "dual_arm"),
    ] {
        let episodes = load_named_corpus(&wd, corpus)?;
        let spec = g0::sim::EmbodimentSpec::by_id(embodiment)?;
        let tok_cfg = TokenizerConfig::from_config(&cfg, spec.action_dim)?;
        let chunks = chunks_from(&episodes, tok_cfg.chunk_horizon, 20_000);
        let tok = Tokenizer::fit(&chunks, tok_cfg)?;
        let path = wd.tokenizer(embodiment);
        tok.save(&path)?;
        println!(
            "fitted {embodiment}: vocab {} merges {} ({} warnings) -> {}",
            tok.vocab_size(),
            tok.merges.len(),
            tok.warnings.len(),
            path.display()
        );
    }
    Ok(())
}

fn chunk_horizon(cfg: &Config) -> Result<usize> {
    cfg.require_section("tokenizer")?.usize_or("horizon", 16)
}

fn train_stage1(common: &Common) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    let wd = Workdir::new(&common.workdir);
    wd.ensure()?;
    let net_cfg = BackboneConfig::from_config(&cfg)?;
    let plan = StagePlan::from_config(&cfg, Stage::Stage1, common.seed)?;
    let weights_section = cfg.require_section("stage1")?;
    let mut corpora = Vec::new();
    let mut tokenizers = BTreeMap::new();
    for (corpus, embodiment) in [
        ("stage1_full", "full"),
        ("stage1_single_arm", "single_arm"),
        ("stage1_dual_arm", "dual_arm"),
    ] {
        let eps = load_named_corpus(&wd, corpus)?;
        let weight = weights_section.f64_or(&format!("weight.{embodiment}"), 1.0)?;
        corpora.push((embodiment.to_string(), eps, weight));
        tokenizers.insert(
            embodiment.to_string(),
            Tokenizer::load(&wd.tokenizer(embodiment))?,
        );
    }
    let (store, log) = curriculum::stage1_train(&net_cfg, &plan, &corpora, &tokenizers)?;
    let meta = CkptMeta {
        kind: "vla".into(),
        stage: "stage1".into(),
        embodiment: "mixed".into(),
        chunk_h: chunk_horizon(&cfg)?,
        action_dim: net_cfg.proprio_dim,
        provenance: "scratch".into(),
        trajectories: corpora.iter().map(|(_, c, _)| c.len()).sum(),
        epochs: plan.epochs,
    };
    curriculum::save_model(&store, &net_cfg, &meta, &wd.checkpoint("stage1"))?;
    curriculum::write_metrics(&log, &wd.metrics("stage1"))?;
    println!(
        "stage1 done: {} steps, final loss {:.4} -> {}",
        log.len(),
        log.last().map(|(_, l)| *l).unwrap_or(f64::NAN),
        wd.checkpoint("stage1").display()
    );
    Ok(())
}

fn train_stage2(common: &Common, init: &str) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    let wd = Workdir::new(&common.workdir);
    wd.ensure()?;
    let net_cfg = BackboneConfig::from_config(&cfg)?;
    let plan = StagePlan::from_config(&cfg, Stage::Stage2, common.seed)?;
    let corpus = load_named_corpus(&wd, "stage2")?;
    let chunk_h = chunk_horizon(&cfg)?;
    let action_dim = g0::sim::EmbodimentSpec::by_id("full")?.action_dim;
    let (init_store, provenance, out_name) = match init {
        "stage1" => (
            curriculum::transfer_weights(
                &wd.checkpoint("stage1"),
                &net_cfg,
                chunk_h,
                action_dim,
                common.seed,
            )?,
            "stage1+stage2",
            "stage2_full",
        ),
        "scratch" => (
            curriculum::scratch_init(&net_cfg, chunk_h, action_dim, common.seed),
            "stage2-only",
            "stage2_scratch",
        ),
        other => {
            return Err(Error::contract(format!(
                "--init must be `stage1` or `scratch`, got `{other}`"
            )))
        }
    };
    let (store, log) =
        curriculum::stage2_train(&net_cfg, &plan, &corpus, init_store, chunk_h, action_dim)?;
    let meta = CkptMeta {
        kind: "vla".into(),
        stage: "stage2".into(),
        embodiment: "full".into(),
        chunk_h,
        action_dim,
        provenance: provenance.into(),
        trajectories: corpus.len(),
        epochs: plan.epochs,
    };
    curriculum::save_model(&store, &net_cfg, &meta, &wd.checkpoint(out_name))?;
    curriculum::write_metrics(&log, &wd.metrics(out_name))?;
    println!(
        "stage2 ({init}) done: {} steps, final loss {:.4} -> {}",
        log.len(),
        log.last().map(|(_, l)| *l).unwrap_or(f64::NAN),
        wd.checkpoint(out_name).display()
    );
    Ok(())
}

fn posttrain_cmd(common: &Common, task: &str, init: &str, protocol: &str) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    let wd = Workdir::new(&common.workdir);
    wd.ensure()?;
    let net_cfg = BackboneConfig::from_config(&cfg)?;
    let stage = match protocol {
        "full" => Stage::PostTrain,
        "fewshot" => Stage::FewShot,
        other => {
            return Err(Error::contract(format!(
                "--protocol must be `full` or `fewshot`, got `{other}`"
            )))
        }
    };
    let plan = StagePlan::from_config(&cfg, stage, common.seed)?;
    let corpus = load_named_corpus(&wd, "stage2")?;
    let task_corpus: Vec<Episode> = corpus.iter().filter(|e| e.task == task).cloned().collect();
    let chunk_h = chunk_horizon(&cfg)?;
    let scene = SceneSpec::from_config(&cfg, task)?;
    let action_dim = scene.embodiment_spec()?.action_dim;
    let inits = MatrixInits {
        stage1_ckpt: &wd.checkpoint("stage1"),
        stage2_scratch_ckpt: &wd.checkpoint("stage2_scratch"),
        stage2_full_ckpt: &wd.checkpoint("stage2_full"),
        scratch_seed: common.seed,
    };
    let init_store = harness::provenance_init(init, &inits, &net_cfg, chunk_h, action_dim)?;
    let (store, log, used) =
        curriculum::posttrain(&net_cfg, &plan, &task_corpus, init_store, chunk_h, action_dim)?;
    let name = format!("post_{task}_{init}_{protocol}");
    let meta = CkptMeta {
        kind: "vla".into(),
        stage: stage.name().into(),
        embodiment: scene.embodiment.clone(),
        chunk_h,
        action_dim,
        provenance: init.into(),
        trajectories: used,
        epochs: plan.epochs,
    };
    curriculum::save_model(&store, &net_cfg, &meta, &wd.checkpoint(&name))?;
    curriculum::write_metrics(&log, &wd.metrics(&name))?;
    println!(
        "{protocol} post-training on {task} from {init}: {used} trajectories, {} epochs -> {}",
        plan.epochs,
        wd.checkpoint(&name).display()
    );
    Ok(())
}

fn train_planner_cmd(common: &Common) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    let wd = Workdir::new(&common.workdir);
    wd.ensure()?;
    let net_cfg = BackboneConfig::from_config(&cfg)?;
    let corpus = load_named_corpus(&wd, "stage2")?;
    let opts = PlannerTrainOptions::from_config(&cfg, common.seed)?;
    let paraphrases = ParaphraseTable::from_config(&cfg);
    let (model, log) = g0::planner::train_planner(&net_cfg, &corpus, &paraphrases, &opts)?;
    model.save(&wd.checkpoint("planner"))?;
    curriculum::write_metrics(&log, &wd.metrics("planner"))?;
    let heldout = load_named_corpus(&wd, "heldout")?;
    let rows = instruction_accuracy(Predictor::Trained(&model), &heldout, model.k)?;
    write_accuracy_csv(&rows, &wd.reports().join("planner_accuracy.csv"))?;
    for r in &rows {
        println!(
            "planner accuracy on {}: {:.1}% over {} frames",
            r.task,
            100.0 * r.accuracy,
            r.frames
        );
    }
    Ok(())
}

fn eval_cmd(common: &Common, ckpt: &str, task: &str, planner: &str, traces: bool) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    let wd = Workdir::new(&common.workdir);
    wd.ensure()?;
    let net_cfg = BackboneConfig::from_config(&cfg)?;
    let planner_model;
    let eval_planner = match planner {
        "oracle" => EvalPlanner::Oracle,
        path => {
            planner_model = PlannerModel::load(std::path::Path::new(path), &net_cfg)?;
            EvalPlanner::Trained(&planner_model)
        }
    };
    let trace_dir = traces.then(|| wd.traces());
    let report = match ckpt {
        "oracle" => evaluate(
            &cfg,
            task,
            &mut EvalPolicy::Oracle,
            &eval_planner,
            "oracle",
            trace_dir.as_deref(),
        )?,
        path => {
            let (store, meta) = harness::load_vla(std::path::Path::new(path), &net_cfg)?;
            let mut policy = EvalPolicy::Flow {
                net_cfg: &net_cfg,
                store: &store,
                chunk_h: meta.chunk_h,
                action_dim: meta.action_dim,
                flow_steps: ExecutorConfig::from_config(&cfg, 0)?.flow_steps,
            };
            evaluate(
                &cfg,
                task,
                &mut policy,
                &eval_planner,
                &meta.provenance,
                trace_dir.as_deref(),
            )?
        }
    };
    harness::report::emit_task_report(&report, &wd.reports())?;
    println!(
        "eval {task}: mean {:.2}/{} over {} runs (seed hash {})",
        report.mean,
        report.max_points,
        report.runs.len(),
        report.seed_hash
    );
    Ok(())
}

fn run_dual(common: &Common, task: &str, ckpt: &str, planner: &str) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    let wd = Workdir::new(&common.workdir);
    wd.ensure()?;
    let net_cfg = BackboneConfig::from_config(&cfg)?;
    let scene = SceneSpec::from_config(&cfg, task)?;
    let templates = TemplateTable::from_config(&cfg)?;
    let exec_cfg = ExecutorConfig::from_config(&cfg, common.seed)?;
    let planner_model;
    let mut planner_kind = match planner {
        "oracle" => PlannerKind::Oracle(OraclePlanner::new(task, templates)),
        path => {
            planner_model = PlannerModel::load(std::path::Path::new(path), &net_cfg)?;
            PlannerKind::Trained(TrainedPlanner {
                model: &planner_model,
                task_name: scene.instruction.clone(),
                templates,
            })
        }
    };
    let trace: EpisodeTrace = match ckpt {
        "oracle" => {
            let mut p = OracleExecutor::new(task, exec_cfg.chunk_horizon);
            run_episode(&scene, common.seed, &mut p, &mut planner_kind, &exec_cfg)?
        }
        path => {
            let (store, meta) = harness::load_vla(std::path::Path::new(path), &net_cfg)?;
            let mut p = FlowPolicy {
                cfg: &net_cfg,
                store: &store,
                chunk_h: meta.chunk_h,
                action_dim: meta.action_dim,
                n_steps: exec_cfg.flow_steps,
            };
            run_episode(&scene, common.seed, &mut p, &mut planner_kind, &exec_cfg)?
        }
    };
    let base = wd.traces().join(format!("dual-{task}-{:04}", common.seed));
    let (csv, act) = trace.save(&base)?;
    println!(
        "episode: score {}/{} in {} ticks ({} waits, {} chunk requests)",
        trace.final_score,
        trace.max_score,
        trace.ticks.len(),
        trace.waits,
        trace.chunk_requests
    );
    println!("trace -> {} / {}", csv.display(), act.display());
    Ok(())
}

fn replay_cmd(common: &Common, trace_path: &PathBuf) -> Result<()> {
    let (cfg, _) = load_config(common)?;
    let trace = EpisodeTrace::load(trace_path)?;
    match replay(&trace, &cfg)? {
        ReplayOutcome::Verified => {
            println!(
                "verified: {} ticks, final {}/{}",
                trace.ticks.len(),
                trace.final_score,
                trace.max_score
            );
            Ok(())
        }
        ReplayOutcome::Diverged { first_tick } => Err(Error::contract(format!(
            "replay diverged at tick {first_tick}"
        ))),
    }
}

fn matrix_cmd(common: &Common) -> Result<()> {
    let (cfg, cfg_text) = load_config(common)?;
    let wd = Workdir::new(&common.workdir);
    wd.ensure()?;
    let net_cfg = BackboneConfig::from_config(&cfg)?;
    let corpus = load_named_corpus(&wd, "stage2")?;
    let chunk_h = chunk_horizon(&cfg)?;
    let inits = MatrixInits {
        stage1_ckpt: &wd.checkpoint("stage1"),
        stage2_scratch_ckpt: &wd.checkpoint("stage2_scratch"),
        stage2_full_ckpt: &wd.checkpoint("stage2_full"),
        scratch_seed: common.seed,
    };
    let tasks: Vec<&str> = harness::BENCHMARKS.iter().map(|(t, _)| *t).collect();
    let report = harness::experiment_matrix(
        &cfg,
        &cfg_text,
        &net_cfg,
        &corpus,
        &inits,
        &tasks,
        common.seed,
        chunk_h,
        &wd.reports(),
    )?;
    println!(
        "matrix: {} cells, {} failures, fingerprint {} -> {}",
        report.cells.len(),
        report.failures.len(),
        report.fingerprint,
        wd.reports().display()
    );
    let _ = config_fingerprint(&cfg_text);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Collect { common } => collect(common),
        Command::Stats { common, corpus } => stats(common, corpus),
        Command::FitTokenizer { common } => fit_tokenizer(common),
        Command::TrainStage1 { common } => train_stage1(common),
        Command::TrainStage2 { common, init } => train_stage2(common, init),
        Command::Posttrain {
            common,
            task,
            init,
            protocol,
        } => posttrain_cmd(common, task, init, protocol),
        Command::TrainPlanner { common } => train_planner_cmd(common),
        Command::Eval {
            common,
            ckpt,
            task,
            planner,
            traces,
        } => eval_cmd(common, ckpt, task, planner, *traces),
        Command::RunDual {
            common,
            task,
            ckpt,
            planner,
        } => run_dual(common, task, ckpt, planner),
        Command::Replay { common, trace } => replay_cmd(common, trace),
        Command::Matrix { common } => matrix_cmd(common),
    }
}
