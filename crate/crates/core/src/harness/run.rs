//! Subcommand implementations and run-directory artifacts.
//!
//! A training run directory holds:
//!
//! | file                       | contents                                       |
//! |----------------------------|------------------------------------------------|
//! | `config.txt`               | the resolved config, re-parseable               |
//! | `tasks.jsonl`              | the training suite after filtering              |
//! | `warmstart.bin`            | parameters after the supervised warm start      |
//! | `trajectories.jsonl`       | every rollout of every logged step              |
//! | `metrics.csv`              | one row per update (header in [`METRICS_HEADER`]) |
//! | `checkpoint.bin`           | final parameters                                |
//! | `checkpoint.meta.json`     | step, config hash, last metrics                 |
//! | `eval_report.json`         | greedy evaluation of the final parameters       |
//! | `eval_trajectories.jsonl`  | the evaluation rollouts                         |

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{SuiteCounts, TaskFamily, TaskInstance, TaskRecord};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grpo::{run_ablation, train_with, AblationRow, StepView, UpdateReport};
use crate::harness::config::ExperimentConfig;
use crate::harness::eval::{evaluate, EvalReport, EvalTrajectory};
use crate::harness::gradcheck::{run_gradcheck, GradcheckReport};
use crate::policy::{init_params, read_checkpoint, warmstart_mle_with, write_checkpoint, PolicyParams};
use crate::reward::RewardBreakdown;
use crate::rng::{Lane, StreamKey};
use crate::sampler::RolloutSettings;
use crate::trajectory::{Origin, Protocol, Trajectory};
use crate::vocab::TokenId;

pub const CONFIG_FILE: &str = "config.txt";
pub const TASKS_FILE: &str = "tasks.jsonl";
pub const WARMSTART_FILE: &str = "warmstart.bin";
pub const TRAJECTORY_LOG: &str = "trajectories.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CHECKPOINT_META: &str = "checkpoint.meta.json";
pub const ABORT_CHECKPOINT: &str = "checkpoint_abort.bin";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const EVAL_TRAJECTORIES: &str = "eval_trajectories.jsonl";
pub const GRADCHECK_REPORT: &str = "gradcheck.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_META: &str = "ablation_meta.json";

pub const METRICS_HEADER: [&str; 12] = [
    "step",
    "mean_reward",
    "mean_abs_advantage",
    "loss",
    "kl",
    "grad_norm",
    "aux_rate_beneficial",
    "aux_rate_neutral",
    "aux_rate_harmful",
    "acc_beneficial",
    "acc_neutral",
    "acc_harmful",
];

pub const ABLATION_HEADER: [&str; 8] = ["variant", "LR", "TR", "QR", "Vis", "acc", "ppl", "timing_correctness"];

/// Files every training run must leave behind.
pub const TRAIN_MANIFEST: [&str; 6] = [CONFIG_FILE, TASKS_FILE, CHECKPOINT_FILE, CHECKPOINT_META, TRAJECTORY_LOG, METRICS_FILE];

const EVAL_ID_OFFSET: u64 = 1_000_000;
const DEMO_ID_OFFSET: u64 = 2_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub r_acc: u8,
    pub r_fmt: u8,
    pub r_time: i8,
    pub r_qual: u8,
    pub composite: f64,
    pub ppl: f64,
    /// Perplexity covers generated response tokens only.
    pub ppl_scope: String,
    pub delta: f64,
    pub ppl_bar: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub task_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub protocol: Protocol,
    pub tokens: Vec<TokenId>,
    pub logprobs: Vec<f64>,
    pub origin: Vec<Origin>,
    pub aux_span: Option<(usize, usize)>,
    pub reprompted: bool,
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<RewardRecord>,
}

impl TrajectoryRecord {
    pub fn new(task_id: u64, step: Option<usize>, t: &Trajectory) -> Self {
        Self {
            task_id,
            step,
            protocol: t.protocol,
            tokens: t.tokens.clone(),
            logprobs: t.logprobs.clone(),
            origin: t.origin.clone(),
            aux_span: t.aux_span,
            reprompted: t.reprompted,
            truncated: t.truncated,
            rewards: None,
        }
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            protocol: self.protocol,
            tokens: self.tokens.clone(),
            origin: self.origin.clone(),
            logprobs: self.logprobs.clone(),
            aux_span: self.aux_span,
            reprompted: self.reprompted,
            truncated: self.truncated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub config_sha256: String,
    pub metrics: Option<UpdateReport>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_jsonl<T: Serialize>(w: &mut impl Write, items: impl IntoIterator<Item = T>) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, &item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_task_suite(path: &Path, family: &TaskFamily, tasks: &[TaskInstance]) -> Result<()> {
    let mut w = create(path)?;
    write_jsonl(&mut w, tasks.iter().map(|t| family.to_record(t)))?;
    w.flush()?;
    Ok(())
}

pub fn read_task_suite(path: &Path, family: &TaskFamily) -> Result<Vec<TaskInstance>> {
    read_jsonl::<TaskRecord>(path)?.into_iter().map(|r| family.from_record(r)).collect()
}

pub fn save_checkpoint(path: &Path, params: &PolicyParams) -> Result<()> {
    let mut w = create(path)?;
    write_checkpoint(params, &mut w)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, family: &TaskFamily) -> Result<PolicyParams> {
    read_checkpoint(family.vocab(), BufReader::new(File::open(path)?))
}

fn rate(x: Option<f64>) -> String {
    x.map(|v| format!("{v:?}")).unwrap_or_default()
}

pub fn write_metrics(path: &Path, history: &[UpdateReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for h in history {
        w.write_record([
            h.step.to_string(),
            format!("{:?}", h.mean_reward),
            format!("{:?}", h.mean_abs_advantage),
            format!("{:?}", h.loss),
            format!("{:?}", h.kl),
            format!("{:?}", h.grad_norm),
            rate(h.aux_rate.beneficial),
            rate(h.aux_rate.neutral),
            rate(h.aux_rate.harmful),
            rate(h.accuracy.beneficial),
            rate(h.accuracy.neutral),
            rate(h.accuracy.harmful),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ABLATION_HEADER)?;
    let mark = |b: bool| if b { "1" } else { "0" }.to_string();
    for r in rows {
        w.write_record([
            r.variant.clone(),
            mark(r.lr),
            mark(r.tr),
            mark(r.qr),
            mark(r.vis),
            r.acc.to_string(),
            r.ppl.to_string(),
            r.timing_correctness.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Everything a run needs before the RL phase.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub family: TaskFamily,
    pub train_tasks: Vec<TaskInstance>,
    pub eval_tasks: Vec<TaskInstance>,
    pub warm: PolicyParams,
}

/// Task suites, demonstrations, warm start and (optionally) the marginal
/// solvability filter.
pub fn prepare(config: &ExperimentConfig, exec: Execution) -> Result<Prepared> {
    config.validate()?;
    let seed = config.train.seed;
    let family = TaskFamily::new(config.suite.key_table_seed);
    let suite_seed = config.suite.suite_seed;
    let mut train_tasks = family.generate_suite(config.suite.counts, suite_seed, 0);
    let per = |n| SuiteCounts { beneficial: n, neutral: n, harmful: n };
    let eval_tasks = family.generate_suite(per(config.eval.tasks_per_class), suite_seed, EVAL_ID_OFFSET);
    let demo_tasks = family.generate_suite(per(config.warmstart.tasks_per_class), suite_seed, DEMO_ID_OFFSET);
    let demos = family.make_demos(&demo_tasks, &mut StreamKey::new(seed, Lane::Demos).rng());
    let init = init_params(family.vocab(), config.model.window, config.model.embed_dim, seed)?;
    let (warm, report) = warmstart_mle_with(&init, &demos, config.warmstart.epochs, config.warmstart.lr, exec)?;
    if let (Some(first), Some(last)) = (report.objective.first(), report.objective.last()) {
        log::info!("warm start: mean target logprob {first:.4} -> {last:.4} over {} epochs", report.objective.len());
    }
    if config.suite.filter_marginal {
        let settings = RolloutSettings { max_len: config.train.max_len, ..Default::default() };
        let before = train_tasks.len();
        train_tasks = family.filter_marginal(&train_tasks, &warm, config.suite.filter_rollouts, &settings, seed, exec)?;
        log::info!("marginal filter kept {} of {before} tasks", train_tasks.len());
        if train_tasks.is_empty() {
            return Err(Error::InvalidArgument("marginal-solvability filter removed every task".into()));
        }
    }
    Ok(Prepared { family, train_tasks, eval_tasks, warm })
}

fn log_step(w: &mut impl Write, view: &StepView<'_>) -> Result<()> {
    for (gi, g) in view.groups.iter().enumerate() {
        let subsets = [&g.mandatory, &g.prohibited];
        for t in subsets.into_iter().flatten() {
            write_jsonl(w, [TrajectoryRecord::new(g.task_id, Some(view.step), t)])?;
        }
        for (i, t) in g.natural.iter().enumerate() {
            let r: &RewardBreakdown = &view.rewards[gi][i];
            let mut rec = TrajectoryRecord::new(g.task_id, Some(view.step), t);
            rec.rewards = Some(RewardRecord {
                r_acc: r.r_acc,
                r_fmt: r.r_fmt,
                r_time: r.r_time,
                r_qual: r.r_qual,
                composite: r.composite,
                ppl: r.ppl,
                ppl_scope: "generated".into(),
                delta: g.delta,
                ppl_bar: g.ppl_bar,
                advantage: view.advantages[gi][i],
            });
            write_jsonl(w, [rec])?;
        }
    }
    Ok(())
}

fn write_eval(dir: &Path, report: &EvalReport, trajs: &[EvalTrajectory]) -> Result<()> {
    let mut w = create(&dir.join(EVAL_REPORT))?;
    serde_json::to_writer_pretty(&mut w, report)?;
    w.flush()?;
    let mut w = create(&dir.join(EVAL_TRAJECTORIES))?;
    write_jsonl(&mut w, trajs.iter().map(|t| TrajectoryRecord::new(t.task_id, None, &t.trajectory)))?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub history: Vec<UpdateReport>,
    pub eval: EvalReport,
}

pub fn cmd_train(config: &ExperimentConfig) -> Result<TrainSummary> {
    cmd_train_with(config, Execution::default())
}

pub fn cmd_train_with(config: &ExperimentConfig, exec: Execution) -> Result<TrainSummary> {
    config.validate()?;
    let dir = config.out_dir.clone();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(CONFIG_FILE), config.serialize())?;
    let prep = prepare(config, exec)?;
    write_task_suite(&dir.join(TASKS_FILE), &prep.family, &prep.train_tasks)?;
    save_checkpoint(&dir.join(WARMSTART_FILE), &prep.warm)?;

    let mut log = create(&dir.join(TRAJECTORY_LOG))?;
    let every = config.log_trajectories_every;
    let result = train_with(&config.train, &prep.family, &prep.train_tasks, &prep.warm, exec, |view| {
        if every > 0 && view.step % every == 0 {
            log_step(&mut log, view)?;
        }
        if view.step % 50 == 0 {
            log::debug!("step {}", view.step);
        }
        Ok(())
    });
    log.flush()?;
    let outcome = match result {
        Ok(o) => o,
        Err(f) => {
            log::error!("training failed at step {}: {}", f.step, f.error);
            save_checkpoint(&dir.join(ABORT_CHECKPOINT), &f.last_good)?;
            write_metrics(&dir.join(METRICS_FILE), &f.history)?;
            return Err(f.error);
        }
    };
    write_metrics(&dir.join(METRICS_FILE), &outcome.history)?;
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &outcome.params)?;
    let meta = CheckpointMeta {
        step: outcome.history.len(),
        config_sha256: config.hash(),
        metrics: outcome.history.last().cloned(),
    };
    std::fs::write(dir.join(CHECKPOINT_META), serde_json::to_string_pretty(&meta)?)?;

    let (eval, trajs) = evaluate(&outcome.params, &prep.family, &prep.eval_tasks, &config.eval, config.train.seed, exec)?;
    write_eval(&dir, &eval, &trajs)?;
    check_manifest(&dir)?;
    log::info!(
        "trained {} steps: eval accuracy {:.3}, timing correctness {:.3}",
        outcome.history.len(),
        eval.accuracy,
        eval.timing_correctness
    );
    Ok(TrainSummary { out_dir: dir, history: outcome.history, eval })
}

/// Confirms every training artifact exists and, apart from the trajectory
/// log (empty when nothing was logged), is non-empty.
pub fn check_manifest(dir: &Path) -> Result<()> {
    for name in TRAIN_MANIFEST {
        let path = dir.join(name);
        let Ok(meta) = std::fs::metadata(&path) else {
            return Err(Error::InvalidArgument(format!("run artifact {} missing", path.display())));
        };
        if meta.len() == 0 && name != TRAJECTORY_LOG {
            return Err(Error::InvalidArgument(format!("run artifact {} is empty", path.display())));
        }
    }
    Ok(())
}

/// Greedy (per config) evaluation of a checkpoint. Uses the task suite at
/// `tasks` when given, otherwise the config's evaluation suite.
pub fn cmd_eval(config: &ExperimentConfig, checkpoint: &Path, tasks: Option<&Path>) -> Result<EvalReport> {
    config.validate()?;
    let family = TaskFamily::new(config.suite.key_table_seed);
    let params = load_checkpoint(checkpoint, &family)?;
    let suite = match tasks {
        Some(p) => read_task_suite(p, &family)?,
        None => {
            let n = config.eval.tasks_per_class;
            family.generate_suite(SuiteCounts { beneficial: n, neutral: n, harmful: n }, config.suite.suite_seed, EVAL_ID_OFFSET)
        }
    };
    let (report, trajs) = evaluate(&params, &family, &suite, &config.eval, config.train.seed, Execution::default())?;
    std::fs::create_dir_all(&config.out_dir)?;
    write_eval(&config.out_dir, &report, &trajs)?;
    Ok(report)
}

pub fn cmd_gradcheck(config: &ExperimentConfig) -> Result<GradcheckReport> {
    config.validate()?;
    let report = run_gradcheck(config.train.seed, config.model.window, config.model.embed_dim, 128, None)?;
    std::fs::create_dir_all(&config.out_dir)?;
    std::fs::write(config.out_dir.join(GRADCHECK_REPORT), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationMeta {
    pub variant: String,
    pub seed: u64,
    pub train_suite_sha256: String,
    pub eval_suite_sha256: String,
}

fn suite_hash(family: &TaskFamily, tasks: &[TaskInstance]) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for t in tasks {
        h.update(serde_json::to_vec(&family.to_record(t))?);
        h.update(b"\n");
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn cmd_ablate(config: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let exec = Execution::default();
    let prep = prepare(config, exec)?;
    let rows = run_ablation(&config.train, &prep.family, &prep.train_tasks, &prep.warm, &prep.eval_tasks, &config.eval, exec)?;
    let dir = &config.out_dir;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_FILE), config.serialize())?;
    write_ablation(&dir.join(ABLATION_CSV), &rows)?;
    let train_hash = suite_hash(&prep.family, &prep.train_tasks)?;
    let eval_hash = suite_hash(&prep.family, &prep.eval_tasks)?;
    let meta: Vec<AblationMeta> = rows
        .iter()
        .map(|r| AblationMeta {
            variant: r.variant.clone(),
            seed: config.train.seed,
            train_suite_sha256: train_hash.clone(),
            eval_suite_sha256: eval_hash.clone(),
        })
        .collect();
    std::fs::write(dir.join(ABLATION_META), serde_json::to_string_pretty(&meta)?)?;
    Ok(rows)
}
