//! Experiment configuration: flat `key: value` lines, `#` comments.
//!
//! Every key is optional and unknown keys are rejected. [`KEYS`] lists the
//! schema in serialization order; see [`ExperimentConfig::default`] for the
//! default of each.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::env::SuiteCounts;
use crate::error::{Error, Result};
use crate::grpo::TrainConfig;
use crate::harness::eval::EvalSpec;
use crate::policy::{param_count, MAX_PARAMS};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSpec {
    pub counts: SuiteCounts,
    pub key_table_seed: u64,
    pub suite_seed: u64,
    pub filter_marginal: bool,
    pub filter_rollouts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub window: usize,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmStartSpec {
    /// Demonstration tasks per class; each yields two demos.
    pub tasks_per_class: usize,
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub suite: SuiteSpec,
    pub model: ModelSpec,
    pub warmstart: WarmStartSpec,
    pub eval: EvalSpec,
    /// Steps between trajectory-log snapshots; 0 disables the log.
    pub log_trajectories_every: usize,
    pub out_dir: PathBuf,
    pub log_level: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig { steps: 500, ..TrainConfig::default() };
        Self {
            eval: EvalSpec { max_len: train.max_len, ..EvalSpec::default() },
            train,
            suite: SuiteSpec {
                counts: SuiteCounts { beneficial: 100, neutral: 50, harmful: 100 },
                key_table_seed: 0,
                suite_seed: 1,
                filter_marginal: true,
                filter_rollouts: 10,
            },
            model: ModelSpec { window: 8, embed_dim: 24 },
            warmstart: WarmStartSpec { tasks_per_class: 100, epochs: 300, lr: 0.01 },
            log_trajectories_every: 10,
            out_dir: PathBuf::from("runs/default"),
            log_level: "info".into(),
        }
    }
}

/// Schema, in serialization order.
pub const KEYS: &[&str] = &[
    "seed",
    "steps",
    "lr",
    "kl_beta",
    "clip_eps",
    "eps_norm",
    "n_per_subset",
    "tasks_per_step",
    "max_len",
    "temperature",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "w_acc",
    "w_fmt",
    "w_time",
    "w_qual",
    "tau",
    "delta_tol",
    "length_reward",
    "timing_reward",
    "quality_reward",
    "visual_reprompt",
    "length_weight",
    "suite_beneficial",
    "suite_neutral",
    "suite_harmful",
    "key_table_seed",
    "suite_seed",
    "filter_marginal",
    "filter_rollouts",
    "window",
    "embed_dim",
    "warmstart_tasks_per_class",
    "warmstart_epochs",
    "warmstart_lr",
    "eval_tasks_per_class",
    "eval_rollouts_per_task",
    "eval_greedy",
    "eval_reprompt",
    "log_trajectories_every",
    "out_dir",
    "log_level",
];

fn err(line: usize, key: &str, reason: impl Into<String>) -> Error {
    Error::Config { line, key: key.to_string(), reason: reason.into() }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| err(line, key, format!("cannot parse `{v}`")))
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(err(line, key, format!("expected true or false, got `{v}`"))),
    }
}

impl ExperimentConfig {
    pub fn parse_file(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = std::collections::BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once(':') else {
                return Err(err(line, content, "expected `key: value`"));
            };
            let (k, v) = (k.trim(), v.trim());
            if let Some(prev) = seen.insert(k.to_string(), line) {
                return Err(err(line, k, format!("duplicate of line {prev}")));
            }
            c.set(line, k, v)?;
        }
        c.validate_at(&seen)?;
        Ok(c)
    }

    fn set(&mut self, line: usize, k: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let f = |v: &str| parse_num::<f64>(line, k, v);
        let u = |v: &str| parse_num::<usize>(line, k, v);
        let b = |v: &str| parse_bool(line, k, v);
        match k {
            "seed" => t.seed = parse_num(line, k, v)?,
            "steps" => t.steps = u(v)?,
            "lr" => t.lr = f(v)?,
            "kl_beta" => t.kl_beta = f(v)?,
            "clip_eps" => t.clip_eps = f(v)?,
            "eps_norm" => t.eps_norm = f(v)?,
            "n_per_subset" => t.n_per_subset = u(v)?,
            "tasks_per_step" => t.tasks_per_step = u(v)?,
            "max_len" => {
                t.max_len = u(v)?;
                self.eval.max_len = t.max_len;
            }
            "temperature" => t.temperature = f(v)?,
            "adam_beta1" => t.moments.beta1 = f(v)?,
            "adam_beta2" => t.moments.beta2 = f(v)?,
            "adam_eps" => t.moments.eps = f(v)?,
            "w_acc" => t.weights.w_acc = f(v)?,
            "w_fmt" => t.weights.w_fmt = f(v)?,
            "w_time" => t.weights.w_time = f(v)?,
            "w_qual" => t.weights.w_qual = f(v)?,
            "tau" => t.weights.tau = f(v)?,
            "delta_tol" => t.weights.delta_tol = f(v)?,
            "length_reward" => t.toggles.length_reward = b(v)?,
            "timing_reward" => t.toggles.timing_reward = b(v)?,
            "quality_reward" => t.toggles.quality_reward = b(v)?,
            "visual_reprompt" => t.toggles.visual_reprompt = b(v)?,
            "length_weight" => t.length_weight = f(v)?,
            "suite_beneficial" => self.suite.counts.beneficial = u(v)?,
            "suite_neutral" => self.suite.counts.neutral = u(v)?,
            "suite_harmful" => self.suite.counts.harmful = u(v)?,
            "key_table_seed" => self.suite.key_table_seed = parse_num(line, k, v)?,
            "suite_seed" => self.suite.suite_seed = parse_num(line, k, v)?,
            "filter_marginal" => self.suite.filter_marginal = b(v)?,
            "filter_rollouts" => self.suite.filter_rollouts = u(v)?,
            "window" => self.model.window = u(v)?,
            "embed_dim" => self.model.embed_dim = u(v)?,
            "warmstart_tasks_per_class" => self.warmstart.tasks_per_class = u(v)?,
            "warmstart_epochs" => self.warmstart.epochs = u(v)?,
            "warmstart_lr" => self.warmstart.lr = f(v)?,
            "eval_tasks_per_class" => self.eval.tasks_per_class = u(v)?,
            "eval_rollouts_per_task" => self.eval.rollouts_per_task = u(v)?,
            "eval_greedy" => self.eval.greedy = b(v)?,
            "eval_reprompt" => self.eval.reprompt = b(v)?,
            "log_trajectories_every" => self.log_trajectories_every = u(v)?,
            "out_dir" => {
                if v.is_empty() {
                    return Err(err(line, k, "empty path"));
                }
                self.out_dir = PathBuf::from(v);
            }
            "log_level" => match v {
                "error" | "warn" | "info" | "debug" | "trace" | "off" => self.log_level = v.to_string(),
                _ => return Err(err(line, k, format!("unknown level `{v}`"))),
            },
            _ => return Err(err(line, k, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_at(&Default::default())
    }

    /// `lines` maps keys to the line that set them, for diagnostics.
    fn validate_at(&self, lines: &std::collections::BTreeMap<String, usize>) -> Result<()> {
        let at = |k: &str| lines.get(k).copied().unwrap_or(0);
        let check = |ok: bool, k: &str, reason: &str| if ok { Ok(()) } else { Err(err(at(k), k, reason)) };
        let t = &self.train;
        let w = &t.weights;
        for (k, v) in [
            ("w_acc", w.w_acc),
            ("w_fmt", w.w_fmt),
            ("w_time", w.w_time),
            ("w_qual", w.w_qual),
            ("tau", w.tau),
            ("delta_tol", w.delta_tol),
            ("kl_beta", t.kl_beta),
            ("length_weight", t.length_weight),
        ] {
            check(v.is_finite() && v >= 0.0, k, "must be finite and non-negative")?;
        }
        for (k, v) in [
            ("lr", t.lr),
            ("eps_norm", t.eps_norm),
            ("temperature", t.temperature),
            ("adam_eps", t.moments.eps),
            ("warmstart_lr", self.warmstart.lr),
        ] {
            check(v.is_finite() && v > 0.0, k, "must be finite and positive")?;
        }
        check(t.clip_eps > 0.0 && t.clip_eps < 1.0, "clip_eps", "must lie in (0, 1)")?;
        for (k, v) in [("adam_beta1", t.moments.beta1), ("adam_beta2", t.moments.beta2)] {
            check((0.0..1.0).contains(&v), k, "must lie in [0, 1)")?;
        }
        check(t.n_per_subset >= 2, "n_per_subset", "must be at least 2")?;
        check(t.tasks_per_step >= 1, "tasks_per_step", "must be at least 1")?;
        check(t.max_len >= crate::sampler::MIN_MAX_LEN, "max_len", "must be at least 8")?;
        let total = self.suite.counts.total();
        let last_count = ["suite_beneficial", "suite_neutral", "suite_harmful"]
            .into_iter()
            .max_by_key(|k| at(k))
            .unwrap_or("suite_beneficial");
        check(total >= 1, last_count, "task suite is empty")?;
        check(self.suite.filter_rollouts >= 2, "filter_rollouts", "must be at least 2")?;
        check(self.model.window >= 2, "window", "must be at least 2")?;
        check(self.model.embed_dim >= 4, "embed_dim", "must be at least 4")?;
        let n = param_count(crate::env::TaskLayout::VOCAB_SIZE, self.model.window, self.model.embed_dim);
        check(n <= MAX_PARAMS, "embed_dim", &format!("{n} parameters exceed {MAX_PARAMS}"))?;
        check(self.warmstart.tasks_per_class >= 1, "warmstart_tasks_per_class", "must be at least 1")?;
        check(self.eval.tasks_per_class >= 1, "eval_tasks_per_class", "must be at least 1")?;
        check(self.eval.rollouts_per_task >= 1, "eval_rollouts_per_task", "must be at least 1")?;
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let t = &self.train;
        let w = &t.weights;
        let mut s = String::from("# a2po experiment config\n");
        let mut put = |k: &str, v: String| writeln!(s, "{k}: {v}").unwrap();
        put("seed", t.seed.to_string());
        put("steps", t.steps.to_string());
        put("lr", t.lr.to_string());
        put("kl_beta", t.kl_beta.to_string());
        put("clip_eps", t.clip_eps.to_string());
        put("eps_norm", t.eps_norm.to_string());
        put("n_per_subset", t.n_per_subset.to_string());
        put("tasks_per_step", t.tasks_per_step.to_string());
        put("max_len", t.max_len.to_string());
        put("temperature", t.temperature.to_string());
        put("adam_beta1", t.moments.beta1.to_string());
        put("adam_beta2", t.moments.beta2.to_string());
        put("adam_eps", t.moments.eps.to_string());
        put("w_acc", w.w_acc.to_string());
        put("w_fmt", w.w_fmt.to_string());
        put("w_time", w.w_time.to_string());
        put("w_qual", w.w_qual.to_string());
        put("tau", w.tau.to_string());
        put("delta_tol", w.delta_tol.to_string());
        put("length_reward", t.toggles.length_reward.to_string());
        put("timing_reward", t.toggles.timing_reward.to_string());
        put("quality_reward", t.toggles.quality_reward.to_string());
        put("visual_reprompt", t.toggles.visual_reprompt.to_string());
        put("length_weight", t.length_weight.to_string());
        put("suite_beneficial", self.suite.counts.beneficial.to_string());
        put("suite_neutral", self.suite.counts.neutral.to_string());
        put("suite_harmful", self.suite.counts.harmful.to_string());
        put("key_table_seed", self.suite.key_table_seed.to_string());
        put("suite_seed", self.suite.suite_seed.to_string());
        put("filter_marginal", self.suite.filter_marginal.to_string());
        put("filter_rollouts", self.suite.filter_rollouts.to_string());
        put("window", self.model.window.to_string());
        put("embed_dim", self.model.embed_dim.to_string());
        put("warmstart_tasks_per_class", self.warmstart.tasks_per_class.to_string());
        put("warmstart_epochs", self.warmstart.epochs.to_string());
        put("warmstart_lr", self.warmstart.lr.to_string());
        put("eval_tasks_per_class", self.eval.tasks_per_class.to_string());
        put("eval_rollouts_per_task", self.eval.rollouts_per_task.to_string());
        put("eval_greedy", self.eval.greedy.to_string());
        put("eval_reprompt", self.eval.reprompt.to_string());
        put("log_trajectories_every", self.log_trajectories_every.to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("log_level", self.log_level.clone());
        s
    }

    /// SHA-256 of the serialized form, hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.serialize().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
