use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::adam::{apply_update, AdamMoments, AdamState};
use super::advantages::advantages;
use super::surrogate::{surrogate_loss_with, GroupBatch};
use crate::env::{TaskClass, TaskFamily, TaskInstance};
use crate::error::{Error, Result};
use crate::exec::{map_slice, Execution};
use crate::policy::PolicyParams;
use crate::reward::{score, RewardBreakdown, RewardWeights, ShapingToggles};
use crate::rng::{Lane, StreamKey};
use crate::sampler::{build_rollout_group, Decoding, RolloutGroup, RolloutSettings, DEFAULT_MAX_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    /// Adds `length_weight · generated / max_len` to every natural reward.
    pub length_reward: bool,
    pub timing_reward: bool,
    pub quality_reward: bool,
    /// Hint injection after a verified aux span.
    pub visual_reprompt: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self { length_reward: false, timing_reward: true, quality_reward: true, visual_reprompt: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: RewardWeights,
    pub n_per_subset: usize,
    pub kl_beta: f64,
    pub clip_eps: f64,
    pub eps_norm: f64,
    pub lr: f64,
    pub moments: AdamMoments,
    pub steps: usize,
    pub seed: u64,
    pub toggles: Toggles,
    pub tasks_per_step: usize,
    pub max_len: usize,
    pub temperature: f64,
    pub length_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: RewardWeights::default(),
            n_per_subset: 8,
            kl_beta: 0.01,
            clip_eps: 0.2,
            eps_norm: 1e-8,
            lr: 1e-3,
            moments: AdamMoments::default(),
            steps: 200,
            seed: 0,
            toggles: Toggles::default(),
            tasks_per_step: 8,
            max_len: DEFAULT_MAX_LEN,
            temperature: 1.0,
            length_weight: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_per_subset < 2 {
            return bad(format!("n_per_subset {} below 2", self.n_per_subset));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps {} outside (0, 1)", self.clip_eps));
        }
        if !(self.kl_beta.is_finite() && self.kl_beta >= 0.0) {
            return bad(format!("kl_beta {} must be >= 0", self.kl_beta));
        }
        if [self.eps_norm, self.lr, self.temperature].iter().any(|&x| x.is_nan() || x <= 0.0) {
            return bad("eps_norm, lr and temperature must be > 0".into());
        }
        if self.length_weight.is_nan() || self.length_weight < 0.0 {
            return bad(format!("length_weight {} must be >= 0", self.length_weight));
        }
        if self.tasks_per_step == 0 {
            return bad("tasks_per_step must be >= 1".into());
        }
        if self.max_len < crate::sampler::MIN_MAX_LEN {
            return bad(format!("max_len {} below {}", self.max_len, crate::sampler::MIN_MAX_LEN));
        }
        Ok(())
    }

    pub fn rollout_settings(&self) -> RolloutSettings {
        RolloutSettings {
            max_len: self.max_len,
            decoding: Decoding::Sample { temperature: self.temperature },
            reprompt: self.toggles.visual_reprompt,
        }
    }

    pub fn shaping(&self) -> ShapingToggles {
        ShapingToggles { timing: self.toggles.timing_reward, quality: self.toggles.quality_reward }
    }
}

/// Per-class rates; `None` when the class had no trajectories this step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassRates {
    pub beneficial: Option<f64>,
    pub neutral: Option<f64>,
    pub harmful: Option<f64>,
}

impl ClassRates {
    pub fn get(&self, class: TaskClass) -> Option<f64> {
        match class {
            TaskClass::Beneficial => self.beneficial,
            TaskClass::Neutral => self.neutral,
            TaskClass::Harmful => self.harmful,
        }
    }

    fn from_counts(hits: [usize; 3], totals: [usize; 3]) -> Self {
        let rate = |i: usize| (totals[i] > 0).then(|| hits[i] as f64 / totals[i] as f64);
        Self { beneficial: rate(0), neutral: rate(1), harmful: rate(2) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_abs_advantage: f64,
    pub loss: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub aux_rate: ClassRates,
    pub accuracy: ClassRates,
}

/// Everything one update saw, for logging.
#[derive(Debug)]
pub struct StepView<'a> {
    pub step: usize,
    pub tasks: &'a [&'a TaskInstance],
    pub groups: &'a [RolloutGroup],
    /// Per group, one breakdown per natural trajectory.
    pub rewards: &'a [Vec<RewardBreakdown>],
    /// Per group, the scalar rewards fed to the advantages (length term included).
    pub scalar_rewards: &'a [Vec<f64>],
    pub advantages: &'a [Vec<f64>],
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub history: Vec<UpdateReport>,
}

/// A failed run keeps the last parameters that were produced without error.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub step: usize,
    pub last_good: PolicyParams,
    pub history: Vec<UpdateReport>,
}

fn class_index(c: TaskClass) -> usize {
    match c {
        TaskClass::Beneficial => 0,
        TaskClass::Neutral => 1,
        TaskClass::Harmful => 2,
    }
}

/// Task indices for `step`: all tasks when the suite fits, otherwise a
/// sample without replacement, kept in suite order.
pub fn minibatch(n_tasks: usize, per_step: usize, seed: u64, step: usize) -> Vec<usize> {
    if n_tasks <= per_step {
        return (0..n_tasks).collect();
    }
    let mut rng = StreamKey::new(seed, Lane::Minibatch).step(step as u64).rng();
    let mut idx = sample(&mut rng, n_tasks, per_step).into_vec();
    idx.sort_unstable();
    idx
}

#[allow(clippy::result_large_err)]
pub fn train(
    config: &TrainConfig,
    family: &TaskFamily,
    tasks: &[TaskInstance],
    warm: &PolicyParams,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    train_with(config, family, tasks, warm, Execution::default(), |_| Ok(()))
}

/// One update per step: rollouts with `old = current` and `ref = warm`,
/// rewards on the natural subsets, per-group advantages, one Adam step.
#[allow(clippy::result_large_err)]
pub fn train_with(
    config: &TrainConfig,
    family: &TaskFamily,
    tasks: &[TaskInstance],
    warm: &PolicyParams,
    exec: Execution,
    mut observe: impl FnMut(&StepView<'_>) -> Result<()>,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let fail = |error, step, last_good: &PolicyParams, history: Vec<UpdateReport>| TrainFailure {
        error,
        step,
        last_good: last_good.clone(),
        history,
    };
    if let Err(e) = config.validate() {
        return Err(fail(e, 0, warm, Vec::new()));
    }
    if tasks.is_empty() && config.steps > 0 {
        return Err(fail(Error::InvalidArgument("empty task suite".into()), 0, warm, Vec::new()));
    }
    let mut state = AdamState::new(warm.len(), config.moments);
    let mut current = warm.clone();
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        match train_step(config, family, tasks, warm, &current, &mut state, step, exec, &mut observe) {
            Ok((next, report)) => {
                current = next;
                history.push(report);
            }
            Err(e) => return Err(fail(e, step, &current, history)),
        }
    }
    Ok(TrainOutcome { params: current, history })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    config: &TrainConfig,
    family: &TaskFamily,
    tasks: &[TaskInstance],
    reference: &PolicyParams,
    current: &PolicyParams,
    state: &mut AdamState,
    step: usize,
    exec: Execution,
    observe: &mut impl FnMut(&StepView<'_>) -> Result<()>,
) -> Result<(PolicyParams, UpdateReport)> {
    let batch: Vec<&TaskInstance> =
        minibatch(tasks.len(), config.tasks_per_step, config.seed, step).into_iter().map(|i| &tasks[i]).collect();
    let settings = config.rollout_settings();
    let key = StreamKey::new(config.seed, Lane::Natural).step(step as u64);
    let groups = map_slice(exec, &batch, |task| {
        build_rollout_group(current, family, task, config.n_per_subset, &settings, key, exec)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let shaping = config.shaping();
    let mut rewards = Vec::with_capacity(groups.len());
    let mut scalars = Vec::with_capacity(groups.len());
    let mut advs = Vec::with_capacity(groups.len());
    for (g, task) in groups.iter().zip(&batch) {
        let b = g.baselines();
        let breakdowns =
            g.natural.iter().map(|t| score(family, t, task, &b, &config.weights, shaping)).collect::<Result<Vec<_>>>()?;
        let scalar: Vec<f64> = breakdowns
            .iter()
            .zip(&g.natural)
            .map(|(r, t)| {
                let len = if config.toggles.length_reward {
                    config.length_weight * t.generated_count() as f64 / config.max_len as f64
                } else {
                    0.0
                };
                r.composite + len
            })
            .collect();
        advs.push(advantages(&scalar, config.eps_norm)?);
        rewards.push(breakdowns);
        scalars.push(scalar);
    }

    let batches: Vec<GroupBatch> = groups
        .iter()
        .zip(&batch)
        .zip(&advs)
        .map(|((g, task), a)| GroupBatch { prompt: &task.prompt_tokens, natural: &g.natural, advantages: a })
        .collect();
    let out = surrogate_loss_with(current, current, reference, &batches, config.clip_eps, config.kl_beta, exec)?;
    let grad_norm = out.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !grad_norm.is_finite() || !out.loss.is_finite() {
        return Err(Error::NonFiniteValue(format!("loss or gradient at step {step}")));
    }

    observe(&StepView {
        step,
        tasks: &batch,
        groups: &groups,
        rewards: &rewards,
        scalar_rewards: &scalars,
        advantages: &advs,
    })?;
    let next = apply_update(state, current, &out.grad, config.lr)?;

    let (mut aux, mut acc, mut tot) = ([0usize; 3], [0usize; 3], [0usize; 3]);
    for (g, rs) in groups.iter().zip(&rewards) {
        let c = class_index(g.class);
        for r in rs {
            tot[c] += 1;
            aux[c] += r.aux_used as usize;
            acc[c] += r.r_acc as usize;
        }
    }
    let n_traj: usize = scalars.iter().map(Vec::len).sum();
    let report = UpdateReport {
        step,
        mean_reward: scalars.iter().flatten().sum::<f64>() / n_traj as f64,
        mean_abs_advantage: advs.iter().flatten().map(|a| a.abs()).sum::<f64>() / n_traj as f64,
        loss: out.loss,
        kl: out.kl,
        grad_norm,
        aux_rate: ClassRates::from_counts(aux, tot),
        accuracy: ClassRates::from_counts(acc, tot),
    };
    Ok((next, report))
}
