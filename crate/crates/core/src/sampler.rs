//! Tri-partition rollouts: mandatory (AUX_OPEN forced first), prohibited
//! (aux tags masked at every step) and natural (unconstrained, with the
//! re-prompt hook).

use serde::{Deserialize, Serialize};

use crate::env::{ExactVerifier, TaskClass, TaskFamily, TaskInstance};
use crate::error::{Error, Result};
use crate::exec::{map_range, Execution};
use crate::policy::{argmax_next, prohibited_mask, sample_next, PolicyParams};
use crate::reward::{compute_baselines, Baselines};
use crate::rng::{Lane, Rng, StreamKey};
use crate::trajectory::{AuxTracker, Protocol, Trajectory};
use crate::vocab::{Role, TokenId};

pub const DEFAULT_MAX_LEN: usize = 64;
pub const MIN_MAX_LEN: usize = 8;

/// Decides whether an aux span body is equivalent to the task's ground truth.
pub trait AuxVerifier: Sync {
    fn verify(&self, body: &[TokenId], task: &TaskInstance) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Decoding {
    Sample { temperature: f64 },
    /// Argmax, ties to the lowest id.
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSettings {
    /// Cap on generated tokens; injected hints do not count.
    pub max_len: usize,
    pub decoding: Decoding,
    /// Hint injection after a verified span (mandatory and natural only).
    pub reprompt: bool,
}

impl Default for RolloutSettings {
    fn default() -> Self {
        Self { max_len: DEFAULT_MAX_LEN, decoding: Decoding::Sample { temperature: 1.0 }, reprompt: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub task_id: u64,
    pub class: TaskClass,
    pub mandatory: Vec<Trajectory>,
    pub prohibited: Vec<Trajectory>,
    pub natural: Vec<Trajectory>,
    pub delta: f64,
    pub ppl_bar: f64,
}

impl RolloutGroup {
    pub fn baselines(&self) -> Baselines {
        Baselines { delta: self.delta, ppl_bar: self.ppl_bar }
    }

    pub fn len(&self) -> usize {
        self.mandatory.len() + self.prohibited.len() + self.natural.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Appends the hint block if `traj`'s aux span verifies and no hint has been
/// injected yet. Returns whether it injected.
pub fn run_reprompt_hook(traj: &mut Trajectory, family: &TaskFamily, task: &TaskInstance, verifier: &dyn AuxVerifier) -> bool {
    if traj.reprompted {
        return false;
    }
    let Some(body) = traj.aux_body() else {
        return false;
    };
    if !verifier.verify(body, task) {
        return false;
    }
    traj.push_injected(&family.hint_block(task));
    traj.reprompted = true;
    true
}

pub fn rollout(
    params: &PolicyParams,
    family: &TaskFamily,
    task: &TaskInstance,
    protocol: Protocol,
    settings: &RolloutSettings,
    rng: &mut Rng,
) -> Result<Trajectory> {
    rollout_with_verifier(params, family, task, protocol, settings, &ExactVerifier(family), rng)
}

pub fn rollout_with_verifier(
    params: &PolicyParams,
    family: &TaskFamily,
    task: &TaskInstance,
    protocol: Protocol,
    settings: &RolloutSettings,
    verifier: &dyn AuxVerifier,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let vocab = family.vocab();
    let eos = vocab.id(Role::Eos);
    let banned: Vec<TokenId> = match protocol {
        Protocol::Prohibited => prohibited_mask(vocab).to_vec(),
        _ => Vec::new(),
    };
    let hook = settings.reprompt && protocol != Protocol::Prohibited;
    let mut traj = Trajectory::new(protocol);
    let mut ctx = task.prompt_tokens.clone();
    let mut tracker = AuxTracker::new();
    let mut generated = 0;
    loop {
        if generated == settings.max_len {
            traj.truncated = true;
            break;
        }
        let forced = (protocol == Protocol::Mandatory && generated == 0).then(|| vocab.id(Role::AuxOpen));
        let (tok, lp) = match settings.decoding {
            Decoding::Sample { temperature } => sample_next(params, &ctx, &banned, forced, temperature, rng)?,
            Decoding::Greedy => argmax_next(params, &ctx, &banned, forced)?,
        };
        let index = traj.len();
        traj.push_generated(tok, lp);
        ctx.push(tok);
        generated += 1;
        if let Some(span) = tracker.push(vocab, index, tok) {
            traj.aux_span = Some(span);
            if hook && run_reprompt_hook(&mut traj, family, task, verifier) {
                ctx.extend_from_slice(&traj.tokens[index + 1..]);
            }
        }
        if tok == eos {
            break;
        }
    }
    Ok(traj)
}

fn check_counts(n: usize, settings: &RolloutSettings) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one rollout".into()));
    }
    if settings.max_len < MIN_MAX_LEN {
        return Err(Error::InvalidArgument(format!("max_len {} below {MIN_MAX_LEN}", settings.max_len)));
    }
    Ok(())
}

fn lane_of(protocol: Protocol) -> Lane {
    match protocol {
        Protocol::Mandatory => Lane::Mandatory,
        Protocol::Prohibited => Lane::Prohibited,
        Protocol::Natural => Lane::Natural,
    }
}

/// `n` rollouts of one protocol; rollout `i` draws from `key` with the
/// protocol's lane, the task id and index `i`.
#[allow(clippy::too_many_arguments)]
pub fn sample_protocol(
    params: &PolicyParams,
    family: &TaskFamily,
    task: &TaskInstance,
    protocol: Protocol,
    n: usize,
    settings: &RolloutSettings,
    key: StreamKey,
    exec: Execution,
) -> Result<Vec<Trajectory>> {
    check_counts(n, settings)?;
    map_range(exec, n, |i| {
        let mut rng = key.task(task.task_id).lane(lane_of(protocol)).index(i as u64).rng();
        rollout(params, family, task, protocol, settings, &mut rng)
    })
    .into_iter()
    .collect()
}

pub fn sample_mandatory(
    params: &PolicyParams,
    family: &TaskFamily,
    task: &TaskInstance,
    n: usize,
    settings: &RolloutSettings,
    key: StreamKey,
) -> Result<Vec<Trajectory>> {
    sample_protocol(params, family, task, Protocol::Mandatory, n, settings, key, Execution::Sequential)
}

pub fn sample_prohibited(
    params: &PolicyParams,
    family: &TaskFamily,
    task: &TaskInstance,
    n: usize,
    settings: &RolloutSettings,
    key: StreamKey,
) -> Result<Vec<Trajectory>> {
    sample_protocol(params, family, task, Protocol::Prohibited, n, settings, key, Execution::Sequential)
}

pub fn sample_natural(
    params: &PolicyParams,
    family: &TaskFamily,
    task: &TaskInstance,
    n: usize,
    settings: &RolloutSettings,
    key: StreamKey,
) -> Result<Vec<Trajectory>> {
    sample_protocol(params, family, task, Protocol::Natural, n, settings, key, Execution::Sequential)
}

/// All three subsets plus Δ and P̄. A pure function of its arguments; the
/// `3n` rollouts may run in parallel but are assembled in fixed order.
pub fn build_rollout_group(
    params: &PolicyParams,
    family: &TaskFamily,
    task: &TaskInstance,
    n: usize,
    settings: &RolloutSettings,
    key: StreamKey,
    exec: Execution,
) -> Result<RolloutGroup> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("group size {n} below 2")));
    }
    check_counts(n, settings)?;
    let mut all = map_range(exec, 3 * n, |j| {
        let protocol = Protocol::ALL[j / n];
        let mut rng = key.task(task.task_id).lane(lane_of(protocol)).index((j % n) as u64).rng();
        rollout(params, family, task, protocol, settings, &mut rng)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let natural = all.split_off(2 * n);
    let prohibited = all.split_off(n);
    let mandatory = all;
    let b = compute_baselines(family, task, &mandatory, &prohibited)?;
    Ok(RolloutGroup {
        task_id: task.task_id,
        class: task.class,
        mandatory,
        prohibited,
        natural,
        delta: b.delta,
        ppl_bar: b.ppl_bar,
    })
}
