//! Token-averaged clipped surrogate with a per-token KL penalty:
//!
//! ```text
//! J = 1/M Σ_groups 1/N Σ_i 1/|o_i| Σ_t [ min(r A_i, clip(r, 1±ε) A_i) − β k3(π_ref/π_θ) ]
//! ```
//!
//! with `r = π_θ/π_old` at the realized token and `|o_i|` counting generated
//! tokens only. The loss is `−J`.

use crate::error::{Error, Result};
use crate::exec::{map_slice, Execution};
use crate::policy::{log_softmax_masked, validate_trajectory, PolicyParams};
use crate::trajectory::{Origin, Protocol, Trajectory};
use crate::vocab::TokenId;

/// The natural subset of one rollout group with its advantages.
#[derive(Debug, Clone, Copy)]
pub struct GroupBatch<'a> {
    pub prompt: &'a [TokenId],
    pub natural: &'a [Trajectory],
    pub advantages: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateOutput {
    pub loss: f64,
    /// Mean per-token k3 estimate, averaged like the objective.
    pub kl: f64,
    pub grad: Vec<f64>,
}

pub fn clipped_term(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage)
}

/// d/d(log π_θ) of [`clipped_term`]: `r·A` where the unclipped branch is the
/// minimum, else 0.
fn clipped_slope(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if ratio * advantage <= clipped {
        ratio * advantage
    } else {
        0.0
    }
}

pub fn surrogate_loss(
    params: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    groups: &[GroupBatch<'_>],
    clip_eps: f64,
    kl_beta: f64,
) -> Result<SurrogateOutput> {
    surrogate_loss_with(params, old, reference, groups, clip_eps, kl_beta, Execution::default())
}

pub fn surrogate_loss_with(
    params: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    groups: &[GroupBatch<'_>],
    clip_eps: f64,
    kl_beta: f64,
    exec: Execution,
) -> Result<SurrogateOutput> {
    if !(clip_eps > 0.0 && clip_eps < 1.0) {
        return Err(Error::InvalidArgument(format!("clip_eps {clip_eps} outside (0, 1)")));
    }
    if kl_beta.is_nan() || kl_beta < 0.0 {
        return Err(Error::InvalidArgument(format!("kl_beta {kl_beta} must be >= 0")));
    }
    if old.len() != params.len() || reference.len() != params.len() {
        return Err(Error::InvalidArgument("snapshot layouts differ from params".into()));
    }
    let live: Vec<&GroupBatch> = groups.iter().filter(|g| !g.natural.is_empty()).collect();
    let mut items = Vec::new();
    for g in &live {
        if g.advantages.len() != g.natural.len() {
            return Err(Error::InvalidArgument(format!(
                "{} advantages for {} natural trajectories",
                g.advantages.len(),
                g.natural.len()
            )));
        }
        let weight = 1.0 / (live.len() as f64 * g.natural.len() as f64);
        for (t, &a) in g.natural.iter().zip(g.advantages) {
            if t.protocol != Protocol::Natural {
                return Err(Error::InvalidArgument("only natural trajectories enter the surrogate".into()));
            }
            validate_trajectory(params, g.prompt, t)?;
            items.push((items.len(), g.prompt, t, a, weight));
        }
    }

    let parts = map_slice(exec, &items, |&(idx, prompt, traj, adv, weight)| {
        trajectory_term(params, old, reference, prompt, traj, adv, weight, idx, clip_eps, kl_beta)
    });
    let mut objective = 0.0;
    let mut kl = 0.0;
    let mut grad = vec![0.0; params.len()];
    for part in parts {
        let (obj, k, g) = part?;
        objective += obj;
        kl += k;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a -= b;
        }
    }
    Ok(SurrogateOutput { loss: -objective, kl, grad })
}

/// Weighted objective, KL and objective gradient of one trajectory.
#[allow(clippy::too_many_arguments)]
fn trajectory_term(
    params: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    prompt: &[TokenId],
    traj: &Trajectory,
    adv: f64,
    weight: f64,
    idx: usize,
    clip_eps: f64,
    kl_beta: f64,
) -> Result<(f64, f64, Vec<f64>)> {
    let mut grad = vec![0.0; params.len()];
    let n_gen = traj.generated_count();
    if n_gen == 0 {
        return Ok((0.0, 0.0, grad));
    }
    let w = weight / n_gen as f64;
    let seq: Vec<TokenId> = prompt.iter().chain(&traj.tokens).copied().collect();
    let positions = traj.origin.iter().enumerate().filter(|(_, &o)| o == Origin::Generated).map(|(i, _)| i);
    let (mut obj, mut kl) = (0.0, 0.0);
    for (t, i) in positions.enumerate() {
        let ctx = &seq[..prompt.len() + i];
        let tok = traj.tokens[i];
        let fwd = params.forward(ctx);
        let lp = log_softmax_masked(&fwd.logits, &[])[tok as usize];
        let lp_old = old.token_logprob(ctx, tok, &[]);
        let lp_ref = reference.token_logprob(ctx, tok, &[]);
        let ratio = (lp - lp_old).exp();
        let x = lp_ref - lp;
        let k = x.exp_m1() - x;
        let term = clipped_term(ratio, adv, clip_eps) - kl_beta * k;
        let slope = clipped_slope(ratio, adv, clip_eps) - kl_beta * (1.0 - x.exp());
        if !term.is_finite() || !slope.is_finite() {
            let what = if ratio.is_finite() { "surrogate term" } else { "importance ratio" };
            return Err(Error::NonFinite { what, trajectory: idx, token: t });
        }
        obj += w * term;
        kl += w * k;
        if slope != 0.0 {
            params.backward(&fwd, tok, &[], w * slope, &mut grad);
        }
    }
    Ok((obj, kl, grad))
}
