//! Central finite-difference checks of the log-likelihood gradient and of
//! the full clipped, KL-penalized surrogate.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{SuiteCounts, TaskFamily};
use crate::error::Result;
use crate::exec::Execution;
use crate::grpo::{surrogate_loss_with, GroupBatch};
use crate::policy::{grad_logprob, init_params, logprob_of, PolicyParams};
use crate::rng::{Lane, StreamKey};
use crate::sampler::{sample_protocol, RolloutSettings};
use crate::trajectory::{Protocol, Trajectory};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
/// Denominator floor: below it errors are judged absolutely.
pub const FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Adds a constant to every analytic gradient entry (negative control).
    BiasedGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub suites: Vec<SuiteResult>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.suites.iter().map(|s| s.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn check(
    name: &str,
    params: &PolicyParams,
    analytic: &[f64],
    coords: &[usize],
    f: impl Fn(&PolicyParams) -> Result<f64>,
) -> Result<SuiteResult> {
    let mut worst = SuiteResult {
        name: name.into(),
        coordinates: coords.len(),
        max_rel_error: 0.0,
        worst_coordinate: coords[0],
        analytic: 0.0,
        numeric: 0.0,
    };
    for &i in coords {
        let mut plus = params.clone();
        plus.weights_mut()[i] += STEP;
        let mut minus = params.clone();
        minus.weights_mut()[i] -= STEP;
        let numeric = (f(&plus)? - f(&minus)?) / (2.0 * STEP);
        let e = rel_error(analytic[i], numeric);
        if e > worst.max_rel_error || !e.is_finite() {
            worst.max_rel_error = if e.is_finite() { e } else { f64::INFINITY };
            worst.worst_coordinate = i;
            worst.analytic = analytic[i];
            worst.numeric = numeric;
        }
    }
    Ok(worst)
}

fn perturbed(p: &PolicyParams, seed: u64, scale: f64) -> PolicyParams {
    let mut q = p.clone();
    let mut rng = StreamKey::new(seed, Lane::Custom(0x6C)).rng();
    for w in q.weights_mut() {
        *w += rng.gen_range(-scale..scale);
    }
    q
}

/// Distance from the nearest clip boundary over every token ratio.
fn clip_margin(params: &PolicyParams, old: &PolicyParams, prompt: &[u32], trajs: &[Trajectory], clip_eps: f64) -> Result<f64> {
    let mut m = f64::INFINITY;
    for t in trajs {
        let lp = logprob_of(params, prompt, t)?;
        let lo = logprob_of(old, prompt, t)?;
        for (a, b) in lp.iter().zip(&lo) {
            let r = (a - b).exp();
            m = m.min((r - 1.0 - clip_eps).abs()).min((r - 1.0 + clip_eps).abs());
        }
    }
    Ok(m)
}

/// Runs both suites on `coords_per_suite` random coordinates.
pub fn run_gradcheck(seed: u64, window: usize, embed_dim: usize, coords_per_suite: usize, fault: Option<Fault>) -> Result<GradcheckReport> {
    let family = TaskFamily::new(seed);
    let task = &family.generate_suite(SuiteCounts { beneficial: 1, neutral: 0, harmful: 0 }, seed, 0)[0];
    // larger than the training init so the curvature is not trivial
    let params = perturbed(&init_params(family.vocab(), window, embed_dim, seed)?, seed ^ 1, 0.5);
    let settings = RolloutSettings { max_len: 12, ..Default::default() };
    let key = StreamKey::new(seed, Lane::Custom(0x6C));
    let trajs = sample_protocol(&params, &family, task, Protocol::Natural, 4, &settings, key, Execution::Sequential)?;
    let prompt = &task.prompt_tokens;
    let mut rng = key.index(1).rng();
    let coords: Vec<usize> = (0..coords_per_suite).map(|_| rng.gen_range(0..params.len())).collect();
    let corrupt = |mut g: Vec<f64>| {
        if fault == Some(Fault::BiasedGradient) {
            g.iter_mut().for_each(|x| *x += 1e-2);
        }
        g
    };

    let mut ll_grad = vec![0.0; params.len()];
    for t in &trajs {
        for (a, b) in ll_grad.iter_mut().zip(grad_logprob(&params, prompt, t)?) {
            *a += b;
        }
    }
    let ll = check("log_likelihood", &params, &corrupt(ll_grad), &coords, |q| {
        let mut s = 0.0;
        for t in &trajs {
            s += logprob_of(q, prompt, t)?.iter().sum::<f64>();
        }
        Ok(s)
    })?;

    // old/ref snapshots away from params so ratios leave the clip range;
    // re-drawn until no ratio sits within reach of a clip boundary
    let clip_eps = 0.2;
    let kl_beta = 0.01;
    let mut draw = 0;
    let old = loop {
        let old = perturbed(&params, seed.wrapping_add(100 + draw), 0.3);
        if clip_margin(&params, &old, prompt, &trajs, clip_eps)? > 1e-3 || draw > 50 {
            break old;
        }
        draw += 1;
    };
    let reference = perturbed(&params, seed.wrapping_add(7), 0.3);
    let advantages = [1.2, -0.7, 0.4, -0.9];
    let groups = [GroupBatch { prompt, natural: &trajs, advantages: &advantages }];
    let loss = |q: &PolicyParams| -> Result<f64> {
        Ok(surrogate_loss_with(q, &old, &reference, &groups, clip_eps, kl_beta, Execution::Sequential)?.loss)
    };
    let out = surrogate_loss_with(&params, &old, &reference, &groups, clip_eps, kl_beta, Execution::Sequential)?;
    let sur = check("surrogate", &params, &corrupt(out.grad), &coords, loss)?;

    let suites = vec![ll, sur];
    let pass = suites.iter().all(|s| s.max_rel_error <= TOLERANCE);
    Ok(GradcheckReport { suites, tolerance: TOLERANCE, pass })
}
