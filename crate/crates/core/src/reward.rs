//! Composite reward `R = w_acc·r_acc + w_fmt·r_fmt + w_time·r_time + w_qual·r_qual`
//! and the counterfactual baselines it is gated on.
//!
//! `Δ` is the mandatory-minus-prohibited accuracy of the same rollout group
//! and `P̄` the mean perplexity of its mandatory subset. Timing pays `±1` only
//! when aux was used and `|Δ| > τ`; quality pays 1 for a correct aux-using
//! trajectory whose perplexity is strictly below `P̄ + δ`.

use serde::{Deserialize, Serialize};

use crate::env::{TaskFamily, TaskInstance};
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;
use crate::vocab::{Role, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w_acc: f64,
    pub w_fmt: f64,
    pub w_time: f64,
    pub w_qual: f64,
    pub tau: f64,
    pub delta_tol: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { w_acc: 0.70, w_fmt: 0.00, w_time: 0.15, w_qual: 0.15, tau: 0.15, delta_tol: 0.01 }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_acc", self.w_acc),
            ("w_fmt", self.w_fmt),
            ("w_time", self.w_time),
            ("w_qual", self.w_qual),
            ("tau", self.tau),
            ("delta_tol", self.delta_tol),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub delta: f64,
    pub ppl_bar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_acc: u8,
    pub r_fmt: u8,
    pub r_time: i8,
    pub r_qual: u8,
    pub composite: f64,
    pub ppl: f64,
    pub aux_used: bool,
}

/// Which shaping terms are live; disabled terms are reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapingToggles {
    pub timing: bool,
    pub quality: bool,
}

impl Default for ShapingToggles {
    fn default() -> Self {
        Self { timing: true, quality: true }
    }
}

pub fn accuracy_reward(family: &TaskFamily, traj: &Trajectory, task: &TaskInstance) -> u8 {
    family.judge_answer(traj, task)
}

/// 1 iff aux tags are absent or form exactly one well-formed span, exactly
/// one ANSWER_MARK is present, and the trajectory ends in EOS untruncated.
pub fn format_reward(vocab: &Vocabulary, traj: &Trajectory) -> u8 {
    let aux = traj.aux_token_count(vocab);
    let aux_ok = aux == 0 || (aux == 2 && traj.aux_span.is_some());
    let mark_ok = traj.count_role(vocab, Role::AnswerMark) == 1;
    let end_ok = !traj.truncated && traj.tokens.last() == Some(&vocab.id(Role::Eos));
    (aux_ok && mark_ok && end_ok) as u8
}

/// `exp(mean NLL)` over generated tokens.
pub fn ppl(traj: &Trajectory) -> Result<f64> {
    if traj.logprobs.is_empty() {
        return Err(Error::InvalidArgument("perplexity of a trajectory with no generated tokens".into()));
    }
    let nll = -traj.logprobs.iter().sum::<f64>() / traj.logprobs.len() as f64;
    Ok(nll.exp())
}

pub fn compute_baselines(
    family: &TaskFamily,
    task: &TaskInstance,
    mandatory: &[Trajectory],
    prohibited: &[Trajectory],
) -> Result<Baselines> {
    if mandatory.is_empty() || prohibited.is_empty() {
        return Err(Error::InvalidArgument("baselines need non-empty mandatory and prohibited subsets".into()));
    }
    let acc = |ts: &[Trajectory]| {
        ts.iter().map(|t| accuracy_reward(family, t, task) as f64).sum::<f64>() / ts.len() as f64
    };
    let mut ppl_sum = 0.0;
    for t in mandatory {
        ppl_sum += ppl(t)?;
    }
    Ok(Baselines { delta: acc(mandatory) - acc(prohibited), ppl_bar: ppl_sum / mandatory.len() as f64 })
}

pub fn timing_reward(aux_used: bool, baselines: &Baselines, tau: f64) -> i8 {
    if !aux_used {
        0
    } else if baselines.delta > tau {
        1
    } else if baselines.delta < -tau {
        -1
    } else {
        0
    }
}

pub fn quality_reward(aux_used: bool, r_acc: u8, ppl: f64, baselines: &Baselines, delta_tol: f64) -> u8 {
    (aux_used && r_acc == 1 && ppl < baselines.ppl_bar + delta_tol) as u8
}

pub fn composite(r_acc: u8, r_fmt: u8, r_time: i8, r_qual: u8, w: &RewardWeights) -> f64 {
    w.w_acc * r_acc as f64 + w.w_fmt * r_fmt as f64 + w.w_time * r_time as f64 + w.w_qual * r_qual as f64
}

pub fn score(
    family: &TaskFamily,
    traj: &Trajectory,
    task: &TaskInstance,
    baselines: &Baselines,
    weights: &RewardWeights,
    toggles: ShapingToggles,
) -> Result<RewardBreakdown> {
    let aux_used = traj.aux_used();
    let r_acc = accuracy_reward(family, traj, task);
    let r_fmt = format_reward(family.vocab(), traj);
    let p = ppl(traj)?;
    let r_time = if toggles.timing { timing_reward(aux_used, baselines, weights.tau) } else { 0 };
    let r_qual = if toggles.quality { quality_reward(aux_used, r_acc, p, baselines, weights.delta_tol) } else { 0 };
    Ok(RewardBreakdown {
        r_acc,
        r_fmt,
        r_time,
        r_qual,
        composite: composite(r_acc, r_fmt, r_time, r_qual, weights),
        ppl: p,
        aux_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::TaskClass;
    use crate::rng::{Lane, StreamKey};
    use crate::trajectory::{detect_aux_span, Protocol};

    fn traj(f: &TaskFamily, tokens: &[u32], truncated: bool) -> Trajectory {
        let mut t = Trajectory::new(Protocol::Natural);
        for &x in tokens {
            t.push_generated(x, -0.5);
        }
        t.aux_span = detect_aux_span(f.vocab(), &t.tokens);
        t.truncated = truncated;
        t
    }

    #[test]
    fn format_cases() {
        let f = TaskFamily::new(0);
        let v = f.vocab();
        assert_eq!(format_reward(v, &traj(&f, &[3, 22, 23, 9, 4, 7, 14, 1], false)), 1);
        assert_eq!(format_reward(v, &traj(&f, &[7, 14, 1], false)), 1);
        assert_eq!(format_reward(v, &traj(&f, &[3, 22, 7, 14, 1], false)), 0);
        assert_eq!(format_reward(v, &traj(&f, &[7, 14, 7, 15, 1], false)), 0);
        assert_eq!(format_reward(v, &traj(&f, &[7, 14, 14], true)), 0);
        assert_eq!(format_reward(v, &traj(&f, &[3, 4, 3, 4, 7, 14, 1], false)), 0);
    }

    #[test]
    fn ppl_cases() {
        let mut t = Trajectory::new(Protocol::Natural);
        assert!(ppl(&t).is_err());
        t.push_generated(5, -(32f64).ln());
        t.push_injected(&[6]);
        t.push_generated(5, -(32f64).ln());
        assert!((ppl(&t).unwrap() - 32.0).abs() < 1e-12);
        let mut d = Trajectory::new(Protocol::Natural);
        d.push_generated(1, 0.0);
        assert_eq!(ppl(&d).unwrap(), 1.0);
    }

    #[test]
    fn baseline_arithmetic() {
        let f = TaskFamily::new(0);
        let task = f.generate_task(0, TaskClass::Beneficial, &mut StreamKey::new(0, Lane::TaskSuite).rng());
        let right = traj(&f, &[7, task.answer_token, 1], false);
        let wrong_answer = f.layout.answers.iter().copied().find(|&a| a != task.answer_token).unwrap();
        let wrong = traj(&f, &[7, wrong_answer, 1], false);
        let plus = vec![right.clone(), right.clone(), wrong.clone(), right.clone()];
        let minus = vec![wrong.clone(); 4];
        let b = compute_baselines(&f, &task, &plus, &minus).unwrap();
        assert!((b.delta - 0.75).abs() < 1e-15);
        assert!((b.ppl_bar - 0.5f64.exp()).abs() < 1e-12);
        assert_eq!(compute_baselines(&f, &task, &plus, &plus).unwrap().delta, 0.0);
        assert!(compute_baselines(&f, &task, &[], &minus).is_err());
    }

    #[test]
    fn timing_and_quality_cases() {
        let b = |delta| Baselines { delta, ppl_bar: 1.12 };
        assert_eq!(timing_reward(true, &b(0.5), 0.15), 1);
        assert_eq!(timing_reward(true, &b(-0.5), 0.15), -1);
        assert_eq!(timing_reward(true, &b(0.15), 0.15), 0);
        assert_eq!(timing_reward(false, &b(0.9), 0.15), 0);
        assert_eq!(quality_reward(true, 1, 1.10, &b(0.0), 0.01), 1);
        assert_eq!(quality_reward(true, 0, 1.0, &b(0.0), 0.01), 0);
        assert_eq!(quality_reward(false, 1, 1.0, &b(0.0), 0.01), 0);
        let edge = Baselines { delta: 0.0, ppl_bar: 1.0 };
        assert_eq!(quality_reward(true, 1, 1.0 + 0.5, &edge, 0.5), 0);
    }

    #[test]
    fn composite_cases() {
        let w = RewardWeights::default();
        assert!((composite(1, 1, 1, 1, &w) - 1.0).abs() < 1e-12);
        assert!((composite(0, 1, -1, 0, &w) + 0.15).abs() < 1e-12);
        assert_eq!(composite(0, 0, 0, 0, &w), 0.0);
    }

    #[test]
    fn weights_validate() {
        assert!(RewardWeights::default().validate().is_ok());
        assert!(RewardWeights { w_acc: -1.0, ..Default::default() }.validate().is_err());
        assert!(RewardWeights { tau: f64::NAN, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn composite_stays_in_bounds() {
        let w = RewardWeights::default();
        for a in 0..2 {
            for fm in 0..2 {
                for t in -1..=1 {
                    for q in 0..2 {
                        let r = composite(a, fm, t, q, &w);
                        assert!((-0.15 - 1e-12..=1.0 + 1e-12).contains(&r));
                    }
                }
            }
        }
    }
}
