//! Supervised warm start: full-batch Adam ascent on the mean token
//! log-likelihood of demonstration targets.

use super::{accumulate_trajectory_grad, logprob_of, PolicyParams};
use crate::env::Demonstration;
use crate::error::{Error, Result};
use crate::exec::{map_slice, Execution};
use crate::grpo::adam::{apply_update, AdamMoments, AdamState};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WarmStartReport {
    /// Mean target-token logprob before each epoch's update.
    pub objective: Vec<f64>,
}

pub fn warmstart_mle(params: &PolicyParams, demos: &[Demonstration], epochs: usize, lr: f64) -> Result<PolicyParams> {
    warmstart_mle_with(params, demos, epochs, lr, Execution::default()).map(|(p, _)| p)
}

pub fn warmstart_mle_with(
    params: &PolicyParams,
    demos: &[Demonstration],
    epochs: usize,
    lr: f64,
    exec: Execution,
) -> Result<(PolicyParams, WarmStartReport)> {
    if demos.is_empty() {
        return Err(Error::InvalidArgument("warm start needs at least one demonstration".into()));
    }
    let trajs: Vec<_> = demos.iter().map(|d| (d, d.as_trajectory())).collect();
    let tokens: usize = trajs.iter().map(|(_, t)| t.generated_count()).sum();
    if tokens == 0 {
        return Err(Error::InvalidArgument("demonstrations have no generated target tokens".into()));
    }
    let scale = 1.0 / tokens as f64;
    let mut state = AdamState::new(params.len(), AdamMoments::default());
    let mut current = params.clone();
    let mut report = WarmStartReport::default();
    for epoch in 0..epochs {
        let parts = map_slice(exec, &trajs, |(d, t)| -> Result<(f64, Vec<f64>)> {
            let lp: f64 = logprob_of(&current, &d.prompt_tokens, t)?.iter().sum();
            let mut g = vec![0.0; current.len()];
            accumulate_trajectory_grad(&current, &d.prompt_tokens, t, |_| 1.0, &mut g);
            Ok((lp, g))
        });
        let mut objective = 0.0;
        // negated: Adam minimizes
        let mut grad = vec![0.0; current.len()];
        for part in parts {
            let (lp, g) = part?;
            objective += lp;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a -= b * scale;
            }
        }
        objective *= scale;
        if !objective.is_finite() {
            return Err(Error::NonFiniteValue(format!("warm-start objective at epoch {epoch}")));
        }
        report.objective.push(objective);
        current = apply_update(&mut state, &current, &grad, lr)?;
    }
    Ok((current, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{TaskClass, TaskFamily};
    use crate::policy::init_params;
    use crate::rng::{Lane, StreamKey};

    fn setup() -> (TaskFamily, Vec<Demonstration>) {
        let f = TaskFamily::new(0);
        let mut rng = StreamKey::new(2, Lane::TaskSuite).rng();
        let task = f.generate_task(0, TaskClass::Beneficial, &mut rng);
        let demos = f.make_demos(&[task], &mut rng);
        (f, demos)
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (f, demos) = setup();
        let p = init_params(f.vocab(), 4, 8, 1).unwrap();
        let q = warmstart_mle(&p, &demos, 0, 0.1).unwrap();
        assert_eq!(p.weights(), q.weights());
    }

    #[test]
    fn single_demo_objective_rises() {
        let (f, demos) = setup();
        let p = init_params(f.vocab(), 4, 8, 1).unwrap();
        let one = vec![demos[0].clone()];
        let (_, report) = warmstart_mle_with(&p, &one, 501, 0.1, Execution::default()).unwrap();
        let rises = report.objective.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(rises as f64 >= 0.95 * 500.0, "{rises} of 500 epochs improved");
    }

    #[test]
    fn empty_demos_rejected() {
        let (f, _) = setup();
        let p = init_params(f.vocab(), 4, 8, 1).unwrap();
        assert!(warmstart_mle(&p, &[], 1, 0.1).is_err());
    }

    #[test]
    fn prohibited_demos_have_no_aux() {
        let f = TaskFamily::new(3);
        let tasks = f.generate_suite(crate::env::SuiteCounts { beneficial: 20, neutral: 20, harmful: 20 }, 4, 0);
        let demos = f.make_demos(&tasks, &mut StreamKey::new(4, Lane::Demos).rng());
        for d in demos.iter().filter(|d| d.constraint_tag == crate::env::ConstraintTag::Prohibited) {
            assert!(d.target_tokens.iter().all(|&t| !f.vocab().is_aux(t)));
        }
    }
}
