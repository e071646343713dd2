use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::env::{TaskClass, TaskFamily, TaskInstance};
use crate::error::{Error, Result};
use crate::exec::{map_slice, Execution};
use crate::policy::PolicyParams;
use crate::reward::ppl;
use crate::rng::{Lane, StreamKey};
use crate::sampler::{rollout, Decoding, RolloutSettings, DEFAULT_MAX_LEN};
use crate::trajectory::{Protocol, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub tasks_per_class: usize,
    pub rollouts_per_task: usize,
    pub greedy: bool,
    pub reprompt: bool,
    pub max_len: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { tasks_per_class: 50, rollouts_per_task: 1, greedy: true, reprompt: true, max_len: DEFAULT_MAX_LEN }
    }
}

impl EvalSpec {
    pub fn settings(&self) -> RolloutSettings {
        RolloutSettings {
            max_len: self.max_len,
            decoding: if self.greedy { Decoding::Greedy } else { Decoding::Sample { temperature: 1.0 } },
            reprompt: self.reprompt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task_id: u64,
    pub class: TaskClass,
    pub rollouts: usize,
    pub correct: usize,
    pub aux_used: usize,
    pub mean_ppl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub tasks: usize,
    pub trajectories: usize,
    pub accuracy: f64,
    pub aux_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub trajectories: usize,
    pub accuracy: f64,
    pub mean_ppl: f64,
    /// Fraction of trajectories whose aux use matches the class-optimal
    /// choice; NEUTRAL counts as correct either way.
    pub timing_correctness: f64,
    /// Only classes present in the suite appear.
    pub per_class: BTreeMap<TaskClass, ClassStats>,
    pub tasks: Vec<TaskEval>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTrajectory {
    pub task_id: u64,
    pub trajectory: Trajectory,
}

/// Natural-protocol rollouts on every task. Greedy unless `spec.greedy` is off.
pub fn evaluate(
    params: &PolicyParams,
    family: &TaskFamily,
    tasks: &[TaskInstance],
    spec: &EvalSpec,
    seed: u64,
    exec: Execution,
) -> Result<(EvalReport, Vec<EvalTrajectory>)> {
    if tasks.is_empty() || spec.rollouts_per_task == 0 {
        return Err(Error::InvalidArgument("evaluation needs tasks and at least one rollout per task".into()));
    }
    if params.vocab() != family.vocab() {
        return Err(Error::InvalidArgument("policy vocabulary differs from the task suite's".into()));
    }
    let settings = spec.settings();
    let per_task = map_slice(exec, tasks, |task| -> Result<Vec<Trajectory>> {
        (0..spec.rollouts_per_task)
            .map(|i| {
                let mut rng = StreamKey::new(seed, Lane::Eval).task(task.task_id).index(i as u64).rng();
                rollout(params, family, task, Protocol::Natural, &settings, &mut rng)
            })
            .collect()
    });

    let mut records = Vec::with_capacity(tasks.len());
    let mut trajs = Vec::new();
    let mut by_class: BTreeMap<TaskClass, (usize, usize, usize, usize)> = BTreeMap::new();
    let (mut correct, mut timed, mut ppl_sum, mut total) = (0usize, 0usize, 0.0, 0usize);
    for (task, ts) in tasks.iter().zip(per_task) {
        let ts = ts?;
        let mut rec = TaskEval { task_id: task.task_id, class: task.class, rollouts: ts.len(), correct: 0, aux_used: 0, mean_ppl: 0.0 };
        for t in &ts {
            let ok = family.judge_answer(t, task) as usize;
            let aux = t.aux_used();
            let p = ppl(t)?;
            rec.correct += ok;
            rec.aux_used += aux as usize;
            rec.mean_ppl += p / ts.len() as f64;
            timed += task.class.optimal_aux().is_none_or(|want| want == aux) as usize;
            ppl_sum += p;
        }
        let e = by_class.entry(task.class).or_default();
        e.0 += 1;
        e.1 += ts.len();
        e.2 += rec.correct;
        e.3 += rec.aux_used;
        correct += rec.correct;
        total += ts.len();
        records.push(rec);
        trajs.extend(ts.into_iter().map(|trajectory| EvalTrajectory { task_id: task.task_id, trajectory }));
    }
    let per_class = by_class
        .into_iter()
        .map(|(c, (tasks, n, ok, aux))| {
            (c, ClassStats { tasks, trajectories: n, accuracy: ok as f64 / n as f64, aux_rate: aux as f64 / n as f64 })
        })
        .collect();
    let report = EvalReport {
        trajectories: total,
        accuracy: correct as f64 / total as f64,
        mean_ppl: ppl_sum / total as f64,
        timing_correctness: timed as f64 / total as f64,
        per_class,
        tasks: records,
    };
    Ok((report, trajs))
}
