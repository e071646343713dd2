//! The five-row component ablation: length (LR), timing (TR) and quality (QR)
//! rewards and hint re-prompting (Vis), each variant trained from the same
//! warm start on the same suite with the same seed.

use serde::{Deserialize, Serialize};

use super::train::{train_with, Toggles, TrainConfig};
use crate::env::{TaskClass, TaskFamily, TaskInstance};
use crate::error::Result;
use crate::exec::Execution;
use crate::harness::eval::{evaluate, EvalReport, EvalSpec};
use crate::policy::PolicyParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: &'static str,
    pub toggles: Toggles,
}

const fn t(length_reward: bool, timing_reward: bool, quality_reward: bool, visual_reprompt: bool) -> Toggles {
    Toggles { length_reward, timing_reward, quality_reward, visual_reprompt }
}

pub const VARIANTS: [Variant; 5] = [
    Variant { name: "grpo", toggles: t(true, false, false, false) },
    Variant { name: "grpo_no_lr", toggles: t(false, false, false, false) },
    Variant { name: "a2po_timing_only", toggles: t(false, true, false, false) },
    Variant { name: "a2po_no_vis", toggles: t(false, true, true, false) },
    Variant { name: "a2po", toggles: t(false, true, true, true) },
];

pub fn variant_config(base: &TrainConfig, v: &Variant) -> TrainConfig {
    TrainConfig { toggles: v.toggles, ..base.clone() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub lr: bool,
    pub tr: bool,
    pub qr: bool,
    pub vis: bool,
    pub acc: f64,
    pub ppl: f64,
    pub timing_correctness: f64,
    pub aux_beneficial: Option<f64>,
    pub aux_neutral: Option<f64>,
    pub aux_harmful: Option<f64>,
}

impl AblationRow {
    pub fn new(v: &Variant, report: &EvalReport) -> Self {
        let aux = |c| report.per_class.get(&c).map(|s| s.aux_rate);
        Self {
            variant: v.name.to_string(),
            lr: v.toggles.length_reward,
            tr: v.toggles.timing_reward,
            qr: v.toggles.quality_reward,
            vis: v.toggles.visual_reprompt,
            acc: report.accuracy,
            ppl: report.mean_ppl,
            timing_correctness: report.timing_correctness,
            aux_beneficial: aux(TaskClass::Beneficial),
            aux_neutral: aux(TaskClass::Neutral),
            aux_harmful: aux(TaskClass::Harmful),
        }
    }
}

/// Trains every variant and evaluates it on `eval_tasks`. Evaluation
/// re-prompts only for variants trained with it.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    base: &TrainConfig,
    family: &TaskFamily,
    tasks: &[TaskInstance],
    warm: &PolicyParams,
    eval_tasks: &[TaskInstance],
    eval: &EvalSpec,
    exec: Execution,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(VARIANTS.len());
    for v in &VARIANTS {
        let cfg = variant_config(base, v);
        let out = train_with(&cfg, family, tasks, warm, exec, |_| Ok(())).map_err(|f| f.error)?;
        let spec = EvalSpec { reprompt: v.toggles.visual_reprompt, ..*eval };
        let (report, _) = evaluate(&out.params, family, eval_tasks, &spec, base.seed, exec)?;
        log::info!("ablation {}: acc {:.3}, timing {:.3}", v.name, report.accuracy, report.timing_correctness);
        rows.push(AblationRow::new(v, &report));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_differ_from_base_only_in_toggles() {
        let base = TrainConfig { steps: 17, lr: 0.02, ..Default::default() };
        assert_eq!(VARIANTS.len(), 5);
        for v in &VARIANTS {
            let c = variant_config(&base, v);
            assert_eq!(TrainConfig { toggles: base.toggles, ..c.clone() }, base);
            assert_eq!(c.toggles, v.toggles);
        }
        let names: std::collections::BTreeSet<_> = VARIANTS.iter().map(|v| v.name).collect();
        assert_eq!(names.len(), 5);
    }

    #[test]
    fn row_layout_follows_toggles() {
        let grpo = VARIANTS[0];
        assert!(grpo.toggles.length_reward && !grpo.toggles.timing_reward);
        let full = VARIANTS[4];
        assert!(!full.toggles.length_reward && full.toggles.timing_reward && full.toggles.quality_reward && full.toggles.visual_reprompt);
    }
}
