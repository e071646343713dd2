//! Synthetic keyed-lookup tasks with exact judges.
//!
//! A prompt is `[BOS, x1, x2, slot]`: two figure tokens and a slot that holds
//! either a key token or BLANK. A fixed key table maps each of the four keys
//! to one of the four answers.
//!
//! The correct aux construction is `[C(x1), C(x2), slot]`, where `C` maps a
//! figure token to its construction token. When it is verified the hint
//! `[C(x1), C(x2), BLANK, hint_key]` is injected. Readers follow the "last key
//! wins" rule, so what the hint's key does depends on the class:
//!
//! | class      | slot     | hint key | aux effect          |
//! |------------|----------|----------|---------------------|
//! | BENEFICIAL | BLANK    | true key | reveals the answer  |
//! | NEUTRAL    | true key | true key | harmless            |
//! | HARMFUL    | true key | decoy    | overrides the truth |

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_slice, Execution};
use crate::policy::PolicyParams;
use crate::rng::{Lane, Rng, StreamKey};
use crate::sampler::{rollout, AuxVerifier, RolloutSettings};
use crate::trajectory::{Origin, Protocol, Trajectory};
use crate::vocab::{Role, TokenId, Vocabulary};

pub const NUM_KEYS: usize = 4;
pub const NUM_FIGURES: usize = 4;
pub const AUX_LEN: usize = 3;
pub const HINT_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskClass {
    Beneficial,
    Neutral,
    Harmful,
}

impl TaskClass {
    pub const ALL: [TaskClass; 3] = [TaskClass::Beneficial, TaskClass::Neutral, TaskClass::Harmful];

    pub fn name(self) -> &'static str {
        match self {
            TaskClass::Beneficial => "beneficial",
            TaskClass::Neutral => "neutral",
            TaskClass::Harmful => "harmful",
        }
    }

    /// Whether taking aux is the class-optimal choice; `None` when either is.
    pub fn optimal_aux(self) -> Option<bool> {
        match self {
            TaskClass::Beneficial => Some(true),
            TaskClass::Neutral => None,
            TaskClass::Harmful => Some(false),
        }
    }
}

/// Fixed token ids of the task family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskLayout {
    pub vocab: Vocabulary,
    pub bos: TokenId,
    pub noop: TokenId,
    pub blank: TokenId,
    pub keys: [TokenId; NUM_KEYS],
    pub answers: [TokenId; NUM_KEYS],
    pub figures: [TokenId; NUM_FIGURES],
    pub constructions: [TokenId; NUM_FIGURES],
}

impl TaskLayout {
    pub const VOCAB_SIZE: usize = 26;

    pub fn new() -> Self {
        let roles: BTreeMap<Role, TokenId> = [
            (Role::Pad, 0),
            (Role::Eos, 1),
            (Role::AuxOpen, 3),
            (Role::AuxClose, 4),
            (Role::HintBegin, 5),
            (Role::HintEnd, 6),
            (Role::AnswerMark, 7),
        ]
        .into_iter()
        .collect();
        let answers = [14, 15, 16, 17];
        let vocab = Vocabulary::new(Self::VOCAB_SIZE, roles, answers.to_vec())
            .expect("task layout vocabulary is valid");
        Self {
            vocab,
            bos: 2,
            noop: 8,
            blank: 9,
            keys: [10, 11, 12, 13],
            answers,
            figures: [18, 19, 20, 21],
            constructions: [22, 23, 24, 25],
        }
    }

    pub fn id(&self, role: Role) -> TokenId {
        self.vocab.id(role)
    }

    pub fn is_key(&self, t: TokenId) -> bool {
        self.keys.contains(&t)
    }

    pub fn construction_of(&self, figure: TokenId) -> TokenId {
        let i = self.figures.iter().position(|&f| f == figure).expect("figure token");
        self.constructions[i]
    }
}

impl Default for TaskLayout {
    fn default() -> Self {
        Self::new()
    }
}

/// Bijection from keys to answers (both by index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyTable(pub [usize; NUM_KEYS]);

impl KeyTable {
    pub fn from_seed(seed: u64) -> Self {
        let mut perm = [0, 1, 2, 3];
        perm.shuffle(&mut StreamKey::new(seed, Lane::Custom(0xC0DE)).rng());
        KeyTable(perm)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: u64,
    pub class: TaskClass,
    /// `[BOS, x1, x2, slot]`.
    pub prompt_tokens: Vec<TokenId>,
    pub aux_truth_tokens: Vec<TokenId>,
    pub hint_tokens: Vec<TokenId>,
    pub answer_token: TokenId,
    /// Indices into `prompt_tokens` that hold key tokens.
    pub key_positions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintTag {
    Standard,
    Prohibited,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demonstration {
    pub prompt_tokens: Vec<TokenId>,
    pub target_tokens: Vec<TokenId>,
    pub target_origin: Vec<Origin>,
    pub constraint_tag: ConstraintTag,
}

impl Demonstration {
    /// The target as a natural-protocol trajectory with placeholder logprobs.
    pub fn as_trajectory(&self) -> Trajectory {
        let mut t = Trajectory::new(Protocol::Natural);
        for (&tok, &o) in self.target_tokens.iter().zip(&self.target_origin) {
            match o {
                Origin::Generated => t.push_generated(tok, 0.0),
                Origin::Injected => t.push_injected(&[tok]),
            }
        }
        t
    }
}

/// Serialized task record (JSON Lines).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: u64,
    pub class: TaskClass,
    pub prompt_tokens: Vec<TokenId>,
    pub aux_truth_tokens: Vec<TokenId>,
    pub hint_tokens: Vec<TokenId>,
    pub answer_token: TokenId,
}

/// Per-class task counts for a suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteCounts {
    pub beneficial: usize,
    pub neutral: usize,
    pub harmful: usize,
}

impl SuiteCounts {
    pub fn total(&self) -> usize {
        self.beneficial + self.neutral + self.harmful
    }

    pub fn get(&self, class: TaskClass) -> usize {
        match class {
            TaskClass::Beneficial => self.beneficial,
            TaskClass::Neutral => self.neutral,
            TaskClass::Harmful => self.harmful,
        }
    }
}

/// Strategy a reader takes in the brute-force optimality oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    NoAux,
    /// Correct aux followed by the injected hint.
    Aux,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskFamily {
    pub layout: TaskLayout,
    pub table: KeyTable,
}

impl TaskFamily {
    pub fn new(key_table_seed: u64) -> Self {
        Self { layout: TaskLayout::new(), table: KeyTable::from_seed(key_table_seed) }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.layout.vocab
    }

    /// Answer token for a key token.
    pub fn lookup(&self, key: TokenId) -> TokenId {
        let i = self.layout.keys.iter().position(|&k| k == key).expect("key token");
        self.layout.answers[self.table.0[i]]
    }

    fn build(&self, task_id: u64, class: TaskClass, figures: [TokenId; 2], true_key: TokenId, hint_key: TokenId) -> TaskInstance {
        let l = &self.layout;
        let slot = match class {
            TaskClass::Beneficial => l.blank,
            TaskClass::Neutral | TaskClass::Harmful => true_key,
        };
        let prompt_tokens = vec![l.bos, figures[0], figures[1], slot];
        let key_positions = prompt_tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| l.is_key(t))
            .map(|(i, _)| i)
            .collect();
        let c1 = l.construction_of(figures[0]);
        let c2 = l.construction_of(figures[1]);
        TaskInstance {
            task_id,
            class,
            prompt_tokens,
            aux_truth_tokens: vec![c1, c2, slot],
            hint_tokens: vec![c1, c2, l.blank, hint_key],
            answer_token: self.lookup(true_key),
            key_positions,
        }
    }

    pub fn generate_task(&self, task_id: u64, class: TaskClass, rng: &mut Rng) -> TaskInstance {
        let l = &self.layout;
        let figures = [
            l.figures[rng.gen_range(0..NUM_FIGURES)],
            l.figures[rng.gen_range(0..NUM_FIGURES)],
        ];
        let k = rng.gen_range(0..NUM_KEYS);
        let true_key = l.keys[k];
        let hint_key = match class {
            TaskClass::Beneficial | TaskClass::Neutral => true_key,
            TaskClass::Harmful => {
                let d = (k + rng.gen_range(1..NUM_KEYS)) % NUM_KEYS;
                l.keys[d]
            }
        };
        self.build(task_id, class, figures, true_key, hint_key)
    }

    /// Tasks ordered beneficial, neutral, harmful; ids are `first_id..`.
    pub fn generate_suite(&self, counts: SuiteCounts, seed: u64, first_id: u64) -> Vec<TaskInstance> {
        let mut out = Vec::with_capacity(counts.total());
        let mut id = first_id;
        for class in TaskClass::ALL {
            for _ in 0..counts.get(class) {
                let mut rng = StreamKey::new(seed, Lane::TaskSuite).task(id).rng();
                out.push(self.generate_task(id, class, &mut rng));
                id += 1;
            }
        }
        out
    }

    /// PAD removed, NOOP runs collapsed, NOOP at either end dropped.
    pub fn canonicalize(&self, tokens: &[TokenId]) -> Vec<TokenId> {
        let pad = self.layout.id(Role::Pad);
        let noop = self.layout.noop;
        let mut out: Vec<TokenId> = Vec::with_capacity(tokens.len());
        for &t in tokens.iter().filter(|&&t| t != pad) {
            if t == noop && out.last() == Some(&noop) {
                continue;
            }
            out.push(t);
        }
        while out.last() == Some(&noop) {
            out.pop();
        }
        if out.first() == Some(&noop) {
            out.remove(0);
        }
        out
    }

    pub fn verify_aux(&self, candidate: &[TokenId], task: &TaskInstance) -> bool {
        self.canonicalize(candidate) == self.canonicalize(&task.aux_truth_tokens)
    }

    /// 1 iff the token right after the first ANSWER_MARK is the answer.
    pub fn judge_answer(&self, traj: &Trajectory, task: &TaskInstance) -> u8 {
        let mark = self.layout.id(Role::AnswerMark);
        match traj.tokens.iter().position(|&t| t == mark) {
            Some(i) if traj.tokens.get(i + 1) == Some(&task.answer_token) => 1,
            _ => 0,
        }
    }

    /// The injected block `HINT_BEGIN ‖ hint ‖ HINT_END`.
    pub fn hint_block(&self, task: &TaskInstance) -> Vec<TokenId> {
        let mut block = Vec::with_capacity(task.hint_tokens.len() + 2);
        block.push(self.layout.id(Role::HintBegin));
        block.extend_from_slice(&task.hint_tokens);
        block.push(self.layout.id(Role::HintEnd));
        block
    }

    pub fn inject_hint(&self, ctx: &[TokenId], task: &TaskInstance) -> Vec<TokenId> {
        let mut out = ctx.to_vec();
        out.extend(self.hint_block(task));
        out
    }

    fn last_key(&self, tokens: &[TokenId]) -> Option<TokenId> {
        tokens.iter().rev().copied().find(|&t| self.layout.is_key(t))
    }

    /// One standard demo (aux, hint, answer read off the last visible key)
    /// and one prohibited demo (direct answer; a guess when no key is
    /// visible) per task.
    pub fn make_demos(&self, tasks: &[TaskInstance], rng: &mut Rng) -> Vec<Demonstration> {
        let l = &self.layout;
        let (open, close) = (l.id(Role::AuxOpen), l.id(Role::AuxClose));
        let (mark, eos) = (l.id(Role::AnswerMark), l.id(Role::Eos));
        let mut demos = Vec::with_capacity(2 * tasks.len());
        for task in tasks {
            let mut target = vec![open];
            target.extend_from_slice(&task.aux_truth_tokens);
            target.push(close);
            let mut origin = vec![Origin::Generated; target.len()];
            let hint = self.hint_block(task);
            origin.extend(std::iter::repeat_n(Origin::Injected, hint.len()));
            target.extend(hint);
            let visible = self.inject_hint(&task.prompt_tokens, task);
            let read = self.last_key(&visible).map(|k| self.lookup(k)).expect("hint carries a key");
            target.extend([mark, read, eos]);
            origin.extend([Origin::Generated; 3]);
            demos.push(Demonstration {
                prompt_tokens: task.prompt_tokens.clone(),
                target_tokens: target,
                target_origin: origin,
                constraint_tag: ConstraintTag::Standard,
            });

            let best = match self.last_key(&task.prompt_tokens) {
                Some(k) => self.lookup(k),
                None => l.answers[rng.gen_range(0..NUM_KEYS)],
            };
            demos.push(Demonstration {
                prompt_tokens: task.prompt_tokens.clone(),
                target_tokens: vec![mark, best, eos],
                target_origin: vec![Origin::Generated; 3],
                constraint_tag: ConstraintTag::Prohibited,
            });
        }
        demos
    }

    /// Keeps tasks whose natural-rollout accuracy is strictly between 0 and 1.
    pub fn filter_marginal(
        &self,
        tasks: &[TaskInstance],
        params: &PolicyParams,
        rollouts_per_task: usize,
        settings: &RolloutSettings,
        seed: u64,
        exec: Execution,
    ) -> Result<Vec<TaskInstance>> {
        if rollouts_per_task < 2 {
            return Err(Error::InvalidArgument("filter needs at least 2 rollouts per task".into()));
        }
        let keep = map_slice(exec, tasks, |task| -> Result<bool> {
            let mut correct = 0;
            for i in 0..rollouts_per_task {
                let mut rng = StreamKey::new(seed, Lane::Filter).task(task.task_id).index(i as u64).rng();
                let t = rollout(params, self, task, Protocol::Natural, settings, &mut rng)?;
                correct += self.judge_answer(&t, task) as usize;
            }
            Ok(correct > 0 && correct < rollouts_per_task)
        });
        let mut out = Vec::new();
        for (task, k) in tasks.iter().zip(keep) {
            if k? {
                out.push(task.clone());
            }
        }
        Ok(out)
    }

    pub fn to_record(&self, task: &TaskInstance) -> TaskRecord {
        TaskRecord {
            task_id: task.task_id,
            class: task.class,
            prompt_tokens: task.prompt_tokens.clone(),
            aux_truth_tokens: task.aux_truth_tokens.clone(),
            hint_tokens: task.hint_tokens.clone(),
            answer_token: task.answer_token,
        }
    }

    pub fn from_record(&self, rec: TaskRecord) -> Result<TaskInstance> {
        let vocab = self.vocab();
        let all = rec.prompt_tokens.iter().chain(&rec.aux_truth_tokens).chain(&rec.hint_tokens);
        if let Some(bad) = all.clone().find(|&&t| !vocab.contains(t)) {
            return Err(Error::InvalidArgument(format!("task {}: token {bad} outside vocabulary", rec.task_id)));
        }
        if rec.aux_truth_tokens.is_empty() || rec.hint_tokens.is_empty() {
            return Err(Error::InvalidArgument(format!("task {}: empty aux truth or hint", rec.task_id)));
        }
        if !vocab.answer_alphabet().contains(&rec.answer_token) {
            return Err(Error::InvalidArgument(format!("task {}: answer not in alphabet", rec.task_id)));
        }
        let key_positions = rec
            .prompt_tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| self.layout.is_key(t))
            .map(|(i, _)| i)
            .collect();
        Ok(TaskInstance {
            task_id: rec.task_id,
            class: rec.class,
            prompt_tokens: rec.prompt_tokens,
            aux_truth_tokens: rec.aux_truth_tokens,
            hint_tokens: rec.hint_tokens,
            answer_token: rec.answer_token,
            key_positions,
        })
    }

    /// Context a reader sees after following `strategy` with a correct aux.
    pub fn resolved_context(&self, task: &TaskInstance, strategy: Strategy) -> Vec<TokenId> {
        let mut ctx = task.prompt_tokens.clone();
        if strategy == Strategy::Aux {
            ctx.push(self.layout.id(Role::AuxOpen));
            ctx.extend_from_slice(&task.aux_truth_tokens);
            ctx.push(self.layout.id(Role::AuxClose));
            ctx = self.inject_hint(&ctx, task);
        }
        ctx
    }

    /// Every task of `task`'s class that shares its figures, one per
    /// (true key, hint key) combination the class allows.
    fn class_variants(&self, task: &TaskInstance) -> Vec<TaskInstance> {
        let l = &self.layout;
        let figures = [task.prompt_tokens[1], task.prompt_tokens[2]];
        let mut out = Vec::new();
        for &k in &l.keys {
            for &h in &l.keys {
                let allowed = match task.class {
                    TaskClass::Beneficial | TaskClass::Neutral => h == k,
                    TaskClass::Harmful => h != k,
                };
                if allowed {
                    out.push(self.build(task.task_id, task.class, figures, k, h));
                }
            }
        }
        out
    }

    /// Best achievable accuracy for a reader following `strategy` that sees
    /// only the last key in its context, by brute force: every answer it
    /// could give, scored over every class variant consistent with what it
    /// sees.
    pub fn optimal_accuracy(&self, task: &TaskInstance, strategy: Strategy) -> f64 {
        let observe = |t: &TaskInstance| self.last_key(&self.resolved_context(t, strategy));
        let seen = observe(task);
        let consistent: Vec<TaskInstance> =
            self.class_variants(task).into_iter().filter(|v| observe(v) == seen).collect();
        self.layout
            .answers
            .iter()
            .map(|&a| {
                let hits = consistent.iter().filter(|v| v.answer_token == a).count();
                hits as f64 / consistent.len() as f64
            })
            .fold(0.0, f64::max)
    }

    /// Δ* = optimal accuracy with aux − optimal accuracy without.
    pub fn optimal_utility_gap(&self, task: &TaskInstance) -> f64 {
        self.optimal_accuracy(task, Strategy::Aux) - self.optimal_accuracy(task, Strategy::NoAux)
    }
}

/// Exact-match aux verifier over a task family.
#[derive(Debug, Clone, Copy)]
pub struct ExactVerifier<'a>(pub &'a TaskFamily);

impl AuxVerifier for ExactVerifier<'_> {
    fn verify(&self, body: &[TokenId], task: &TaskInstance) -> bool {
        self.0.verify_aux(body, task)
    }
}

/// Hand-built policy that answers directly: `ANSWER_MARK`, then an answer
/// drawn with probabilities proportional to `answer_weights`, then `EOS`.
/// All other continuations carry probability below 1e-15.
pub fn scripted_direct_answerer(layout: &TaskLayout, answer_weights: [f64; NUM_KEYS], window: usize, embed_dim: usize) -> Result<PolicyParams> {
    const MARGIN: f64 = 40.0;
    let mut p = PolicyParams::zeros(&layout.vocab, window, embed_dim)?;
    let d = embed_dim;
    let mark = layout.id(Role::AnswerMark);
    let eos = layout.id(Role::Eos);
    // embedding codes: answers → e2, ANSWER_MARK → e1, everything else → e0
    for t in 0..layout.vocab.size() as TokenId {
        let code = if layout.answers.contains(&t) {
            2
        } else if t == mark {
            1
        } else {
            0
        };
        let off = p.embed_offset(t);
        p.weights_mut()[off + code] = 1.0;
    }
    // P_1 = identity: only the most recent token matters
    let po = p.proj_offset(1);
    for r in 0..d {
        p.weights_mut()[po + r * d + r] = 1.0;
    }
    let act = 1f64.tanh();
    let mo = p.out_offset(mark);
    p.weights_mut()[mo] = MARGIN / act;
    let eo = p.out_offset(eos);
    p.weights_mut()[eo + 2] = MARGIN / act;
    for (&a, &w) in layout.answers.iter().zip(&answer_weights) {
        let o = p.out_offset(a);
        let logit = if w > 0.0 { MARGIN + w.ln() } else { -MARGIN };
        p.weights_mut()[o + 1] = logit / act;
    }
    Ok(p)
}
