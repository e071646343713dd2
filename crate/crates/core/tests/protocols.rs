use std::collections::HashMap;
use std::sync::OnceLock;

use a2po::env::{scripted_direct_answerer, SuiteCounts, TaskClass, TaskFamily};
use a2po::grpo::{train_with, variant_config, Toggles, TrainConfig, VARIANTS};
use a2po::policy::{init_params, logprob_of, warmstart_mle_with, PolicyParams};
use a2po::reward::{accuracy_reward, ppl, RewardWeights};
use a2po::rng::{Lane, StreamKey};
use a2po::sampler::{build_rollout_group, rollout, sample_protocol, Decoding, RolloutSettings};
use a2po::trajectory::{Origin, Protocol, Trajectory};
use a2po::vocab::{Role, TokenId};
use a2po::Execution;
use rand::Rng as _;

fn family() -> TaskFamily {
    TaskFamily::new(3)
}

fn warm() -> &'static PolicyParams {
    static W: OnceLock<PolicyParams> = OnceLock::new();
    W.get_or_init(|| {
        let f = family();
        let demo_tasks = f.generate_suite(SuiteCounts { beneficial: 60, neutral: 60, harmful: 60 }, 21, 2_000_000);
        let demos = f.make_demos(&demo_tasks, &mut StreamKey::new(5, Lane::Demos).rng());
        let init = init_params(f.vocab(), 8, 24, 5).unwrap();
        warmstart_mle_with(&init, &demos, 200, 0.01, Execution::default()).unwrap().0
    })
}

#[test]
fn mandatory_rollouts_always_open_with_aux() {
    let f = family();
    let open = f.layout.id(Role::AuxOpen);
    let tasks = f.generate_suite(SuiteCounts { beneficial: 10, neutral: 10, harmful: 5 }, 30, 0);
    let mut n = 0;
    for task in &tasks {
        let ts = sample_protocol(warm(), &f, task, Protocol::Mandatory, 40, &RolloutSettings::default(), StreamKey::new(1, Lane::Custom(9)), Execution::default())
            .unwrap();
        for t in ts {
            assert_eq!(t.tokens[0], open);
            assert_eq!(t.origin[0], Origin::Generated);
            n += 1;
        }
    }
    assert_eq!(n, 1000);
}

fn sequence_tv(a: &[Trajectory], b: &[Trajectory]) -> f64 {
    let mut counts: HashMap<Vec<TokenId>, (f64, f64)> = HashMap::new();
    for t in a {
        counts.entry(t.tokens.clone()).or_default().0 += 1.0 / a.len() as f64;
    }
    for t in b {
        counts.entry(t.tokens.clone()).or_default().1 += 1.0 / b.len() as f64;
    }
    0.5 * counts.values().map(|(p, q)| (p - q).abs()).sum::<f64>()
}

#[test]
fn natural_matches_prohibited_when_aux_has_no_mass() {
    let f = family();
    let p = scripted_direct_answerer(&f.layout, [0.4, 0.3, 0.2, 0.1], 8, 24).unwrap();
    let task = &f.generate_suite(SuiteCounts { beneficial: 1, neutral: 0, harmful: 0 }, 4, 0)[0];
    let s = RolloutSettings::default();
    let nat = sample_protocol(&p, &f, task, Protocol::Natural, 10_000, &s, StreamKey::new(2, Lane::Custom(1)), Execution::default()).unwrap();
    let pro = sample_protocol(&p, &f, task, Protocol::Prohibited, 10_000, &s, StreamKey::new(2, Lane::Custom(1)), Execution::default()).unwrap();
    let tv = sequence_tv(&nat, &pro);
    assert!(tv < 0.02, "total variation {tv}");
}

#[test]
fn beneficial_tasks_have_positive_empirical_gap() {
    let f = family();
    let tasks = f.generate_suite(SuiteCounts { beneficial: 100, neutral: 0, harmful: 0 }, 31, 0);
    let positive = tasks
        .iter()
        .filter(|task| {
            let g = build_rollout_group(warm(), &f, task, 8, &RolloutSettings::default(), StreamKey::new(3, Lane::Custom(3)), Execution::default())
                .unwrap();
            g.delta > 0.0
        })
        .count();
    assert!(positive >= 95, "{positive}/100 beneficial tasks with positive gap");
}

#[test]
fn warm_start_produces_well_formed_answers_on_held_out_prompts() {
    let f = family();
    let l = &f.layout;
    let (mark, eos) = (l.id(Role::AnswerMark), l.id(Role::Eos));
    let tasks = f.generate_suite(SuiteCounts { beneficial: 50, neutral: 50, harmful: 50 }, 99, 7_000_000);
    let s = RolloutSettings { decoding: Decoding::Greedy, ..Default::default() };
    let formed = tasks
        .iter()
        .filter(|task| {
            let t = rollout(warm(), &f, task, Protocol::Natural, &s, &mut StreamKey::new(0, Lane::Eval).rng()).unwrap();
            let n = t.tokens.len();
            !t.truncated && n >= 3 && t.tokens[n - 3] == mark && l.answers.contains(&t.tokens[n - 2]) && t.tokens[n - 1] == eos
        })
        .count();
    assert!(formed as f64 / tasks.len() as f64 > 0.9, "{formed}/{} well-formed", tasks.len());
}

#[test]
fn accuracy_reward_matches_independent_parse() {
    let f = family();
    let l = &f.layout;
    let mark = l.id(Role::AnswerMark);
    let tasks = f.generate_suite(SuiteCounts { beneficial: 10, neutral: 10, harmful: 10 }, 8, 0);
    let mut rng = StreamKey::new(8, Lane::Custom(8)).rng();
    let mut hits = 0;
    for i in 0..1000 {
        let task = &tasks[i % tasks.len()];
        let mut t = Trajectory::new(Protocol::Natural);
        for _ in 0..rng.gen_range(0..12) {
            // bias towards marks and answers so both outcomes occur
            let tok = match rng.gen_range(0..4) {
                0 => mark,
                1 => l.answers[rng.gen_range(0..4)],
                _ => rng.gen_range(0..l.vocab.size() as TokenId),
            };
            t.push_generated(tok, -1.0);
        }
        let mut expected = 0;
        for w in t.tokens.windows(2) {
            if w[0] == mark {
                expected = (w[1] == task.answer_token) as u8;
                break;
            }
        }
        assert_eq!(accuracy_reward(&f, &t, task), expected, "{:?}", t.tokens);
        hits += expected as usize;
    }
    assert!(hits > 50 && hits < 950);
}

#[test]
fn perplexity_matches_rescored_nll() {
    let f = family();
    let tasks = f.generate_suite(SuiteCounts { beneficial: 5, neutral: 5, harmful: 5 }, 12, 0);
    for task in &tasks {
        for protocol in Protocol::ALL {
            let ts = sample_protocol(warm(), &f, task, protocol, 6, &RolloutSettings::default(), StreamKey::new(6, Lane::Custom(6)), Execution::default())
                .unwrap();
            for t in ts {
                let lps = logprob_of(warm(), &task.prompt_tokens, &t).unwrap();
                let nll = -lps.iter().sum::<f64>() / lps.len() as f64;
                assert!((ppl(&t).unwrap() - nll.exp()).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn shaping_off_reproduces_the_plain_baseline() {
    let f = family();
    let tasks = f.generate_suite(SuiteCounts { beneficial: 6, neutral: 0, harmful: 6 }, 14, 0);
    let base = TrainConfig { steps: 6, seed: 2, ..Default::default() };
    let baseline = VARIANTS.iter().find(|v| v.name == "grpo_no_lr").unwrap();
    let a = train_with(&variant_config(&base, baseline), &f, &tasks, warm(), Execution::default(), |_| Ok(())).unwrap();
    let stripped = TrainConfig {
        toggles: Toggles { length_reward: false, timing_reward: false, quality_reward: false, visual_reprompt: false },
        weights: RewardWeights { w_time: 0.0, w_qual: 0.0, ..RewardWeights::default() },
        ..base
    };
    let b = train_with(&stripped, &f, &tasks, warm(), Execution::default(), |_| Ok(())).unwrap();
    assert_eq!(a.params.weights(), b.params.weights());
    assert_eq!(a.history, b.history);
}

#[test]
fn beneficial_and_harmful_classes_label_as_expected() {
    let f = family();
    for task in f.generate_suite(SuiteCounts { beneficial: 20, neutral: 20, harmful: 20 }, 15, 0) {
        let decoy = task.hint_tokens[3];
        match task.class {
            TaskClass::Harmful => assert_ne!(f.lookup(decoy), task.answer_token),
            _ => assert_eq!(f.lookup(decoy), task.answer_token),
        }
    }
}
