use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use mtrl::e3::{
    build_exploit_mdp, run_e3_task, run_e3_task_from, E3Params, KnownnessMap, Mode, TaskEvent, TaskLog,
    ThresholdSchedule,
};
use mtrl::envs::{gridworld_suite, Simulator, GRID_START};
use mtrl::estimation::CountTable;
use mtrl::mdp::{value_iteration, Mdp};
use mtrl::multitask::MultiTaskConfig;
use mtrl_oracles::{mean_and_se, rollout_returns};

/// Counts whose empirical model is exactly `mdp` (probabilities are
/// multiples of `1/k`).
fn exact_counts(mdp: &Mdp, k: u64) -> CountTable {
    let mut c = CountTable::new(mdp.num_states(), mdp.num_actions());
    for s in 0..mdp.num_states() {
        for a in 0..mdp.num_actions() {
            for next in 0..mdp.num_states() {
                let n = (mdp.prob(s, a, next) * k as f64).round() as u64;
                if n > 0 {
                    c.add(s, a, next, n, 0.0);
                }
            }
            c.add(s, a, s, 0, mdp.reward(s, a) * k as f64);
        }
    }
    c
}

fn two_state() -> Mdp {
    Mdp::new(
        2,
        2,
        0.9,
        vec![0.5, 0.5, 0.1, 0.9, 0.8, 0.2, 0.0, 1.0],
        vec![0.2, 0.6, 0.9, 0.3],
    )
    .unwrap()
}

fn gridworld_params() -> E3Params {
    MultiTaskConfig::gridworld().single_task_params()
}

#[test]
fn preseeded_task_exploits_optimally() {
    let mdp = two_state();
    let env = Simulator::new(Arc::new(mdp.clone()), 0).unwrap();
    let (_, optimal) = value_iteration(&mdp, 1e-10);
    let horizon = 500;
    let params = E3Params {
        horizon,
        schedule: ThresholdSchedule::fixed(5),
        discount: 0.9,
        epsilon: 0.1,
        tol: 1e-8,
    };
    let totals: Vec<f64> = (0..200)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, log) = run_e3_task_from(&env, &params, exact_counts(&mdp, 100), &mut rng).unwrap();
            for st in &log.steps {
                assert_eq!(st.mode, Mode::Exploit);
                assert_eq!(st.action, optimal.0[st.state]);
                assert!(!st.unknown_visit);
            }
            log.cumulative_reward()
        })
        .collect();
    let (mean, se) = mean_and_se(&totals);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (oracle, oracle_se) = rollout_returns(&mdp, &optimal.0, 0, horizon, 1.0, 10_000, &mut rng);
    let tolerance = 3.0 * (se * se + oracle_se * oracle_se).sqrt();
    assert!((mean - oracle).abs() <= tolerance, "{mean} vs {oracle} (+- {tolerance})");
}

#[test]
fn one_step_on_a_single_state() {
    let mdp = Mdp::new(1, 1, 0.9, vec![1.0], vec![0.5]).unwrap();
    let env = Simulator::new(Arc::new(mdp), 0).unwrap();
    let params = E3Params {
        horizon: 1,
        ..gridworld_params()
    };
    let (counts, log) = run_e3_task(&env, &params, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(log.steps.len(), 1);
    assert_eq!(counts.total_visits(), 1);
}

#[test]
fn gridworld_pairs_reach_threshold() {
    let fam = gridworld_suite(0.95).unwrap();
    let params = gridworld_params();
    let complete = (0..100u64)
        .into_par_iter()
        .filter(|&seed| {
            let env = fam.simulator(seed as usize % 3);
            let (counts, _) = run_e3_task(&env, &params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            counts.min_visits() >= 5
        })
        .count();
    assert!(complete >= 95, "{complete} of 100");
}

fn gridworld_logs() -> Vec<TaskLog> {
    let fam = gridworld_suite(0.95).unwrap();
    let params = gridworld_params();
    (0..6u64)
        .map(|seed| {
            let env = fam.simulator(seed as usize % 3);
            run_e3_task(&env, &params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().1
        })
        .collect()
}

#[test]
fn knownness_is_monotone_and_replanning_follows_it() {
    for log in gridworld_logs() {
        let mut before = 0;
        let mut changes = Vec::new();
        for st in &log.steps {
            assert!(st.known_pairs >= before);
            if st.known_pairs != before {
                changes.push(st.step);
            }
            before = st.known_pairs;
        }
        let replans: Vec<usize> = log
            .events
            .iter()
            .filter_map(|e| match e {
                TaskEvent::Replanned { step, .. } => Some(*step),
                _ => None,
            })
            .collect();
        assert_eq!(replans, changes);
        assert_eq!(log.replans(), changes.len());
    }
}

#[test]
fn exploration_resumes_only_after_new_knowledge() {
    for log in gridworld_logs() {
        let resumptions = log
            .steps
            .windows(2)
            .filter(|w| w[0].mode == Mode::Exploit && w[1].mode == Mode::Explore)
            .count();
        assert!(resumptions <= log.replans());
    }
}

#[test]
fn exploit_model_with_exact_counts_is_the_truth() {
    let fam = gridworld_suite(0.95).unwrap();
    let truth = fam.member(0);
    let exact = exact_counts(truth, 100);
    let known = KnownnessMap::all(25, 4, true);
    let exploit = build_exploit_mdp(&exact, &known, 0.95);
    for s in 0..25 {
        for a in 0..4 {
            assert!((exploit.reward(s, a) - truth.reward(s, a)).abs() < 1e-12);
            for next in 0..25 {
                assert!((exploit.prob(s, a, next) - truth.prob(s, a, next)).abs() < 1e-12);
            }
        }
    }
    let (_, p_exploit) = value_iteration(&exploit, 1e-10);
    let (_, p_truth) = value_iteration(truth, 1e-10);
    assert_eq!(p_exploit, p_truth);
}

#[test]
fn unknown_pairs_only_lower_the_exploit_value() {
    let fam = gridworld_suite(0.95).unwrap();
    let truth = fam.member(0);
    let mut known = KnownnessMap::all(25, 4, true);
    // Pairs next to the corners.
    for (s, a) in [(3, 0), (9, 1), (15, 2), (21, 3)] {
        known.set(s, a, false);
    }
    let exploit = build_exploit_mdp(&exact_counts(truth, 100), &known, 0.95);
    let tol = 1e-9;
    let (v_exploit, _) = value_iteration(&exploit, tol);
    let (v_truth, _) = value_iteration(truth, tol);
    assert!(v_exploit.0[GRID_START] <= v_truth.0[GRID_START] + 2.0 * tol);
}
