mod common;

use std::fs;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mtrl::harness::{mann_whitney_u, run_experiment, ArmSelection, ExperimentConfig};

use common::config_path;

/// Exact two-sided p by enumerating every way to pick the first sample's
/// ranks from `1..=n1+n2` (no ties).
fn enumerated_p(n1: usize, n2: usize, u: f64) -> f64 {
    let n = n1 + n2;
    let centre = (n1 * n2) as f64 / 2.0;
    let (mut extreme, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != n1 {
            continue;
        }
        let rank_sum: usize = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| i + 1).sum();
        let ui = rank_sum as f64 - (n1 * (n1 + 1)) as f64 / 2.0;
        total += 1;
        if (ui - centre).abs() >= (u - centre).abs() - 1e-9 {
            extreme += 1;
        }
    }
    extreme as f64 / total as f64
}

#[test]
fn separated_samples_match_enumeration() {
    let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    assert_eq!(r.u, 0.0);
    assert!((r.p - enumerated_p(3, 3, 0.0)).abs() < 1e-12);
    assert!((r.p - 0.1).abs() < 1e-12);
    let r = mann_whitney_u(&[1.0, 4.0, 7.0, 9.0], &[2.0, 3.0, 5.0, 6.0, 8.0]).unwrap();
    assert!((r.p - enumerated_p(4, 5, r.u)).abs() < 1e-12);
}

#[test]
fn rejection_rate_is_calibrated() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let pairs = 5000;
    let rejected = (0..pairs)
        .filter(|_| {
            let xs: Vec<f64> = (0..20).map(|_| rng.random()).collect();
            let ys: Vec<f64> = (0..20).map(|_| rng.random()).collect();
            mann_whitney_u(&xs, &ys).unwrap().p < 0.05
        })
        .count();
    let rate = rejected as f64 / pairs as f64;
    assert!((rate - 0.05).abs() <= 0.02, "rejection rate {rate}");
}

#[test]
fn shipped_configs_parse() {
    for name in ["gridworld.toml", "reduced.toml"] {
        let cfg = ExperimentConfig::from_file(&config_path(name)).unwrap();
        cfg.validate().unwrap();
    }
    let full = ExperimentConfig::from_file(&config_path("gridworld.toml")).unwrap();
    assert_eq!(full.multitask(), mtrl::multitask::MultiTaskConfig::gridworld());
    assert!("rounds = 2\nbogus = 1".parse::<ExperimentConfig>().is_err());
    assert!("rounds = 0".parse::<ExperimentConfig>().unwrap().validate().is_err());
}

fn header(path: &std::path::Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn csv_schemas_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        rounds: 2,
        tasks: 15,
        horizon: 1500,
        phase1_knownness: 20,
        cluster_min_visits: 20,
        task_logs: true,
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    run_experiment(&cfg).unwrap();
    let out = dir.path();
    for arm in ["multitask", "single_task_e3"] {
        assert_eq!(
            header(&out.join(format!("rounds/{arm}_round_001.csv"))),
            "round,task,phase,true_mdp,identified_group,cum_reward,unknown_visits,identification_step"
        );
        assert_eq!(
            header(&out.join(format!("tasks/{arm}_round_000_task_014.csv"))),
            "step,state,action,reward,mode,known_pairs_count,eliminated,survivors"
        );
    }
    assert_eq!(
        header(&out.join("summary.csv")),
        "task,multitask_mean,multitask_se,single_task_e3_mean,single_task_e3_se"
    );
    let rows = fs::read_to_string(out.join("rounds/multitask_round_000.csv")).unwrap();
    assert!(rows.lines().skip(1).all(|l| l.split(',').count() == 8));
    assert_eq!(rows.lines().count(), 16);
    assert!(fs::read_to_string(out.join("summary.txt")).unwrap().contains("p = "));
}

#[test]
fn one_round_one_task_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        rounds: 1,
        tasks: 1,
        phase1_tasks: Some(1),
        horizon: 200,
        arm: ArmSelection::SingleTaskE3,
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let stats = run_experiment(&cfg).unwrap();
    assert!(stats.tests.is_empty());
    assert_eq!(stats.arms.len(), 1);
    assert_eq!(stats.arms[0].per_task_se, vec![0.0]);
    let files: Vec<_> = fs::read_dir(dir.path().join("rounds")).unwrap().collect();
    assert_eq!(files.len(), 1);
}

proptest! {
    #[test]
    fn swapping_samples_complements_u(
        xs in prop::collection::vec(0u8..20, 1..15),
        ys in prop::collection::vec(0u8..20, 1..15),
    ) {
        let xs: Vec<f64> = xs.into_iter().map(f64::from).collect();
        let ys: Vec<f64> = ys.into_iter().map(f64::from).collect();
        let a = mann_whitney_u(&xs, &ys).unwrap();
        let b = mann_whitney_u(&ys, &xs).unwrap();
        prop_assert!((a.u + b.u - (xs.len() * ys.len()) as f64).abs() < 1e-9);
        prop_assert!((a.p - b.p).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.p));
    }
}
