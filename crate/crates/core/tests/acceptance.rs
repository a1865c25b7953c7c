//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.
//!
//! `cargo test -p mtrl --test acceptance`

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use mtrl::e3::run_e3_task;
use mtrl::envs::{gridworld_suite, sample_task, MdpFamily};
use mtrl::estimation::{confidence_radius, merge_counts, CountTable};
use mtrl::finite_model::{run_finite_model_task, GroupBank};
use mtrl::harness::{first_last_test, run_experiment, Arm, ExperimentConfig, SummaryStats};
use mtrl::mdp::value_iteration;
use mtrl::multitask::{cluster_tasks, derive_seed, phase1_length, ClusterOptions, MultiTaskConfig, Phase};
use mtrl_oracles::{
    exact_loss_gap, exact_policy_value, exhaustive_policy_search, outcome_distribution, random_instance,
    reference_plan,
};

use common::{config_path, median, percentile, random_mdp};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn family() -> MdpFamily {
    gridworld_suite(0.95).expect("gridworld builds")
}

fn full_run() -> &'static (SummaryStats, f64) {
    static RUN: OnceLock<(SummaryStats, f64)> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().expect("temp dir");
        let mut cfg = ExperimentConfig::from_file(&config_path("gridworld.toml")).expect("gridworld config");
        cfg.output_dir = dir.path().to_path_buf();
        let started = Instant::now();
        let stats = run_experiment(&cfg).expect("full experiment runs");
        (stats, started.elapsed().as_secs_f64())
    })
}

fn transfer_gain() -> Verdict {
    let (stats, secs) = full_run();
    let full = stats.test(&first_last_test(Arm::Multitask)).expect("first/last test present").result;

    let dir = tempfile::tempdir().expect("temp dir");
    let mut cfg = ExperimentConfig::from_file(&config_path("reduced.toml")).expect("reduced config");
    cfg.output_dir = dir.path().to_path_buf();
    let started = Instant::now();
    let reduced_stats = run_experiment(&cfg).expect("reduced experiment runs");
    let reduced_secs = started.elapsed().as_secs_f64();
    let reduced = reduced_stats
        .test(&first_last_test(Arm::Multitask))
        .expect("first/last test present")
        .result;

    let pass = full.p < 1e-4 && *secs < 900.0 && reduced.p < 0.01 && reduced_secs < 180.0;
    verdict(
        pass,
        format!(
            "full: p = {:.2e} (< 1e-4) in {secs:.1} s (< 900 s); reduced: p = {:.2e} (< 0.01) in {reduced_secs:.1} s (< 180 s)",
            full.p, reduced.p
        ),
    )
}

fn negative_transfer_guard() -> Verdict {
    let (stats, _) = full_run();
    let single = stats.arm(Arm::SingleTaskE3).expect("single arm present");
    let multi = stats.arm(Arm::Multitask).expect("multitask arm present");
    let single_unknown: Vec<f64> = single.records().map(|r| r.unknown_visits as f64).collect();
    let single_reward: Vec<f64> = single.records().map(|r| r.cum_reward).collect();
    let limit = 2.0 * median(&single_unknown);
    let floor = percentile(&single_reward, 0.01);
    let phase2: Vec<_> = multi.records().filter(|r| r.phase == Phase::Two).collect();
    let over = phase2.iter().filter(|r| r.unknown_visits as f64 > limit).count();
    let below = phase2.iter().filter(|r| r.cum_reward < floor).count();
    let worst_unknown = phase2.iter().map(|r| r.unknown_visits).max().unwrap_or(0);
    let worst_reward = phase2.iter().map(|r| r.cum_reward).fold(f64::INFINITY, f64::min);
    verdict(
        over == 0 && below == 0,
        format!(
            "{} phase-2 tasks: max unknown visits {worst_unknown} vs limit {limit} ({over} over); \
             min reward {worst_reward} vs single-task 1st percentile {floor} ({below} below)",
            phase2.len()
        ),
    )
}

fn phase1_coverage() -> Verdict {
    let t1 = phase1_length(1.0 / 3.0, 3, 0.05).expect("valid inputs");
    let fam = family();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 10_000;
    let covered = (0..draws)
        .filter(|_| {
            let mut seen = [false; 3];
            for _ in 0..t1 {
                seen[sample_task(&fam, &mut rng).0] = true;
            }
            seen.iter().all(|s| *s)
        })
        .count();
    let rate = covered as f64 / draws as f64;
    verdict(
        t1 == 13 && rate >= 0.95,
        format!("phase-1 length {t1} (= 13); all 3 MDPs seen in {rate:.4} of {draws} draws (>= 0.95)"),
    )
}

fn clustering_recovery() -> Verdict {
    let fam = family();
    let cfg = MultiTaskConfig::gridworld();
    let t1 = cfg.phase1_tasks().expect("valid preset");
    let params = cfg.phase1_params();
    let options = ClusterOptions {
        strict: false,
        delta: cfg.delta,
        min_visits: cfg.cluster_min_visits,
    };
    let rounds: Vec<(bool, String)> = (0..100u64)
        .into_par_iter()
        .map(|round| {
            let mut draws = ChaCha8Rng::seed_from_u64(derive_seed(41, &[round]));
            let mut truth = Vec::with_capacity(t1);
            let mut archive = Vec::with_capacity(t1);
            for t in 0..t1 {
                let (idx, env) = sample_task(&fam, &mut draws);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(41, &[round, t as u64 + 1]));
                archive.push(run_e3_task(&env, &params, &mut rng).expect("phase-1 task runs").0);
                truth.push(idx);
            }
            let clustering = match cluster_tasks(&archive, cfg.gap, cfg.max_models, &options) {
                Ok(c) => c,
                Err(e) => return (false, format!("round {round}: {e}")),
            };
            let mut wrong = Vec::new();
            for d in &clustering.distances {
                let same_truth = truth[d.first] == truth[d.second];
                let same_group = clustering.assignment[d.first] == clustering.assignment[d.second];
                let linked = d.distance <= cfg.gap / 2.0;
                if same_truth != same_group || same_truth != linked {
                    wrong.push(format!(
                        "tasks {}/{} (MDPs {}/{}) distance {:.3} at ({}, {})",
                        d.first, d.second, truth[d.first], truth[d.second], d.distance, d.state, d.action
                    ));
                }
            }
            (wrong.is_empty(), format!("round {round}: {}", wrong.join("; ")))
        })
        .collect();
    let correct = rounds.iter().filter(|(ok, _)| *ok).count();
    for (_, msg) in rounds.iter().filter(|(ok, _)| !ok) {
        println!("    clustering failure, {msg}");
    }
    verdict(correct >= 95, format!("{correct} of 100 rounds grouped exactly (>= 95)"))
}

fn loss_gap_inequality() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    let mut audit_worst: f64 = 0.0;
    let mut tightest = f64::INFINITY;
    for _ in 0..1000 {
        let s = rng.random_range(1..=6);
        let radius = rng.random_range(0.0..0.6);
        let inst = random_instance(s, radius, &mut rng);
        let gap = exact_loss_gap(&inst);
        let bound = inst.lower_bound();
        if gap < bound - 1e-12 {
            violations += 1;
        }
        tightest = tightest.min(gap - bound);
        let mass: f64 = outcome_distribution(&inst.truth).iter().map(|(_, w)| w).sum();
        audit_worst = audit_worst.max((mass - 1.0).abs());
    }
    verdict(
        violations == 0 && audit_worst < 1e-12,
        format!(
            "{violations} violations in 1000 instances; smallest slack {tightest:.3e}; \
             worst probability audit error {audit_worst:.1e}"
        ),
    )
}

fn radius_coverage() -> Verdict {
    let delta = 0.05;
    let cells: Vec<(usize, u64)> = (3..=8).flat_map(|d| [50u64, 200, 1000].map(|n| (d, n))).collect();
    let rates: Vec<(usize, u64, f64)> = cells
        .par_iter()
        .map(|&(d, n)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(6, &[d as u64, n]));
            let mut theta: Vec<f64> = (0..d).map(|_| rng.random::<f64>() + 0.05).collect();
            let total: f64 = theta.iter().sum();
            theta.iter_mut().for_each(|p| *p /= total);
            let radius = confidence_radius(n, delta).0;
            let sims = 10_000;
            let mut inside = 0;
            let mut counts = vec![0u64; d];
            for _ in 0..sims {
                counts.iter_mut().for_each(|c| *c = 0);
                for _ in 0..n {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut k = d - 1;
                    for (i, p) in theta.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            k = i;
                            break;
                        }
                    }
                    counts[k] += 1;
                }
                let err: f64 = counts
                    .iter()
                    .zip(&theta)
                    .map(|(c, p)| (*c as f64 / n as f64 - p).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if err < radius {
                    inside += 1;
                }
            }
            (d, n, inside as f64 / sims as f64)
        })
        .collect();
    let worst = rates.iter().copied().fold(rates[0], |w, r| if r.2 < w.2 { r } else { w });
    verdict(
        rates.iter().all(|r| r.2 >= 0.95),
        format!(
            "{} cells; lowest coverage {:.4} at dimension {}, n = {} (>= 0.95 everywhere)",
            rates.len(),
            worst.2,
            worst.0,
            worst.1
        ),
    )
}

fn identification_speed() -> Verdict {
    let fam = family();
    let cfg = MultiTaskConfig::gridworld();
    let phase1 = cfg.phase1_params();
    // Twenty full-length tasks of every member, pooled per member.
    let groups: Vec<CountTable> = (0..fam.len())
        .into_par_iter()
        .map(|g| {
            let env = fam.simulator(g);
            (0..20u64).fold(CountTable::new(25, 4), |acc, k| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(7, &[g as u64, k]));
                let (counts, _) = run_e3_task(&env, &phase1, &mut rng).expect("bank task runs");
                merge_counts(&acc, &counts).expect("same shape")
            })
        })
        .collect();
    let bank = GroupBank::new(groups, cfg.delta).expect("bank builds");
    let params = cfg.finite_model_params(bank.len());
    let results: Vec<(usize, Option<(usize, usize)>)> = (0..100u64)
        .into_par_iter()
        .map(|k| {
            let mut draws = ChaCha8Rng::seed_from_u64(derive_seed(8, &[k]));
            let (truth, env) = sample_task(&fam, &mut draws);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(9, &[k]));
            let out = run_finite_model_task(&env, &bank, &params, &mut rng).expect("task runs");
            (truth, out.log.identification())
        })
        .collect();
    let correct: Vec<f64> = results
        .iter()
        .filter_map(|(truth, id)| id.filter(|(_, g)| g == truth).map(|(step, _)| step as f64))
        .collect();
    let wrong = results
        .iter()
        .filter(|(truth, id)| matches!(id, Some((_, g)) if g != truth))
        .count();
    let rate = correct.len() as f64 / results.len() as f64;
    let med = if correct.is_empty() { f64::INFINITY } else { median(&correct) };
    verdict(
        rate >= 0.95 && med < 500.0,
        format!(
            "identified correctly in {} of 100 tasks (>= 95), {wrong} wrongly; median step {med} (< 500)",
            correct.len()
        ),
    )
}

fn oracle_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst_vi: f64 = 0.0;
    for _ in 0..100 {
        let ns = rng.random_range(2..=12);
        let na = rng.random_range(1..=4);
        let gamma = rng.random_range(0.5..0.97);
        let mdp = random_mdp(&mut rng, ns, na, gamma);
        let (v, _) = value_iteration(&mdp, 1e-6);
        let (reference, _) = reference_plan(&mdp);
        for (a, b) in v.0.iter().zip(&reference.0) {
            worst_vi = worst_vi.max((a - b).abs());
        }
    }
    let mut worst_policy: f64 = 0.0;
    for _ in 0..50 {
        let gamma = rng.random_range(0.5..0.95);
        let mdp = random_mdp(&mut rng, 3, 2, gamma);
        let (_, greedy) = value_iteration(&mdp, 1e-9);
        let greedy_value = exact_policy_value(&mdp, &greedy.0);
        // The search maximises one state's value, so run it from each state.
        for (s, value) in greedy_value.iter().enumerate() {
            let (_, best) = exhaustive_policy_search(&mdp, s).expect("8 policies");
            worst_policy = worst_policy.max((value - best.0[s]).abs());
        }
    }
    verdict(
        worst_vi <= 2e-6 && worst_policy <= 1e-6,
        format!(
            "value iteration vs reference: max error {worst_vi:.2e} (<= 2e-6) on 100 MDPs; \
             greedy vs exhaustive: max error {worst_policy:.2e} (<= 1e-6) on 50 MDPs"
        ),
    )
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).expect("readable output dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                let rel = path.strip_prefix(root).expect("under root").display().to_string();
                files.insert(rel, fs::read(&path).expect("readable csv"));
            }
        }
    }
    files
}

fn determinism() -> Verdict {
    let base = ExperimentConfig {
        rounds: 3,
        tasks: 20,
        horizon: 1500,
        phase1_knownness: 20,
        cluster_min_visits: 20,
        task_logs: true,
        ..ExperimentConfig::default()
    };
    let (a, b) = (tempfile::tempdir().expect("temp dir"), tempfile::tempdir().expect("temp dir"));
    let first = ExperimentConfig {
        output_dir: a.path().to_path_buf(),
        workers: 1,
        ..base.clone()
    };
    let second = ExperimentConfig {
        output_dir: b.path().to_path_buf(),
        workers: 4,
        ..base
    };
    run_experiment(&first).expect("first run");
    run_experiment(&second).expect("second run");
    let (x, y) = (read_tree(a.path()), read_tree(b.path()));
    let differing = x.iter().filter(|(k, v)| y.get(*k) != Some(v)).count();
    verdict(
        !x.is_empty() && x.len() == y.len() && differing == 0,
        format!(
            "{} CSV files per run (1 worker vs 4), {differing} differ",
            x.len()
        ),
    )
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("transfer gain", transfer_gain),
        ("negative-transfer guard", negative_transfer_guard),
        ("phase-1 coverage", phase1_coverage),
        ("clustering recovery", clustering_recovery),
        ("loss-gap inequality", loss_gap_inequality),
        ("confidence radius coverage", radius_coverage),
        ("identification speed", identification_speed),
        ("oracle equivalence", oracle_equivalence),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let v = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|_| verdict(false, "panicked".to_string()));
        if !v.pass {
            failed += 1;
        }
        println!(
            "[{}] {}. {name}: {} ({:.1} s)",
            if v.pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail,
            started.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
