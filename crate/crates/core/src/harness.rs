//! Experiment orchestration: configuration, seeded multi-round runs of
//! either arm, CSV output and the rank-sum comparisons.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Deserialize;

use crate::envs::{gridworld_suite, MdpFamily};
use crate::error::{Error, Result};
use crate::multitask::{run_multitask_with, run_single_task_with, MultiTaskConfig, RoundLog, TaskRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Two-phase learner with clustering and transfer.
    Multitask,
    /// Every task learned from scratch with E3.
    SingleTaskE3,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Multitask => "multitask",
            Arm::SingleTaskE3 => "single_task_e3",
        }
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multitask" => Ok(Arm::Multitask),
            "single_task_e3" => Ok(Arm::SingleTaskE3),
            other => Err(Error::Config(format!("unknown arm `{other}`"))),
        }
    }
}

/// Which arms to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmSelection {
    Multitask,
    SingleTaskE3,
    Both,
}

impl ArmSelection {
    pub fn arms(self) -> Vec<Arm> {
        match self {
            ArmSelection::Multitask => vec![Arm::Multitask],
            ArmSelection::SingleTaskE3 => vec![Arm::SingleTaskE3],
            ArmSelection::Both => vec![Arm::Multitask, Arm::SingleTaskE3],
        }
    }
}

impl FromStr for ArmSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(ArmSelection::Both),
            other => other.parse::<Arm>().map(|arm| match arm {
                Arm::Multitask => ArmSelection::Multitask,
                Arm::SingleTaskE3 => ArmSelection::SingleTaskE3,
            }),
        }
    }
}

/// Everything needed to reproduce an experiment. Read from a flat
/// `key = value` file; omitted keys keep their defaults (the gridworld
/// setup).
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rounds: usize,
    pub arm: ArmSelection,
    pub output_dir: PathBuf,
    /// Parallel rounds; 0 uses every available core.
    pub workers: usize,
    /// Also write one step-level CSV per task.
    pub task_logs: bool,
    /// Print per-round progress to stderr.
    pub verbose: bool,
    /// Family file to use instead of the built-in gridworld.
    pub family: Option<PathBuf>,
    pub tasks: usize,
    pub phase1_tasks: Option<usize>,
    pub horizon: usize,
    pub max_models: usize,
    pub min_prior: f64,
    pub gap: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub discount: f64,
    pub next_states: usize,
    pub knownness: u64,
    pub phase1_knownness: u64,
    pub xi: Option<f64>,
    pub gate: f64,
    pub eps_known: Option<f64>,
    pub strict_clustering: bool,
    pub cluster_min_visits: u64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mt = MultiTaskConfig::gridworld();
        ExperimentConfig {
            rounds: 20,
            arm: ArmSelection::Both,
            output_dir: PathBuf::from("results"),
            workers: 0,
            task_logs: false,
            verbose: false,
            family: None,
            tasks: mt.tasks,
            phase1_tasks: mt.phase1_tasks,
            horizon: mt.horizon,
            max_models: mt.max_models,
            min_prior: mt.min_prior,
            gap: mt.gap,
            epsilon: mt.epsilon,
            delta: mt.delta,
            discount: mt.discount,
            next_states: mt.next_states,
            knownness: mt.knownness,
            phase1_knownness: mt.phase1_knownness,
            xi: mt.xi,
            gate: mt.gate,
            eps_known: mt.eps_known,
            strict_clustering: mt.strict_clustering,
            cluster_min_visits: mt.cluster_min_visits,
            tol: mt.tol,
            seed: mt.seed,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    pub fn multitask(&self) -> MultiTaskConfig {
        MultiTaskConfig {
            tasks: self.tasks,
            horizon: self.horizon,
            max_models: self.max_models,
            min_prior: self.min_prior,
            gap: self.gap,
            epsilon: self.epsilon,
            delta: self.delta,
            discount: self.discount,
            next_states: self.next_states,
            knownness: self.knownness,
            phase1_knownness: self.phase1_knownness,
            phase1_tasks: self.phase1_tasks,
            xi: self.xi,
            gate: self.gate,
            eps_known: self.eps_known,
            strict_clustering: self.strict_clustering,
            cluster_min_visits: self.cluster_min_visits,
            tol: self.tol,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        self.multitask().validate()
    }

    /// The environment family named by the config.
    pub fn load_family(&self) -> Result<MdpFamily> {
        match &self.family {
            Some(path) => fs::read_to_string(path)
                .map_err(|e| Error::io(path, e))?
                .parse(),
            None => gridworld_suite(self.discount),
        }
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Result of a two-sided Mann-Whitney U test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    pub p: f64,
}

/// Sizes below which the exact null distribution is enumerated.
pub const EXACT_BELOW: usize = 8;

/// Two-sided Mann-Whitney U test with midranks for ties. Uses the exact
/// permutation distribution when either sample has fewer than
/// [`EXACT_BELOW`] values, otherwise the normal approximation with tie and
/// continuity corrections.
pub fn mann_whitney_u(xs: &[f64], ys: &[f64]) -> Result<MannWhitney> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::Input("both samples must be nonempty".into()));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::Input("samples contain NaN".into()));
    }
    let (n1, n2) = (xs.len(), ys.len());
    let n = n1 + n2;
    let mut pooled: Vec<(f64, bool)> = xs.iter().map(|&v| (v, true)).chain(ys.iter().map(|&v| (v, false))).collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Doubled midranks keep everything integral.
    let mut ranks2 = vec![0u64; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        for r in &mut ranks2[i..=j] {
            *r = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    let r1_2: u64 = pooled.iter().zip(&ranks2).filter(|(p, _)| p.1).map(|(_, r)| *r).sum();
    let u = r1_2 as f64 / 2.0 - (n1 * (n1 + 1)) as f64 / 2.0;
    let mean = (n1 * n2) as f64 / 2.0;
    let p = if n1.min(n2) < EXACT_BELOW {
        exact_p(&ranks2, n1, r1_2)
    } else {
        let var = (n1 * n2) as f64 / 12.0 * ((n + 1) as f64 - tie_term / (n * (n - 1)) as f64);
        if var <= 0.0 {
            1.0
        } else {
            let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
            statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)
        }
    };
    Ok(MannWhitney { u, p: p.clamp(0.0, 1.0) })
}

/// Exact two-sided p-value: the share of size-`k` subsets of the pooled
/// (doubled) ranks whose rank sum is at least as far from its mean as the
/// observed one.
fn exact_p(ranks2: &[u64], k: usize, observed: u64) -> f64 {
    let total: u64 = ranks2.iter().sum();
    let max_sum = total as usize;
    // ways[c][s]: subsets of size c with doubled rank sum s.
    let mut ways = vec![vec![0f64; max_sum + 1]; k + 1];
    ways[0][0] = 1.0;
    for &r in ranks2 {
        let r = r as usize;
        for c in (1..=k).rev() {
            let (lower, upper) = ways.split_at_mut(c);
            let (prev, cur) = (&lower[c - 1], &mut upper[0]);
            for s in (r..=max_sum).rev() {
                cur[s] += prev[s - r];
            }
        }
    }
    // Mean of the subset sum is k * total / n, scaled by n to stay integral.
    let n = ranks2.len() as i128;
    let centre = |s: usize| (s as i128 * n - k as i128 * total as i128).abs();
    let obs = centre(observed as usize);
    let all: f64 = ways[k].iter().sum();
    let extreme: f64 = ways[k]
        .iter()
        .enumerate()
        .filter(|(s, _)| centre(*s) >= obs)
        .map(|(_, w)| w)
        .sum();
    extreme / all
}

/// Per-arm results.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub arm: Arm,
    /// Mean cumulative reward of each task index across rounds.
    pub per_task_mean: Vec<f64>,
    /// Standard error of that mean (0 with a single round).
    pub per_task_se: Vec<f64>,
    pub rounds: Vec<RoundLog>,
}

impl ArmSummary {
    pub fn round_totals(&self) -> Vec<f64> {
        self.rounds.iter().map(RoundLog::total_reward).collect()
    }

    /// Cumulative reward of task `t` in every round.
    pub fn task_rewards(&self, t: usize) -> Vec<f64> {
        self.rounds.iter().map(|r| r.tasks[t].cum_reward).collect()
    }

    pub fn records(&self) -> impl Iterator<Item = &TaskRecord> {
        self.rounds.iter().flat_map(|r| &r.tasks)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub name: String,
    pub n1: usize,
    pub n2: usize,
    pub result: MannWhitney,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryStats {
    pub arms: Vec<ArmSummary>,
    pub tests: Vec<TestResult>,
    pub seconds: f64,
}

impl SummaryStats {
    pub fn arm(&self, arm: Arm) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    pub fn test(&self, name: &str) -> Option<&TestResult> {
        self.tests.iter().find(|t| t.name == name)
    }
}

/// Name of the first-task versus last-task comparison for an arm.
pub fn first_last_test(arm: Arm) -> String {
    format!("{}: last task vs first task", arm.name())
}

/// Name of the round-total comparison between the arms.
pub const ARMS_TEST: &str = "round totals: multitask vs single_task_e3";

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn run_round(family: &MdpFamily, config: &ExperimentConfig, arm: Arm, round: usize) -> Result<RoundLog> {
    let mt = config.multitask();
    let task_dir = config.output_dir.join("tasks");
    let mut hook = |rec: &TaskRecord, log: &crate::e3::TaskLog| -> Result<()> {
        if config.task_logs {
            let path = task_dir.join(format!("{}_round_{:03}_task_{:03}.csv", arm.name(), rec.round, rec.task));
            log.write_csv(&path)?;
        }
        Ok(())
    };
    let log = match arm {
        Arm::Multitask => run_multitask_with(family, &mt, round, &mut hook),
        Arm::SingleTaskE3 => run_single_task_with(family, &mt, round, &mut hook),
    }
    .map_err(|e| Error::Round {
        round,
        source: Box::new(e),
    })?;
    let path = config
        .output_dir
        .join("rounds")
        .join(format!("{}_round_{:03}.csv", arm.name(), round));
    let mut buf = Vec::new();
    log.write_csv(&mut buf)?;
    write_file(&path, &buf)?;
    if config.verbose {
        eprintln!("{} round {round}: total reward {:.1}", arm.name(), log.total_reward());
    }
    Ok(log)
}

/// Runs every selected arm for `config.rounds` rounds and writes
/// `rounds/<arm>_round_<r>.csv`, `summary.csv` and `summary.txt` under the
/// output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<SummaryStats> {
    config.validate()?;
    let family = config.load_family()?;
    let started = Instant::now();
    create_dir(&config.output_dir.join("rounds"))?;
    if config.task_logs {
        create_dir(&config.output_dir.join("tasks"))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let arms = config.arm.arms();
    let jobs: Vec<(Arm, usize)> = arms
        .iter()
        .flat_map(|&arm| (0..config.rounds).map(move |r| (arm, r)))
        .collect();
    let logs: Vec<Result<RoundLog>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(arm, round)| run_round(&family, config, arm, round))
            .collect()
    });
    let mut logs = logs.into_iter();
    let mut summaries = Vec::new();
    for &arm in &arms {
        let rounds = logs.by_ref().take(config.rounds).collect::<Result<Vec<_>>>()?;
        let (mut per_task_mean, mut per_task_se) = (Vec::new(), Vec::new());
        for t in 0..config.tasks {
            let rewards: Vec<f64> = rounds.iter().map(|r| r.tasks[t].cum_reward).collect();
            let (m, se) = mean_se(&rewards);
            per_task_mean.push(m);
            per_task_se.push(se);
        }
        summaries.push(ArmSummary {
            arm,
            per_task_mean,
            per_task_se,
            rounds,
        });
    }
    let mut tests = Vec::new();
    if config.tasks > 1 {
        for s in &summaries {
            let result = mann_whitney_u(&s.task_rewards(config.tasks - 1), &s.task_rewards(0))?;
            tests.push(TestResult {
                name: first_last_test(s.arm),
                n1: config.rounds,
                n2: config.rounds,
                result,
            });
        }
    }
    if let [a, b] = &summaries[..] {
        let result = mann_whitney_u(&a.round_totals(), &b.round_totals())?;
        tests.push(TestResult {
            name: ARMS_TEST.to_string(),
            n1: config.rounds,
            n2: config.rounds,
            result,
        });
    }
    let stats = SummaryStats {
        arms: summaries,
        tests,
        seconds: started.elapsed().as_secs_f64(),
    };
    write_summary_csv(&config.output_dir.join("summary.csv"), &stats)?;
    write_file(&config.output_dir.join("summary.txt"), summary_text(config, &stats).as_bytes())?;
    Ok(stats)
}

fn write_summary_csv(path: &Path, stats: &SummaryStats) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["task".to_string()];
    for a in &stats.arms {
        header.push(format!("{}_mean", a.arm.name()));
        header.push(format!("{}_se", a.arm.name()));
    }
    w.write_record(&header)?;
    let tasks = stats.arms.first().map_or(0, |a| a.per_task_mean.len());
    for t in 0..tasks {
        let mut row = vec![t.to_string()];
        for a in &stats.arms {
            row.push(a.per_task_mean[t].to_string());
            row.push(a.per_task_se[t].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Human-readable summary: arm totals, test results and runtime.
pub fn summary_text(config: &ExperimentConfig, stats: &SummaryStats) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "rounds {}  tasks {}  horizon {}  seed {}",
        config.rounds, config.tasks, config.horizon, config.seed
    );
    for a in &stats.arms {
        let (m, se) = mean_se(&a.round_totals());
        let _ = writeln!(out, "{:<16} round total {:.1} +- {:.1}", a.arm.name(), m, se);
    }
    for t in &stats.tests {
        let _ = writeln!(
            out,
            "{}: U = {} (n = {}, {}), p = {:.3e}",
            t.name, t.result.u, t.n1, t.n2, t.result.p
        );
    }
    let _ = writeln!(out, "runtime {:.1} s", stats.seconds);
    out
}
