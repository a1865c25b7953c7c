//! The two-phase multi-task learner.
//!
//! Phase 1 runs plain E3 on the first tasks and keeps their counts. The
//! archive is then clustered by single linkage, and every later task is
//! solved with the finite-model learner against the resulting groups.
//! Identified tasks feed their counts back into their group.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::e3::{run_e3_task, E3Params, TaskLog, ThresholdSchedule};
use crate::envs::TaskSampler;
use crate::error::{Error, Result};
use crate::estimation::{confidence_radius, estimate_theta, squared_distance, CountTable};
use crate::finite_model::{
    elimination_threshold, known_accuracy, run_finite_model_task, FiniteModelParams, GroupBank,
};

/// Mixes a master seed with a path of stream identifiers (splitmix64).
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(master), |acc, &x| mix(acc ^ mix(x)))
}

const TASK_DRAWS: u64 = 0;
const TASK_DYNAMICS: u64 = 1;

fn draw_rng(seed: u64, round: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TASK_DRAWS, round as u64]))
}

fn task_rng(seed: u64, round: usize, task: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TASK_DYNAMICS, round as u64, task as u64]))
}

/// Number of phase-1 tasks needed so that every model with prior at least
/// `min_prior` appears with probability `1 - delta`: `ceil(ln(C/delta) / p_min)`.
pub fn phase1_length(min_prior: f64, max_models: usize, delta: f64) -> Result<usize> {
    if !(min_prior > 0.0 && min_prior <= 1.0) {
        return Err(Error::Input(format!("minimum prior {min_prior} outside (0,1]")));
    }
    if !(delta > 0.0 && delta < 1.0) || max_models == 0 {
        return Err(Error::Input("delta must lie in (0,1) and the model bound be positive".into()));
    }
    let n = ((max_models as f64 / delta).ln() / min_prior).ceil();
    Ok(n.max(1.0) as usize)
}

/// How the per-task sample requirement of clustering is treated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterOptions {
    /// Fail if any task's radius at any pair exceeds `gap / 4`.
    pub strict: bool,
    /// Confidence level for the radius check.
    pub delta: f64,
    /// Pairs where either task has fewer visits are left out of the
    /// distance (only when not strict).
    pub min_visits: u64,
}

/// Largest per-pair distance between two tasks, and where it occurs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskDistance {
    pub first: usize,
    pub second: usize,
    pub distance: f64,
    pub state: usize,
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Group of each archived task; groups are numbered by first member.
    pub assignment: Vec<usize>,
    /// Pooled counts per group.
    pub groups: Vec<CountTable>,
    /// All task pairs, `first < second`.
    pub distances: Vec<TaskDistance>,
    /// Task-pair entries whose radius exceeds `gap / 4`.
    pub undersampled: usize,
}

impl Clustering {
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }
}

fn task_distance(a: &CountTable, b: &CountTable, min_visits: u64) -> (f64, usize, usize) {
    let mut worst = (0.0, 0, 0);
    for s in 0..a.num_states() {
        for act in 0..a.num_actions() {
            if a.visits(s, act) < min_visits || b.visits(s, act) < min_visits {
                continue;
            }
            let d2 = squared_distance(&estimate_theta(a, s, act).values, &estimate_theta(b, s, act).values);
            if d2 > worst.0 {
                worst = (d2, s, act);
            }
        }
    }
    (worst.0.sqrt(), worst.1, worst.2)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Single-linkage clustering: two tasks are linked when their largest
/// per-pair distance is at most `gap / 2`; groups are the connected
/// components.
pub fn cluster_tasks(
    archive: &[CountTable],
    gap: f64,
    max_groups: usize,
    options: &ClusterOptions,
) -> Result<Clustering> {
    let first = archive
        .first()
        .ok_or_else(|| Error::Input("cannot cluster an empty archive".into()))?;
    let (ns, na) = (first.num_states(), first.num_actions());
    if archive.iter().any(|c| c.num_states() != ns || c.num_actions() != na) {
        return Err(Error::Shape("archived tasks differ in shape".into()));
    }
    if !(gap > 0.0) {
        return Err(Error::Input(format!("gap {gap} must be positive")));
    }
    let limit = gap / 4.0;
    let mut undersampled = 0;
    for (task, c) in archive.iter().enumerate() {
        for s in 0..ns {
            for a in 0..na {
                let radius = confidence_radius(c.visits(s, a), options.delta).0;
                if radius > limit {
                    if options.strict {
                        return Err(Error::ClusteringPrecondition {
                            task,
                            state: s,
                            action: a,
                            radius,
                            limit,
                        });
                    }
                    undersampled += 1;
                }
            }
        }
    }
    let min_visits = if options.strict { 0 } else { options.min_visits.max(1) };
    let mut parent: Vec<usize> = (0..archive.len()).collect();
    let mut distances = Vec::new();
    for i in 0..archive.len() {
        for j in i + 1..archive.len() {
            let (distance, state, action) = task_distance(&archive[i], &archive[j], min_visits);
            distances.push(TaskDistance {
                first: i,
                second: j,
                distance,
                state,
                action,
            });
            if distance <= gap / 2.0 {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut label = vec![usize::MAX; archive.len()];
    let mut assignment = Vec::with_capacity(archive.len());
    let mut groups: Vec<CountTable> = Vec::new();
    for (task, counts) in archive.iter().enumerate() {
        let root = find(&mut parent, task);
        if label[root] == usize::MAX {
            label[root] = groups.len();
            groups.push(CountTable::new(ns, na));
        }
        groups[label[root]].absorb(counts)?;
        assignment.push(label[root]);
    }
    if groups.len() > max_groups {
        return Err(Error::TooManyGroups {
            found: groups.len(),
            bound: max_groups,
        });
    }
    Ok(Clustering {
        assignment,
        groups,
        distances,
        undersampled,
    })
}

/// Settings of a multi-task run. `None` fields fall back to the formulas.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskConfig {
    /// Total tasks per round.
    pub tasks: usize,
    /// Steps per task.
    pub horizon: usize,
    /// Upper bound on the number of distinct models.
    pub max_models: usize,
    /// Smallest prior probability of any model.
    pub min_prior: f64,
    /// Assumed model gap used for clustering.
    pub gap: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub discount: f64,
    /// Bound on reachable next states per pair.
    pub next_states: usize,
    /// Knownness threshold for learning.
    pub knownness: u64,
    /// Knownness threshold while exploring phase-1 tasks.
    pub phase1_knownness: u64,
    pub phase1_tasks: Option<usize>,
    pub xi: Option<f64>,
    pub gate: f64,
    pub eps_known: Option<f64>,
    pub strict_clustering: bool,
    /// Pairs with fewer visits are ignored when clustering (non-strict only).
    pub cluster_min_visits: u64,
    /// Value-iteration tolerance.
    pub tol: f64,
    pub seed: u64,
}

impl MultiTaskConfig {
    /// The gridworld experiment: 150 tasks of 3000 steps, knownness 5.
    pub fn gridworld() -> Self {
        MultiTaskConfig {
            tasks: 150,
            horizon: 3000,
            max_models: 3,
            min_prior: 1.0 / 3.0,
            gap: 0.99,
            epsilon: 0.1,
            delta: 0.05,
            discount: 0.95,
            next_states: 4,
            knownness: 5,
            phase1_knownness: 40,
            phase1_tasks: None,
            xi: Some(12.0),
            gate: 2.0,
            // Half the model gap: candidates this close at a pair are not told apart.
            eps_known: Some(0.495),
            strict_clustering: false,
            cluster_min_visits: 40,
            tol: 1e-4,
            seed: 2024,
        }
    }

    pub fn v_max(&self) -> f64 {
        1.0 / (1.0 - self.discount)
    }

    pub fn phase1_tasks(&self) -> Result<usize> {
        let t1 = match self.phase1_tasks {
            Some(t1) => t1,
            None => phase1_length(self.min_prior, self.max_models, self.delta)?,
        };
        Ok(t1.min(self.tasks))
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.horizon == 0 {
            return Err(Error::Input("tasks and horizon must be positive".into()));
        }
        if self.knownness == 0 || self.phase1_knownness == 0 {
            return Err(Error::Input("knownness thresholds must be positive".into()));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) || !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Input("discount and delta must lie in (0,1)".into()));
        }
        if !(self.epsilon > 0.0) || !(self.tol > 0.0) || !(self.gap > 0.0) {
            return Err(Error::Input("epsilon, tol and gap must be positive".into()));
        }
        self.phase1_tasks().map(|_| ())
    }

    /// E3 settings of a phase-1 task.
    pub fn phase1_params(&self) -> E3Params {
        let schedule = ThresholdSchedule {
            identify: self.phase1_knownness,
            learn: self.phase1_knownness.max(self.knownness),
            mode: crate::e3::ScheduleMode::Identify,
        };
        E3Params {
            horizon: self.horizon,
            schedule,
            discount: self.discount,
            epsilon: self.epsilon,
            tol: self.tol,
        }
    }

    /// E3 settings of a task in the single-task arm.
    pub fn single_task_params(&self) -> E3Params {
        E3Params {
            horizon: self.horizon,
            schedule: ThresholdSchedule::fixed(self.knownness),
            discount: self.discount,
            epsilon: self.epsilon,
            tol: self.tol,
        }
    }

    /// Phase-2 settings against `candidates` groups.
    pub fn finite_model_params(&self, candidates: usize) -> FiniteModelParams {
        FiniteModelParams {
            horizon: self.horizon,
            xi: self
                .xi
                .unwrap_or_else(|| elimination_threshold(candidates, self.tasks, self.horizon, self.delta)),
            eps_known: self
                .eps_known
                .unwrap_or_else(|| known_accuracy(self.epsilon, self.discount, self.v_max(), self.next_states)),
            gate: self.gate,
            schedule: ThresholdSchedule::fixed(self.knownness),
            discount: self.discount,
            epsilon: self.epsilon,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
    /// Single-task baseline; no transfer.
    Single,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::One => "1",
            Phase::Two => "2",
            Phase::Single => "single",
        })
    }
}

/// Per-task summary row.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub round: usize,
    pub task: usize,
    pub phase: Phase,
    pub true_mdp: usize,
    pub identified_group: Option<usize>,
    pub cum_reward: f64,
    pub unknown_visits: usize,
    pub identification_step: Option<usize>,
    /// Transitions observed in this task (equals the horizon).
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub tasks: Vec<TaskRecord>,
    /// Phase-1 grouping; `None` for the single-task arm.
    pub clustering: Option<Clustering>,
}

impl RoundLog {
    pub fn total_reward(&self) -> f64 {
        self.tasks.iter().map(|t| t.cum_reward).sum()
    }

    /// Columns: `round,task,phase,true_mdp,identified_group,cum_reward,unknown_visits,identification_step`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "round",
            "task",
            "phase",
            "true_mdp",
            "identified_group",
            "cum_reward",
            "unknown_visits",
            "identification_step",
        ])?;
        let opt = |x: Option<usize>| x.map(|v| v.to_string()).unwrap_or_default();
        for t in &self.tasks {
            w.write_record([
                t.round.to_string(),
                t.task.to_string(),
                t.phase.to_string(),
                t.true_mdp.to_string(),
                opt(t.identified_group),
                t.cum_reward.to_string(),
                t.unknown_visits.to_string(),
                opt(t.identification_step),
            ])?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<round csv>".into(),
            source: e,
        })
    }
}

fn record(round: usize, task: usize, phase: Phase, true_mdp: usize, log: &TaskLog) -> TaskRecord {
    let ident = log.identification();
    TaskRecord {
        round,
        task,
        phase,
        true_mdp,
        identified_group: ident.map(|(_, g)| g),
        cum_reward: log.cumulative_reward(),
        unknown_visits: log.unknown_visits(),
        identification_step: ident.map(|(s, _)| s),
        steps: log.steps.len(),
    }
}

/// Called after every task with its summary and full log.
pub type TaskHook<'a> = dyn FnMut(&TaskRecord, &TaskLog) -> Result<()> + 'a;

/// One round of the two-phase learner.
pub fn run_multitask<S: TaskSampler>(sampler: &S, config: &MultiTaskConfig, round: usize) -> Result<RoundLog> {
    run_multitask_with(sampler, config, round, &mut |_, _| Ok(()))
}

pub fn run_multitask_with<S: TaskSampler>(
    sampler: &S,
    config: &MultiTaskConfig,
    round: usize,
    hook: &mut TaskHook<'_>,
) -> Result<RoundLog> {
    config.validate()?;
    let t1 = config.phase1_tasks()?;
    let mut draws = draw_rng(config.seed, round);
    let mut tasks = Vec::with_capacity(config.tasks);
    let mut archive = Vec::with_capacity(t1);
    let phase1 = config.phase1_params();
    for t in 0..t1 {
        let (true_mdp, env) = sampler.sample(&mut draws);
        let (counts, log) = run_e3_task(&env, &phase1, &mut task_rng(config.seed, round, t))?;
        let rec = record(round, t, Phase::One, true_mdp, &log);
        hook(&rec, &log)?;
        tasks.push(rec);
        archive.push(counts);
    }
    let options = ClusterOptions {
        strict: config.strict_clustering,
        delta: config.delta,
        min_visits: config.cluster_min_visits,
    };
    let clustering = cluster_tasks(&archive, config.gap, config.max_models, &options)?;
    let mut bank = GroupBank::new(clustering.groups.clone(), config.delta)?;
    let params = config.finite_model_params(bank.len());
    for t in t1..config.tasks {
        let (true_mdp, env) = sampler.sample(&mut draws);
        let out = run_finite_model_task(&env, &bank, &params, &mut task_rng(config.seed, round, t))?;
        if let Some(g) = out.identified {
            bank.absorb_counts(g, &out.counts)?;
        }
        let rec = record(round, t, Phase::Two, true_mdp, &out.log);
        hook(&rec, &out.log)?;
        tasks.push(rec);
    }
    Ok(RoundLog {
        round,
        tasks,
        clustering: Some(clustering),
    })
}

/// One round of the single-task baseline: every task is learned from scratch
/// with E3 on the same task draws and random streams as [`run_multitask`].
pub fn run_single_task<S: TaskSampler>(sampler: &S, config: &MultiTaskConfig, round: usize) -> Result<RoundLog> {
    run_single_task_with(sampler, config, round, &mut |_, _| Ok(()))
}

pub fn run_single_task_with<S: TaskSampler>(
    sampler: &S,
    config: &MultiTaskConfig,
    round: usize,
    hook: &mut TaskHook<'_>,
) -> Result<RoundLog> {
    config.validate()?;
    let mut draws = draw_rng(config.seed, round);
    let params = config.single_task_params();
    let mut tasks = Vec::with_capacity(config.tasks);
    for t in 0..config.tasks {
        let (true_mdp, env) = sampler.sample(&mut draws);
        let (_, log) = run_e3_task(&env, &params, &mut task_rng(config.seed, round, t))?;
        let rec = record(round, t, Phase::Single, true_mdp, &log);
        hook(&rec, &log)?;
        tasks.push(rec);
    }
    Ok(RoundLog {
        round,
        tasks,
        clustering: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase1_length_values() {
        assert_eq!(phase1_length(1.0 / 3.0, 3, 0.05).unwrap(), 13);
        assert_eq!(phase1_length(1.0, 1, 0.5).unwrap(), 1);
        assert!(phase1_length(0.0, 3, 0.05).is_err());
        assert!(phase1_length(0.5, 3, 1.0).is_err());
    }

    #[test]
    fn seeds_differ_by_path() {
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_ne!(derive_seed(1, &[0]), derive_seed(2, &[0]));
        assert_eq!(derive_seed(5, &[3, 4]), derive_seed(5, &[3, 4]));
    }

    fn table(next: usize, n: u64, reward: f64) -> CountTable {
        let mut c = CountTable::new(2, 1);
        c.add(0, 0, next, n, reward * n as f64);
        c.add(1, 0, next, n, reward * n as f64);
        c
    }

    #[test]
    fn single_linkage_groups() {
        let opts = ClusterOptions {
            strict: false,
            delta: 0.05,
            min_visits: 1,
        };
        let archive = [table(0, 10, 0.1), table(1, 10, 0.1), table(0, 10, 0.2)];
        let c = cluster_tasks(&archive, 0.9, 3, &opts).unwrap();
        assert_eq!(c.assignment, vec![0, 1, 0]);
        assert_eq!(c.groups[0].visits(0, 0), 20);
        assert_eq!(c.distances.len(), 3);
        let err = cluster_tasks(&archive, 0.9, 1, &opts).unwrap_err();
        assert!(matches!(err, Error::TooManyGroups { found: 2, bound: 1 }));
    }

    #[test]
    fn strict_clustering_checks_radius() {
        let opts = ClusterOptions {
            strict: true,
            delta: 0.05,
            min_visits: 1,
        };
        let archive = [table(0, 10, 0.1)];
        assert!(matches!(
            cluster_tasks(&archive, 0.9, 3, &opts),
            Err(Error::ClusteringPrecondition { task: 0, .. })
        ));
    }
}
