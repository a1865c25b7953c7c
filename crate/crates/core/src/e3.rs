//! Single-task E3-style learner.
//!
//! State-action pairs are split into known and unknown. Two surrogate MDPs
//! are planned on: the explore MDP pays 1 for every unknown pair (which
//! self-loops) and 0 elsewhere; the exploit MDP uses the empirical model on
//! known pairs and makes unknown pairs zero-reward self-loops. The learner
//! explores whenever the explore value of the current state exceeds `eps/2`.
//! Plans are recomputed only when the set of known pairs changes.

use std::fmt;
use std::path::Path;

use rand::Rng;

use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::estimation::{estimate_theta, CountTable, ThetaVector};
use crate::mdp::{value_iteration_from, Mdp, Policy, TransitionRecord, ValueFunction};

/// Which pairs are currently treated as known, and the count threshold in force.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnownnessMap {
    num_actions: usize,
    known: Vec<bool>,
    pub threshold: u64,
}

impl KnownnessMap {
    pub fn new(num_states: usize, num_actions: usize, threshold: u64) -> Self {
        KnownnessMap {
            num_actions,
            known: vec![false; num_states * num_actions],
            threshold,
        }
    }

    /// Known iff `o(s, a) >= threshold`.
    pub fn from_counts(counts: &CountTable, threshold: u64) -> Self {
        let mut map = KnownnessMap::new(counts.num_states(), counts.num_actions(), threshold);
        for s in 0..counts.num_states() {
            for a in 0..counts.num_actions() {
                map.set(s, a, counts.visits(s, a) >= threshold);
            }
        }
        map
    }

    pub fn all(num_states: usize, num_actions: usize, known: bool) -> Self {
        KnownnessMap {
            num_actions,
            known: vec![known; num_states * num_actions],
            threshold: 0,
        }
    }

    #[inline]
    pub fn is_known(&self, s: usize, a: usize) -> bool {
        self.known[s * self.num_actions + a]
    }

    #[inline]
    pub fn set(&mut self, s: usize, a: usize, known: bool) {
        self.known[s * self.num_actions + a] = known;
    }

    pub fn known_count(&self) -> usize {
        self.known.iter().filter(|k| **k).count()
    }

    pub fn all_known(&self) -> bool {
        self.known.iter().all(|k| *k)
    }

    pub fn num_states(&self) -> usize {
        self.known.len() / self.num_actions
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// True if every pair known here is also known in `later`.
    pub fn is_subset_of(&self, later: &KnownnessMap) -> bool {
        self.known.iter().zip(&later.known).all(|(a, b)| !*a || *b)
    }

    fn same_pairs(&self, other: &KnownnessMap) -> bool {
        self.known == other.known
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    Identify,
    Learn,
}

/// Two knownness thresholds: a small one used while the task identity (or
/// coarse model) is being established, then the regular learning threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThresholdSchedule {
    pub identify: u64,
    pub learn: u64,
    pub mode: ScheduleMode,
}

impl ThresholdSchedule {
    /// A single threshold `m` for the whole task.
    pub fn fixed(m: u64) -> Self {
        ThresholdSchedule {
            identify: m,
            learn: m,
            mode: ScheduleMode::Identify,
        }
    }

    pub fn new(identify: u64, learn: u64) -> Result<Self> {
        if identify == 0 || identify > learn {
            return Err(Error::Input(format!(
                "thresholds must satisfy 1 <= identify ({identify}) <= learn ({learn})"
            )));
        }
        Ok(ThresholdSchedule {
            identify,
            learn,
            mode: ScheduleMode::Identify,
        })
    }

    pub fn active(&self) -> u64 {
        match self.mode {
            ScheduleMode::Identify => self.identify,
            ScheduleMode::Learn => self.learn,
        }
    }
}

/// Problem constants that determine the two knownness thresholds.
#[derive(Debug, Clone, Copy)]
pub struct ScheduleInputs {
    /// Model gap between distinct MDPs (l2, per pair).
    pub gap: f64,
    pub epsilon: f64,
    pub discount: f64,
    pub v_max: f64,
    pub delta: f64,
    pub num_states: usize,
    pub num_actions: usize,
    pub tasks: usize,
    /// Bound on the number of reachable next states per pair.
    pub next_states: usize,
}

/// Largest possible l2 distance between two model vectors, used as the
/// upper limit for a gap argument.
pub const MAX_MODEL_GAP: f64 = std::f64::consts::SQRT_2 + 1.0;

/// Thresholds obtained by inverting [`crate::estimation::confidence_radius`]:
/// radius `<= gap/4` at `identify`, radius `<= eps (1-gamma) / (2 V_max sqrt N)`
/// at `learn`, both at confidence `delta / (2 S A T)`.
pub fn make_schedule(inputs: &ScheduleInputs) -> Result<ThresholdSchedule> {
    let ScheduleInputs {
        gap,
        epsilon,
        discount,
        v_max,
        delta,
        num_states,
        num_actions,
        tasks,
        next_states,
    } = *inputs;
    if !(gap > 0.0 && gap <= MAX_MODEL_GAP) {
        return Err(Error::Input(format!("gap {gap} outside (0, {MAX_MODEL_GAP}]")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Input(format!("epsilon {epsilon} must be positive")));
    }
    if !(delta > 0.0 && delta < 1.0) || !(discount > 0.0 && discount < 1.0) || !(v_max > 0.0) {
        return Err(Error::Input("delta and discount must lie in (0,1), v_max > 0".into()));
    }
    let log_term = 2.0 + (2.0 * (num_states * num_actions * tasks) as f64 / delta).ln();
    let identify = ((32.0 / (gap * gap)) * log_term).ceil();
    let accuracy = epsilon * (1.0 - discount);
    let learn = ((8.0 * next_states as f64 * v_max * v_max / (accuracy * accuracy)) * log_term).ceil();
    let identify = saturating_count(identify);
    let learn = saturating_count(learn).max(identify);
    ThresholdSchedule::new(identify, learn)
}

fn saturating_count(x: f64) -> u64 {
    if x >= u64::MAX as f64 {
        u64::MAX
    } else {
        (x as u64).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Explore,
    Exploit,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Explore => "explore",
            Mode::Exploit => "exploit",
        })
    }
}

/// Explore iff `v_explore(s) > explore_threshold` (strict).
pub fn choose_mode(v_explore: &ValueFunction, s: usize, explore_threshold: f64) -> Mode {
    if v_explore.0[s] > explore_threshold {
        Mode::Explore
    } else {
        Mode::Exploit
    }
}

#[derive(Clone, Copy)]
enum Surrogate {
    Explore,
    Exploit,
}

fn build_surrogate(
    num_states: usize,
    num_actions: usize,
    known: &KnownnessMap,
    discount: f64,
    kind: Surrogate,
    theta_at: &dyn Fn(usize, usize) -> ThetaVector,
) -> Mdp {
    let mut transition = vec![0.0; num_states * num_actions * num_states];
    let mut reward = vec![0.0; num_states * num_actions];
    for s in 0..num_states {
        for a in 0..num_actions {
            let pair = s * num_actions + a;
            let row = &mut transition[pair * num_states..(pair + 1) * num_states];
            if known.is_known(s, a) {
                let theta = theta_at(s, a);
                row.copy_from_slice(&theta.values[..num_states]);
                if let Surrogate::Exploit = kind {
                    reward[pair] = theta.values[num_states];
                }
            } else {
                row[s] = 1.0;
                if let Surrogate::Explore = kind {
                    reward[pair] = 1.0;
                }
            }
        }
    }
    Mdp::new(num_states, num_actions, discount, transition, reward)
        .expect("surrogate MDPs are built from normalised estimates")
}

/// Explore MDP: empirical dynamics and reward 0 on known pairs; unknown pairs
/// self-loop with reward 1.
pub fn build_explore_mdp(est: &CountTable, known: &KnownnessMap, discount: f64) -> Mdp {
    build_surrogate(
        est.num_states(),
        est.num_actions(),
        known,
        discount,
        Surrogate::Explore,
        &|s, a| estimate_theta(est, s, a),
    )
}

/// Exploit MDP: empirical dynamics and rewards on known pairs; unknown pairs
/// self-loop with reward 0.
pub fn build_exploit_mdp(est: &CountTable, known: &KnownnessMap, discount: f64) -> Mdp {
    build_surrogate(
        est.num_states(),
        est.num_actions(),
        known,
        discount,
        Surrogate::Exploit,
        &|s, a| estimate_theta(est, s, a),
    )
}

/// One environment step as seen by the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub mode: Mode,
    /// Known pairs after this step's update.
    pub known_pairs: usize,
    /// The chosen pair was unknown when the action was taken.
    pub unknown_visit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskEvent {
    /// Plans recomputed after the transition at `step`.
    Replanned { step: usize, known_pairs: usize },
    /// The threshold schedule moved from identify to learn.
    ScheduleSwitched { step: usize },
    /// `candidate` left the version space; `survivors` remain.
    Eliminated {
        step: usize,
        candidate: usize,
        survivors: usize,
    },
    /// `steps` transitions had been observed when the task was identified.
    Identified { steps: usize, group: usize },
}

/// Everything that happened during one task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskLog {
    pub steps: Vec<StepLog>,
    pub events: Vec<TaskEvent>,
}

impl TaskLog {
    pub fn cumulative_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn unknown_visits(&self) -> usize {
        self.steps.iter().filter(|s| s.unknown_visit).count()
    }

    pub fn explore_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.mode == Mode::Explore).count()
    }

    pub fn replans(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, TaskEvent::Replanned { .. }))
            .count()
    }

    pub fn identification(&self) -> Option<(usize, usize)> {
        self.events.iter().find_map(|e| match e {
            TaskEvent::Identified { steps, group } => Some((*steps, *group)),
            _ => None,
        })
    }

    /// Per-step CSV: `step,state,action,reward,mode,known_pairs_count,eliminated,survivors`.
    /// The last two columns are filled on steps where candidates were eliminated.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "step",
            "state",
            "action",
            "reward",
            "mode",
            "known_pairs_count",
            "eliminated",
            "survivors",
        ])?;
        let mut eliminated: std::collections::BTreeMap<usize, (Vec<String>, usize)> = Default::default();
        for e in &self.events {
            if let TaskEvent::Eliminated {
                step,
                candidate,
                survivors,
            } = e
            {
                let entry = eliminated.entry(*step).or_default();
                entry.0.push(candidate.to_string());
                entry.1 = *survivors;
            }
        }
        for st in &self.steps {
            let (gone, survivors) = match eliminated.get(&st.step) {
                Some((gone, left)) => (gone.join(";"), left.to_string()),
                None => (String::new(), String::new()),
            };
            w.write_record([
                st.step.to_string(),
                st.state.to_string(),
                st.action.to_string(),
                st.reward.to_string(),
                st.mode.to_string(),
                st.known_pairs.to_string(),
                gone,
                survivors,
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// What a learner knows during a task. Implemented by plain E3 and by the
/// finite-model learner; both share [`drive`].
pub(crate) trait Knowledge {
    fn known(&self) -> &KnownnessMap;
    /// Model estimate used for planning at a known pair.
    fn plan_theta(&self, s: usize, a: usize) -> ThetaVector;
    /// Visits to `(s, a)` in the current task, for balanced wandering.
    fn task_visits(&self, s: usize, a: usize) -> u64;
    /// Incorporates one transition. Returns true when the known set changed.
    fn observe(&mut self, rec: &TransitionRecord, step: usize, events: &mut Vec<TaskEvent>) -> bool;
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DriveParams {
    pub horizon: usize,
    pub discount: f64,
    pub epsilon: f64,
    pub tol: f64,
}

struct Plan {
    explore: Mdp,
    explore_values: ValueFunction,
    exploit_values: ValueFunction,
    exploit_policy: Policy,
}

impl Plan {
    fn compute<K: Knowledge>(know: &K, p: &DriveParams, ns: usize, na: usize, warm: Option<&Plan>) -> Plan {
        let theta_at = |s: usize, a: usize| know.plan_theta(s, a);
        let explore = build_surrogate(ns, na, know.known(), p.discount, Surrogate::Explore, &theta_at);
        let exploit = build_surrogate(ns, na, know.known(), p.discount, Surrogate::Exploit, &theta_at);
        let zeros = vec![0.0; ns];
        let (explore_init, exploit_init) = match warm {
            Some(w) => (&w.explore_values.0, &w.exploit_values.0),
            None => (&zeros, &zeros),
        };
        let (explore_values, _) = value_iteration_from(&explore, p.tol, explore_init);
        let (exploit_values, exploit_policy) = value_iteration_from(&exploit, p.tol, exploit_init);
        Plan {
            explore,
            explore_values,
            exploit_values,
            exploit_policy,
        }
    }

    /// Greedy explore action; exact ties (every unknown action at `s` ties)
    /// go to the least-tried action in this task, then the lowest index.
    fn explore_action<K: Knowledge>(&self, know: &K, s: usize) -> usize {
        let q = self.explore.action_values(s, &self.explore_values);
        let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let slack = 1e-12 * best.abs().max(1.0);
        (0..q.len())
            .filter(|&a| q[a] >= best - slack)
            .min_by_key(|&a| (know.task_visits(s, a), a))
            .expect("at least one action")
    }
}

/// Runs one task of `horizon` steps for any learner.
pub(crate) fn drive<E, K, R>(env: &E, know: &mut K, p: &DriveParams, rng: &mut R) -> Result<TaskLog>
where
    E: Environment + ?Sized,
    K: Knowledge,
    R: Rng + ?Sized,
{
    let (ns, na) = (env.num_states(), env.num_actions());
    let explore_threshold = p.epsilon / 2.0;
    let mut log = TaskLog {
        steps: Vec::with_capacity(p.horizon),
        events: Vec::new(),
    };
    let mut plan = Plan::compute(know, p, ns, na, None);
    let mut s = env.start_state();
    for step in 0..p.horizon {
        let mode = choose_mode(&plan.explore_values, s, explore_threshold);
        let a = match mode {
            Mode::Explore => plan.explore_action(know, s),
            Mode::Exploit => plan.exploit_policy.0[s],
        };
        let unknown_visit = !know.known().is_known(s, a);
        let rec = env.step(s, a, rng)?;
        if know.observe(&rec, step, &mut log.events) {
            plan = Plan::compute(know, p, ns, na, Some(&plan));
            log.events.push(TaskEvent::Replanned {
                step,
                known_pairs: know.known().known_count(),
            });
        }
        log.steps.push(StepLog {
            step,
            state: s,
            action: a,
            reward: rec.reward,
            next_state: rec.next_state,
            mode,
            known_pairs: know.known().known_count(),
            unknown_visit,
        });
        s = rec.next_state;
    }
    Ok(log)
}

/// Parameters of a single E3 task.
#[derive(Debug, Clone, Copy)]
pub struct E3Params {
    pub horizon: usize,
    pub schedule: ThresholdSchedule,
    pub discount: f64,
    pub epsilon: f64,
    pub tol: f64,
}

impl E3Params {
    pub(crate) fn drive_params(&self) -> DriveParams {
        DriveParams {
            horizon: self.horizon,
            discount: self.discount,
            epsilon: self.epsilon,
            tol: self.tol,
        }
    }
}

struct E3Knowledge {
    counts: CountTable,
    schedule: ThresholdSchedule,
    known: KnownnessMap,
}

impl Knowledge for E3Knowledge {
    fn known(&self) -> &KnownnessMap {
        &self.known
    }

    fn plan_theta(&self, s: usize, a: usize) -> ThetaVector {
        estimate_theta(&self.counts, s, a)
    }

    fn task_visits(&self, s: usize, a: usize) -> u64 {
        self.counts.visits(s, a)
    }

    fn observe(&mut self, rec: &TransitionRecord, step: usize, events: &mut Vec<TaskEvent>) -> bool {
        self.counts.record(rec);
        let (s, a) = (rec.state, rec.action);
        if self.schedule.mode == ScheduleMode::Identify
            && self.schedule.learn > self.schedule.identify
            && self.counts.min_visits() >= self.schedule.identify
        {
            // Knownness restarts under the larger threshold.
            self.schedule.mode = ScheduleMode::Learn;
            events.push(TaskEvent::ScheduleSwitched { step });
            let next = KnownnessMap::from_counts(&self.counts, self.schedule.active());
            let changed = !next.same_pairs(&self.known);
            self.known = next;
            return changed;
        }
        if !self.known.is_known(s, a) && self.counts.visits(s, a) >= self.schedule.active() {
            self.known.set(s, a, true);
            return true;
        }
        false
    }
}

/// Runs E3 for `params.horizon` steps from empty counts.
pub fn run_e3_task<E, R>(env: &E, params: &E3Params, rng: &mut R) -> Result<(CountTable, TaskLog)>
where
    E: Environment + ?Sized,
    R: Rng + ?Sized,
{
    run_e3_task_from(env, params, CountTable::new(env.num_states(), env.num_actions()), rng)
}

/// Runs E3 starting from pre-existing counts. The returned table includes them.
pub fn run_e3_task_from<E, R>(
    env: &E,
    params: &E3Params,
    initial: CountTable,
    rng: &mut R,
) -> Result<(CountTable, TaskLog)>
where
    E: Environment + ?Sized,
    R: Rng + ?Sized,
{
    if params.horizon == 0 {
        return Err(Error::Input("horizon must be at least 1".into()));
    }
    if initial.num_states() != env.num_states() || initial.num_actions() != env.num_actions() {
        return Err(Error::Shape("initial counts do not match the environment".into()));
    }
    let known = KnownnessMap::from_counts(&initial, params.schedule.active());
    let mut know = E3Knowledge {
        counts: initial,
        schedule: params.schedule,
        known,
    };
    let log = drive(env, &mut know, &params.drive_params(), rng)?;
    Ok((know.counts, log))
}
