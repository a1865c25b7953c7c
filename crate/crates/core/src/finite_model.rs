//! Learning in an MDP known to be one of finitely many candidate models.
//!
//! Candidates are the group estimates produced by clustering. Each
//! transition feeds a pairwise elimination test comparing the square loss
//! of two candidates on the observed outcome; once a pair has accumulated
//! enough separation the worse candidate is dropped. Pairs where all
//! surviving candidates agree closely are treated as known without any
//! visits in the current task.

use rand::Rng;

use crate::e3::{drive, DriveParams, KnownnessMap, Knowledge, ScheduleMode, TaskEvent, TaskLog, ThresholdSchedule};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::estimation::{
    confidence_radius, encode_transition, estimate_theta, merge_counts, squared_distance, ConfidenceRadius,
    CountTable, EncodedOutcome, ThetaVector,
};
use crate::mdp::TransitionRecord;

/// Default multiple of the largest confidence radius that two candidates'
/// estimates must be apart before a pair is tested.
pub const ELIMINATION_GATE: f64 = 8.0;

/// `8 (2 + ln(2 C^2 T H / delta))`.
pub fn elimination_threshold(candidates: usize, tasks: usize, horizon: usize, delta: f64) -> f64 {
    let c = candidates as f64;
    8.0 * (2.0 + (2.0 * c * c * tasks as f64 * horizon as f64 / delta).ln())
}

/// Agreement accuracy `eps (1 - gamma) / (V_max sqrt N)`.
pub fn known_accuracy(epsilon: f64, discount: f64, v_max: f64, next_states: usize) -> f64 {
    epsilon * (1.0 - discount) / (v_max * (next_states as f64).sqrt())
}

/// Surviving candidates and the pairwise elimination statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct VersionSpace {
    alive: Vec<bool>,
    /// Upper-triangular `(i, j)` entries at `i * n + j`.
    separation: Vec<f64>,
    loss_diff: Vec<f64>,
    xi: f64,
    gate: f64,
}

impl VersionSpace {
    pub fn new(candidates: usize, xi: f64) -> Self {
        VersionSpace {
            alive: vec![true; candidates],
            separation: vec![0.0; candidates * candidates],
            loss_diff: vec![0.0; candidates * candidates],
            xi,
            gate: ELIMINATION_GATE,
        }
    }

    pub fn with_gate(mut self, gate: f64) -> Self {
        self.gate = gate;
        self
    }

    pub fn num_candidates(&self) -> usize {
        self.alive.len()
    }

    pub fn len(&self) -> usize {
        self.alive.iter().filter(|a| **a).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_alive(&self, i: usize) -> bool {
        self.alive[i]
    }

    pub fn survivors(&self) -> impl Iterator<Item = usize> + '_ {
        self.alive.iter().enumerate().filter(|(_, a)| **a).map(|(i, _)| i)
    }

    /// The single survivor, if identification is complete.
    pub fn identified(&self) -> Option<usize> {
        let mut it = self.survivors();
        match (it.next(), it.next()) {
            (Some(i), None) => Some(i),
            _ => None,
        }
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    /// `(c_ij, Delta_ij)` for `i < j`.
    pub fn statistics(&self, i: usize, j: usize) -> (f64, f64) {
        let k = i * self.alive.len() + j;
        (self.separation[k], self.loss_diff[k])
    }
}

/// One elimination test step on outcome `z`, with the candidates' model
/// estimates and radii at the visited pair. Pairs are processed in
/// lexicographic order; each test removes exactly one of two live
/// candidates, so at least one candidate always survives. Returns the
/// eliminated candidates in order.
pub fn update_elimination(
    vs: &mut VersionSpace,
    thetas: &[ThetaVector],
    radii: &[ConfidenceRadius],
    z: &EncodedOutcome,
) -> Result<Vec<usize>> {
    let n = vs.alive.len();
    if thetas.len() != n || radii.len() != n {
        return Err(Error::Shape(format!(
            "{} estimates and {} radii for {n} candidates",
            thetas.len(),
            radii.len()
        )));
    }
    if let Some(t) = thetas.iter().find(|t| t.values.len() != z.0.len()) {
        return Err(Error::Shape(format!(
            "estimate of length {} against outcome of length {}",
            t.values.len(),
            z.0.len()
        )));
    }
    let widest = vs.survivors().map(|i| radii[i].0).fold(0.0, f64::max);
    let min_distance = vs.gate * widest;
    let mut eliminated = Vec::new();
    if !min_distance.is_finite() {
        return Ok(eliminated);
    }
    for i in 0..n {
        for j in i + 1..n {
            if !(vs.alive[i] && vs.alive[j]) {
                continue;
            }
            let (ti, tj) = (&thetas[i].values, &thetas[j].values);
            let d2 = squared_distance(ti, tj);
            if d2.sqrt() < min_distance {
                continue;
            }
            let k = i * n + j;
            vs.separation[k] += d2 / 4.0;
            vs.loss_diff[k] += squared_distance(ti, &z.0) - squared_distance(tj, &z.0);
            if vs.separation[k] >= vs.xi {
                let loser = if vs.loss_diff[k] > 0.0 { i } else { j };
                vs.alive[loser] = false;
                eliminated.push(loser);
            }
        }
    }
    Ok(eliminated)
}

/// Per-group pooled counts with cached estimates and radii.
#[derive(Debug, Clone)]
pub struct GroupBank {
    counts: Vec<CountTable>,
    thetas: Vec<Vec<ThetaVector>>,
    radii: Vec<Vec<ConfidenceRadius>>,
    delta: f64,
}

impl GroupBank {
    /// `delta` is the confidence level used for every radius.
    pub fn new(groups: Vec<CountTable>, delta: f64) -> Result<Self> {
        let first = groups
            .first()
            .ok_or_else(|| Error::Input("at least one group is required".into()))?;
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Input(format!("delta {delta} outside (0,1)")));
        }
        let (ns, na) = (first.num_states(), first.num_actions());
        if groups.iter().any(|g| g.num_states() != ns || g.num_actions() != na) {
            return Err(Error::Shape("group count tables differ in shape".into()));
        }
        let mut bank = GroupBank {
            thetas: vec![Vec::new(); groups.len()],
            radii: vec![Vec::new(); groups.len()],
            counts: groups,
            delta,
        };
        for g in 0..bank.counts.len() {
            bank.refresh(g);
        }
        Ok(bank)
    }

    fn refresh(&mut self, g: usize) {
        let c = &self.counts[g];
        let (ns, na) = (c.num_states(), c.num_actions());
        self.thetas[g] = (0..ns * na).map(|p| estimate_theta(c, p / na, p % na)).collect();
        self.radii[g] = (0..ns * na)
            .map(|p| confidence_radius(c.visits(p / na, p % na), self.delta))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn num_states(&self) -> usize {
        self.counts[0].num_states()
    }

    pub fn num_actions(&self) -> usize {
        self.counts[0].num_actions()
    }

    pub fn counts(&self, g: usize) -> &CountTable {
        &self.counts[g]
    }

    pub fn theta(&self, g: usize, s: usize, a: usize) -> &ThetaVector {
        &self.thetas[g][s * self.num_actions() + a]
    }

    pub fn radius(&self, g: usize, s: usize, a: usize) -> ConfidenceRadius {
        self.radii[g][s * self.num_actions() + a]
    }

    /// Adds a finished task's counts to group `g`.
    pub fn absorb_counts(&mut self, g: usize, task_counts: &CountTable) -> Result<()> {
        if g >= self.counts.len() {
            return Err(Error::Input(format!("group {g} does not exist")));
        }
        self.counts[g].absorb(task_counts)?;
        self.refresh(g);
        Ok(())
    }
}

fn agrees(bank: &GroupBank, survivors: &[usize], s: usize, a: usize, eps_known: f64) -> bool {
    if survivors
        .iter()
        .any(|&g| bank.radius(g, s, a).0 > eps_known / 2.0)
    {
        return false;
    }
    let limit = eps_known * eps_known;
    survivors.iter().enumerate().all(|(k, &i)| {
        survivors[k + 1..]
            .iter()
            .all(|&j| squared_distance(&bank.theta(i, s, a).values, &bank.theta(j, s, a).values) <= limit)
    })
}

/// A pair is known when every surviving candidate is estimated to within
/// `eps_known / 2` there and all of them lie within `eps_known` of one
/// another, or when `counts` has at least `m` visits to it.
pub fn check_known(
    eps_known: f64,
    bank: &GroupBank,
    vs: &VersionSpace,
    counts: &CountTable,
    m: u64,
) -> KnownnessMap {
    let survivors: Vec<usize> = vs.survivors().collect();
    let mut map = KnownnessMap::new(counts.num_states(), counts.num_actions(), m);
    for s in 0..counts.num_states() {
        for a in 0..counts.num_actions() {
            map.set(
                s,
                a,
                counts.visits(s, a) >= m || agrees(bank, &survivors, s, a, eps_known),
            );
        }
    }
    map
}

#[derive(Debug, Clone, Copy)]
pub struct FiniteModelParams {
    pub horizon: usize,
    /// Elimination threshold on the accumulated separation.
    pub xi: f64,
    /// Agreement accuracy for model-based knownness.
    pub eps_known: f64,
    /// Minimum estimate distance, as a multiple of the largest radius,
    /// for a candidate pair to be tested.
    pub gate: f64,
    /// Count thresholds; `identify` applies until the task is identified.
    pub schedule: ThresholdSchedule,
    pub discount: f64,
    pub epsilon: f64,
    pub tol: f64,
}

/// Result of one task.
#[derive(Debug, Clone)]
pub struct FiniteModelOutcome {
    /// Candidate left when only one survived.
    pub identified: Option<usize>,
    /// Samples gathered in this task only.
    pub counts: CountTable,
    pub log: TaskLog,
}

struct FiniteModelKnowledge<'a> {
    bank: &'a GroupBank,
    vs: VersionSpace,
    task: CountTable,
    /// Task counts plus the identified group's counts.
    pooled: Option<CountTable>,
    schedule: ThresholdSchedule,
    eps_known: f64,
    known: KnownnessMap,
    thetas: Vec<ThetaVector>,
    radii: Vec<ConfidenceRadius>,
}

impl FiniteModelKnowledge<'_> {
    fn knowledge_counts(&self) -> &CountTable {
        self.pooled.as_ref().unwrap_or(&self.task)
    }

    fn identify(&mut self, group: usize, steps: usize, events: &mut Vec<TaskEvent>) -> Result<()> {
        self.pooled = Some(merge_counts(&self.task, self.bank.counts(group))?);
        self.schedule.mode = ScheduleMode::Learn;
        events.push(TaskEvent::Identified { steps, group });
        Ok(())
    }

    fn recheck(&mut self) -> bool {
        let next = check_known(
            self.eps_known,
            self.bank,
            &self.vs,
            self.knowledge_counts(),
            self.schedule.active(),
        );
        let changed = next != self.known;
        self.known = next;
        changed
    }
}

impl Knowledge for FiniteModelKnowledge<'_> {
    fn known(&self) -> &KnownnessMap {
        &self.known
    }

    fn plan_theta(&self, s: usize, a: usize) -> ThetaVector {
        if self.pooled.is_none() && self.task.visits(s, a) < self.schedule.active() {
            // Known through agreement: any survivor's estimate will do.
            if let Some(g) = self.vs.survivors().next() {
                return self.bank.theta(g, s, a).clone();
            }
        }
        estimate_theta(self.knowledge_counts(), s, a)
    }

    fn task_visits(&self, s: usize, a: usize) -> u64 {
        self.task.visits(s, a)
    }

    fn observe(&mut self, rec: &TransitionRecord, step: usize, events: &mut Vec<TaskEvent>) -> bool {
        self.task.record(rec);
        if let Some(p) = self.pooled.as_mut() {
            p.record(rec);
        }
        let (s, a) = (rec.state, rec.action);
        if self.vs.len() > 1 {
            for g in 0..self.bank.len() {
                self.thetas[g].clone_from(self.bank.theta(g, s, a));
                self.radii[g] = self.bank.radius(g, s, a);
            }
            let z = encode_transition(rec, self.task.num_states());
            let gone = update_elimination(&mut self.vs, &self.thetas, &self.radii, &z)
                .expect("candidate estimates share the task's shape");
            if !gone.is_empty() {
                let remaining = self.vs.len();
                let count = gone.len();
                for (k, candidate) in gone.into_iter().enumerate() {
                    events.push(TaskEvent::Eliminated {
                        step,
                        candidate,
                        survivors: remaining + count - 1 - k,
                    });
                }
                if let Some(g) = self.vs.identified() {
                    self.identify(g, step + 1, events)
                        .expect("group counts share the task's shape");
                }
                return self.recheck();
            }
        }
        let m = self.schedule.active();
        if !self.known.is_known(s, a) && self.knowledge_counts().visits(s, a) >= m {
            self.known.set(s, a, true);
            return true;
        }
        false
    }
}

/// Runs one task against the candidate groups in `bank`. With a single
/// group the task is identified before the first step.
pub fn run_finite_model_task<E, R>(
    env: &E,
    bank: &GroupBank,
    params: &FiniteModelParams,
    rng: &mut R,
) -> Result<FiniteModelOutcome>
where
    E: Environment + ?Sized,
    R: Rng + ?Sized,
{
    if params.horizon == 0 {
        return Err(Error::Input("horizon must be at least 1".into()));
    }
    if bank.num_states() != env.num_states() || bank.num_actions() != env.num_actions() {
        return Err(Error::Shape("candidate groups do not match the environment".into()));
    }
    if !(params.xi > 0.0) || !(params.eps_known >= 0.0) || !(params.gate >= 0.0) {
        return Err(Error::Input("xi must be positive; eps_known and gate non-negative".into()));
    }
    let (ns, na) = (env.num_states(), env.num_actions());
    let mut schedule = params.schedule;
    schedule.mode = ScheduleMode::Identify;
    let mut know = FiniteModelKnowledge {
        bank,
        vs: VersionSpace::new(bank.len(), params.xi).with_gate(params.gate),
        task: CountTable::new(ns, na),
        pooled: None,
        schedule,
        eps_known: params.eps_known,
        known: KnownnessMap::new(ns, na, schedule.active()),
        thetas: vec![ThetaVector { values: Vec::new(), samples: 0 }; bank.len()],
        radii: vec![ConfidenceRadius(f64::INFINITY); bank.len()],
    };
    let mut pre_events = Vec::new();
    if let Some(g) = know.vs.identified() {
        know.identify(g, 0, &mut pre_events)?;
    }
    know.recheck();
    let drive_params = DriveParams {
        horizon: params.horizon,
        discount: params.discount,
        epsilon: params.epsilon,
        tol: params.tol,
    };
    let mut log = drive(env, &mut know, &drive_params, rng)?;
    pre_events.append(&mut log.events);
    log.events = pre_events;
    Ok(FiniteModelOutcome {
        identified: know.vs.identified(),
        counts: know.task,
        log,
    })
}
