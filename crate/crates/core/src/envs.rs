//! Task environments: finite families of MDPs with a prior, the 5x5
//! gridworld suite, and random families with a guaranteed model gap.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::estimation::squared_distance;
use crate::mdp::{diameter, parse_mdp, Mdp, TransitionRecord};
use crate::text::{fields, num, Lines};

/// Something a learner can act in. Learners only see states, actions,
/// rewards and the start state; never the model.
pub trait Environment {
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn start_state(&self) -> usize;
    fn step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> Result<TransitionRecord>;
}

/// One task instance. Deliberately carries no record of which family member
/// it was drawn from.
#[derive(Debug, Clone)]
pub struct Simulator {
    mdp: Arc<Mdp>,
    start: usize,
}

impl Simulator {
    pub fn new(mdp: Arc<Mdp>, start: usize) -> Result<Self> {
        if start >= mdp.num_states() {
            return Err(Error::Input(format!("start state {start} out of range")));
        }
        Ok(Simulator { mdp, start })
    }
}

impl Environment for Simulator {
    fn num_states(&self) -> usize {
        self.mdp.num_states()
    }

    fn num_actions(&self) -> usize {
        self.mdp.num_actions()
    }

    fn start_state(&self) -> usize {
        self.start
    }

    fn step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> Result<TransitionRecord> {
        self.mdp.step(s, a, rng)
    }
}

/// Draws tasks for a multi-task run.
pub trait TaskSampler {
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;
    /// Returns the hidden member index (for logging only) and the task.
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Simulator);
}

/// A finite set of MDPs over shared state and action spaces, with a prior.
#[derive(Debug, Clone)]
pub struct MdpFamily {
    members: Vec<Arc<Mdp>>,
    prior: Vec<f64>,
    start: usize,
    gap: f64,
    diameter: f64,
    next_states: usize,
    sampler: WeightedIndex<f64>,
}

impl PartialEq for MdpFamily {
    fn eq(&self, other: &Self) -> bool {
        self.members == other.members
            && self.prior == other.prior
            && self.start == other.start
            && self.gap.to_bits() == other.gap.to_bits()
            && self.diameter.to_bits() == other.diameter.to_bits()
            && self.next_states == other.next_states
    }
}

const DIAMETER_TOL: f64 = 1e-9;

impl MdpFamily {
    /// Validates the members and prior and computes gap, diameter and the
    /// next-state bound.
    pub fn new(members: Vec<Mdp>, prior: Vec<f64>, start: usize) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Input("a family needs at least one MDP".into()))?;
        let (ns, na, gamma) = (first.num_states(), first.num_actions(), first.discount());
        if members
            .iter()
            .any(|m| m.num_states() != ns || m.num_actions() != na || m.discount() != gamma)
        {
            return Err(Error::Shape("family members differ in S, A or discount".into()));
        }
        if prior.len() != members.len() {
            return Err(Error::Shape(format!(
                "{} prior weights for {} members",
                prior.len(),
                members.len()
            )));
        }
        if prior.iter().any(|p| !(0.0..=1.0).contains(p)) || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Input("prior weights must lie in [0,1] and sum to 1".into()));
        }
        if start >= ns {
            return Err(Error::Input(format!("start state {start} out of range")));
        }
        let gap = model_gap(&members);
        let diameter = members
            .iter()
            .map(|m| diameter(m, DIAMETER_TOL))
            .fold(0.0, f64::max);
        let next_states = members.iter().map(Mdp::max_next_states).max().unwrap_or(1);
        let sampler = WeightedIndex::new(&prior).map_err(|e| Error::Input(e.to_string()))?;
        Ok(MdpFamily {
            members: members.into_iter().map(Arc::new).collect(),
            prior,
            start,
            gap,
            diameter,
            next_states,
            sampler,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member(&self, i: usize) -> &Mdp {
        &self.members[i]
    }

    pub fn members(&self) -> impl Iterator<Item = &Mdp> {
        self.members.iter().map(|m| &**m)
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn min_prior(&self) -> f64 {
        self.prior.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn start_state(&self) -> usize {
        self.start
    }

    pub fn discount(&self) -> f64 {
        self.members[0].discount()
    }

    /// Smallest, over member pairs, of the largest per-pair model distance.
    /// Infinite for a single member.
    pub fn gap(&self) -> f64 {
        self.gap
    }

    /// Largest member diameter.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Largest support of any transition row.
    pub fn next_states(&self) -> usize {
        self.next_states
    }

    pub fn simulator(&self, i: usize) -> Simulator {
        Simulator {
            mdp: Arc::clone(&self.members[i]),
            start: self.start,
        }
    }
}

impl TaskSampler for MdpFamily {
    fn num_states(&self) -> usize {
        self.members[0].num_states()
    }

    fn num_actions(&self) -> usize {
        self.members[0].num_actions()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Simulator) {
        sample_task(self, rng)
    }
}

/// Draws a member according to the prior.
pub fn sample_task<R: Rng + ?Sized>(family: &MdpFamily, rng: &mut R) -> (usize, Simulator) {
    let i = family.sampler.sample(rng);
    (i, family.simulator(i))
}

/// `min_{i<j} max_{s,a} ||theta_i(s,a) - theta_j(s,a)||`.
pub fn model_gap(members: &[Mdp]) -> f64 {
    let mut gap = f64::INFINITY;
    for i in 0..members.len() {
        for j in i + 1..members.len() {
            gap = gap.min(max_pair_distance(&members[i], &members[j]));
        }
    }
    gap
}

fn max_pair_distance(x: &Mdp, y: &Mdp) -> f64 {
    let mut worst: f64 = 0.0;
    for s in 0..x.num_states() {
        for a in 0..x.num_actions() {
            worst = worst.max(squared_distance(&x.theta(s, a), &y.theta(s, a)));
        }
    }
    worst.sqrt()
}

pub const GRID_SIDE: usize = 5;
/// North, East, South, West.
pub const GRID_ACTIONS: usize = 4;
/// The centre cell, `s13` in 1-based numbering.
pub const GRID_START: usize = 12;
/// The trap corners `s5`, `s21`, `s25`.
pub const GRID_TRAPS: [usize; 3] = [4, 20, 24];

fn grid_move(s: usize, a: usize) -> usize {
    let (r, c) = (s / GRID_SIDE, s % GRID_SIDE);
    let (r, c) = match a {
        0 if r > 0 => (r - 1, c),
        1 if c + 1 < GRID_SIDE => (r, c + 1),
        2 if r + 1 < GRID_SIDE => (r + 1, c),
        3 if c > 0 => (r, c - 1),
        _ => (r, c),
    };
    r * GRID_SIDE + c
}

/// Shared gridworld dynamics. The intended move succeeds with 0.85 and each
/// other direction happens with 0.05; moves into walls stay put. The three
/// trap corners ignore the action: stay with 0.95, else jump to the centre.
pub fn gridworld_transitions() -> Vec<f64> {
    let ns = GRID_SIDE * GRID_SIDE;
    let mut t = vec![0.0; ns * GRID_ACTIONS * ns];
    for s in 0..ns {
        for a in 0..GRID_ACTIONS {
            let row = &mut t[(s * GRID_ACTIONS + a) * ns..(s * GRID_ACTIONS + a + 1) * ns];
            if GRID_TRAPS.contains(&s) {
                row[s] = 0.95;
                row[GRID_START] = 0.05;
                continue;
            }
            for d in 0..GRID_ACTIONS {
                row[grid_move(s, d)] += if d == a { 0.85 } else { 0.05 };
            }
        }
    }
    t
}

/// State rewards of the three gridworld MDPs (0-based states).
fn gridworld_rewards(which: usize) -> Vec<f64> {
    // (goal, decoy, zero-reward traps)
    let (goal, decoy, zeros) = match which {
        0 => (20, 5, [4, 24]),
        1 => (4, 1, [20, 24]),
        // s25 is this member's goal, so the zero-reward corners are s5 and
        // s21, mirroring the other two members.
        _ => (24, 0, [4, 20]),
    };
    let mut r = vec![0.1; GRID_SIDE * GRID_SIDE];
    r[goal] = 0.99;
    r[decoy] = 0.6;
    for z in zeros {
        r[z] = 0.0;
    }
    r
}

/// The three-MDP gridworld family with a uniform prior, started at the centre.
pub fn gridworld_suite(discount: f64) -> Result<MdpFamily> {
    let ns = GRID_SIDE * GRID_SIDE;
    let transitions = gridworld_transitions();
    let members = (0..3)
        .map(|k| {
            let state_reward = gridworld_rewards(k);
            let reward = (0..ns * GRID_ACTIONS).map(|p| state_reward[p / GRID_ACTIONS]).collect();
            Mdp::new(ns, GRID_ACTIONS, discount, transitions.clone(), reward)
        })
        .collect::<Result<Vec<_>>>()?;
    MdpFamily::new(members, vec![1.0 / 3.0; 3], GRID_START)
}

/// Maximum rejection-sampling attempts in [`random_family`].
pub const MAX_GENERATION_ATTEMPTS: usize = 1000;

/// Random family of `c` MDPs with sparse random dynamics and uniform
/// rewards, uniform prior, start state 0. Resamples until every member has
/// a finite diameter and the family gap exceeds `min_gap`.
pub fn random_family(
    num_states: usize,
    num_actions: usize,
    c: usize,
    discount: f64,
    min_gap: f64,
    seed: u64,
) -> Result<MdpFamily> {
    if num_states == 0 || num_actions == 0 || c == 0 {
        return Err(Error::Input("S, A and C must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reason = String::new();
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let members = (0..c)
            .map(|_| random_mdp(num_states, num_actions, discount, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let gap = model_gap(&members);
        if gap <= min_gap {
            reason = format!("gap {gap:.4} <= {min_gap}");
            continue;
        }
        if let Some(m) = members.iter().position(|m| diameter(m, DIAMETER_TOL).is_infinite()) {
            reason = format!("member {m} has infinite diameter");
            continue;
        }
        return MdpFamily::new(members, vec![1.0 / c as f64; c], 0);
    }
    Err(Error::Generation {
        attempts: MAX_GENERATION_ATTEMPTS,
        reason,
    })
}

fn random_mdp<R: Rng + ?Sized>(ns: usize, na: usize, discount: f64, rng: &mut R) -> Result<Mdp> {
    let mut transition = vec![0.0; ns * na * ns];
    for pair in 0..ns * na {
        let row = &mut transition[pair * ns..(pair + 1) * ns];
        let support = rng.random_range(1..=ns.min(3));
        let picked = index::sample(rng, ns, support);
        let weights: Vec<f64> = (0..support).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = weights.iter().sum();
        for (next, w) in picked.iter().zip(&weights) {
            row[next] = w / total;
        }
    }
    let reward = (0..ns * na).map(|_| rng.random::<f64>()).collect();
    Mdp::new(ns, na, discount, transition, reward)
}

impl fmt::Display for MdpFamily {
    /// ```text
    /// family <C> <start>
    /// prior <p_1> ... <p_C>
    /// gap <G>
    /// diameter <D>
    /// next_states <N>
    /// <C MDP blocks>
    /// ```
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "family {} {}", self.members.len(), self.start)?;
        write!(f, "prior")?;
        for p in &self.prior {
            write!(f, " {p}")?;
        }
        writeln!(f)?;
        writeln!(f, "gap {}", self.gap)?;
        writeln!(f, "diameter {}", self.diameter)?;
        writeln!(f, "next_states {}", self.next_states)?;
        for m in &self.members {
            write!(f, "{m}")?;
        }
        Ok(())
    }
}

impl FromStr for MdpFamily {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut lines = Lines::new(text);
        let (no, header) = lines.next_required("family header")?;
        let h = fields(header);
        if h.len() != 3 || h[0] != "family" {
            return Err(Error::parse(no, "expected `family <C> <start>`"));
        }
        let c: usize = num(no, h[1])?;
        let start: usize = num(no, h[2])?;
        let (no, prior_line) = lines.next_required("prior")?;
        let p = fields(prior_line);
        if p.first() != Some(&"prior") || p.len() != c + 1 {
            return Err(Error::parse(no, format!("expected `prior` with {c} weights")));
        }
        let prior = p[1..].iter().map(|x| num(no, x)).collect::<Result<Vec<f64>>>()?;
        let mut declared = Vec::with_capacity(3);
        for key in ["gap", "diameter", "next_states"] {
            let (no, line) = lines.next_required(key)?;
            match fields(line)[..] {
                [k, v] if k == key => declared.push((no, key, num::<f64>(no, v)?)),
                _ => return Err(Error::parse(no, format!("expected `{key} <value>`"))),
            }
        }
        let members = (0..c).map(|_| parse_mdp(&mut lines)).collect::<Result<Vec<_>>>()?;
        lines.expect_eof()?;
        let family = MdpFamily::new(members, prior, start)?;
        let computed = [family.gap, family.diameter, family.next_states as f64];
        for ((no, key, value), actual) in declared.into_iter().zip(computed) {
            let agrees = value == actual || (value - actual).abs() <= 1e-9 * actual.abs().max(1.0);
            if !agrees {
                return Err(Error::parse(no, format!("declared {key} {value} but the members give {actual}")));
            }
        }
        Ok(family)
    }
}
