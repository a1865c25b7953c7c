//! Tabular MDPs: representation, exact planning, simulation and diameter.
//!
//! States and actions are zero-based indices. Transition probabilities are
//! stored densely as `P[s][a][s']`, which suits the small state spaces this
//! crate targets (tens of states), with a sparse index of the nonzero
//! entries for backups and sampling.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-9;

/// A finite discounted MDP `<S, A, P, R, gamma>` with rewards in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Mdp {
    num_states: usize,
    num_actions: usize,
    discount: f64,
    transition: Vec<f64>,
    reward: Vec<f64>,
    /// Nonzero `(s', p)` entries of each row, rows delimited by `offsets`.
    support: Vec<(usize, f64)>,
    offsets: Vec<usize>,
}

impl PartialEq for Mdp {
    fn eq(&self, other: &Self) -> bool {
        self.num_states == other.num_states
            && self.num_actions == other.num_actions
            && self.discount == other.discount
            && self.transition == other.transition
            && self.reward == other.reward
    }
}

/// Deterministic stationary policy, one action per state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Policy(pub Vec<usize>);

/// State values.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction(pub Vec<f64>);

/// One observed interaction `(s, a, r, s')`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionRecord {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

impl Mdp {
    /// Builds an MDP from a dense transition table (`S*A*S`, indexed
    /// `[s][a][s']`) and a reward table (`S*A`).
    pub fn new(
        num_states: usize,
        num_actions: usize,
        discount: f64,
        transition: Vec<f64>,
        reward: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::Input("an MDP needs at least one state and one action".into()));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::Input(format!("discount {discount} not in (0, 1)")));
        }
        if transition.len() != num_states * num_actions * num_states {
            return Err(Error::Shape(format!(
                "transition table has {} entries, expected {}",
                transition.len(),
                num_states * num_actions * num_states
            )));
        }
        if reward.len() != num_states * num_actions {
            return Err(Error::Shape(format!(
                "reward table has {} entries, expected {}",
                reward.len(),
                num_states * num_actions
            )));
        }
        let mut support = Vec::new();
        let mut offsets = Vec::with_capacity(num_states * num_actions + 1);
        offsets.push(0);
        for row in transition.chunks(num_states) {
            support.extend(row.iter().enumerate().filter(|(_, p)| **p != 0.0).map(|(i, p)| (i, *p)));
            offsets.push(support.len());
        }
        let mdp = Mdp {
            num_states,
            num_actions,
            discount,
            transition,
            reward,
            support,
            offsets,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&self) -> Result<()> {
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let row = self.row(s, a);
                if let Some(p) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                    return Err(Error::Input(format!("P(.|{s},{a}) has entry {p} outside [0,1]")));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::Input(format!("P(.|{s},{a}) sums to {sum}")));
                }
                let r = self.reward(s, a);
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::Input(format!("R({s},{a}) = {r} outside [0,1]")));
                }
            }
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Next-state distribution `P(.|s,a)`.
    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    #[inline]
    fn sparse_row(&self, s: usize, a: usize) -> &[(usize, f64)] {
        let pair = s * self.num_actions + a;
        &self.support[self.offsets[pair]..self.offsets[pair + 1]]
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.row(s, a)[next]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions + a]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    /// Same dynamics with a different reward table.
    pub fn with_rewards(&self, reward: Vec<f64>) -> Result<Self> {
        Mdp::new(
            self.num_states,
            self.num_actions,
            self.discount,
            self.transition.clone(),
            reward,
        )
    }

    /// Largest number of next states with positive probability over all
    /// state-action pairs.
    pub fn max_next_states(&self) -> usize {
        self.offsets.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }

    /// Model vector for `(s, a)`: the transition row followed by the mean reward.
    pub fn theta(&self, s: usize, a: usize) -> Vec<f64> {
        let mut v = self.row(s, a).to_vec();
        v.push(self.reward(s, a));
        v
    }

    #[inline]
    fn backup(&self, s: usize, a: usize, values: &[f64]) -> f64 {
        let expected: f64 = self.sparse_row(s, a).iter().map(|(i, p)| p * values[*i]).sum();
        self.reward(s, a) + self.discount * expected
    }

    /// `Q(s, .)` under the given state values.
    pub fn action_values(&self, s: usize, values: &ValueFunction) -> Vec<f64> {
        (0..self.num_actions)
            .map(|a| self.backup(s, a, &values.0))
            .collect()
    }

    fn greedy(&self, s: usize, values: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for a in 0..self.num_actions {
            let q = self.backup(s, a, values);
            if q > best.1 {
                best = (a, q);
            }
        }
        best
    }

    /// Samples one transition. Rewards are Bernoulli with mean `R(s, a)`.
    pub fn step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> Result<TransitionRecord> {
        if s >= self.num_states || a >= self.num_actions {
            return Err(Error::Input(format!(
                "(s={s}, a={a}) out of range for {}x{} MDP",
                self.num_states, self.num_actions
            )));
        }
        let u: f64 = rng.random();
        let row = self.sparse_row(s, a);
        let mut acc = 0.0;
        // Falls back to the last positive entry so rounding in the row sum
        // can never select a zero-probability state.
        let mut next = row.last().map_or(0, |e| e.0);
        for &(i, p) in row {
            acc += p;
            if u < acc {
                next = i;
                break;
            }
        }
        let r_mean = self.reward(s, a);
        let reward = if r_mean > 0.0 && rng.random::<f64>() < r_mean {
            1.0
        } else {
            0.0
        };
        Ok(TransitionRecord {
            state: s,
            action: a,
            reward,
            next_state: next,
        })
    }
}

/// Value iteration from `V = 0`.
///
/// Stops once successive iterates differ by at most `tol * (1 - gamma) / gamma`
/// in sup norm, which bounds the Bellman residual of the returned values by
/// `tol`. The policy is greedy with respect to the returned values; ties go
/// to the lowest action index.
pub fn value_iteration(mdp: &Mdp, tol: f64) -> (ValueFunction, Policy) {
    value_iteration_from(mdp, tol, &vec![0.0; mdp.num_states])
}

/// Value iteration warm-started from `init`.
pub fn value_iteration_from(mdp: &Mdp, tol: f64, init: &[f64]) -> (ValueFunction, Policy) {
    assert!(tol > 0.0, "tolerance must be positive");
    assert_eq!(init.len(), mdp.num_states);
    let gamma = mdp.discount;
    let stop = tol * (1.0 - gamma) / gamma;
    let mut values = init.to_vec();
    let mut next = vec![0.0; mdp.num_states];
    let mut policy = vec![0; mdp.num_states];
    loop {
        let mut diff: f64 = 0.0;
        for s in 0..mdp.num_states {
            let (a, q) = mdp.greedy(s, &values);
            policy[s] = a;
            next[s] = q;
            diff = diff.max((q - values[s]).abs());
        }
        std::mem::swap(&mut values, &mut next);
        if diff <= stop {
            break;
        }
    }
    // Greedy with respect to the values actually returned.
    for (s, slot) in policy.iter_mut().enumerate() {
        *slot = mdp.greedy(s, &values).0;
    }
    (ValueFunction(values), Policy(policy))
}

/// Iterative evaluation of a deterministic policy to within `tol` of its
/// fixed point.
pub fn policy_evaluation(mdp: &Mdp, policy: &Policy, tol: f64) -> ValueFunction {
    assert!(tol > 0.0, "tolerance must be positive");
    assert_eq!(policy.0.len(), mdp.num_states, "policy length");
    assert!(
        policy.0.iter().all(|a| *a < mdp.num_actions),
        "policy contains an invalid action"
    );
    let gamma = mdp.discount;
    let stop = tol * (1.0 - gamma) / gamma;
    let mut values = vec![0.0; mdp.num_states];
    let mut next = vec![0.0; mdp.num_states];
    loop {
        let mut diff: f64 = 0.0;
        for s in 0..mdp.num_states {
            next[s] = mdp.backup(s, policy.0[s], &values);
            diff = diff.max((next[s] - values[s]).abs());
        }
        std::mem::swap(&mut values, &mut next);
        if diff <= stop {
            break;
        }
    }
    ValueFunction(values)
}

/// Largest minimal expected hitting time over ordered state pairs.
///
/// For each target the undiscounted first-passage equations
/// `h(s) = 1 + min_a sum_s' P(s'|s,a) h(s')`, `h(target) = 0` are iterated
/// from zero until the sup-norm change is at most `tol`. Returns
/// `f64::INFINITY` when some target cannot be reached with probability one.
pub fn diameter(mdp: &Mdp, tol: f64) -> f64 {
    assert!(tol > 0.0, "tolerance must be positive");
    let n = mdp.num_states;
    let mut worst: f64 = 0.0;
    for target in 0..n {
        let Some(allowed) = almost_sure_actions(mdp, target) else {
            return f64::INFINITY;
        };
        let mut h = vec![0.0; n];
        loop {
            let mut diff: f64 = 0.0;
            for s in 0..n {
                if s == target {
                    continue;
                }
                let best = allowed[s]
                    .iter()
                    .map(|&a| {
                        1.0 + mdp
                            .row(s, a)
                            .iter()
                            .zip(&h)
                            .map(|(p, v)| p * v)
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min);
                diff = diff.max((best - h[s]).abs());
                h[s] = best;
            }
            if diff <= tol {
                break;
            }
        }
        worst = h.into_iter().fold(worst, f64::max);
    }
    worst
}

/// Actions that keep the agent inside the set of states from which `target`
/// is reached with probability one, or `None` if that set is not everything.
fn almost_sure_actions(mdp: &Mdp, target: usize) -> Option<Vec<Vec<usize>>> {
    let n = mdp.num_states;
    let mut inside = vec![true; n];
    loop {
        let safe: Vec<Vec<usize>> = (0..n)
            .map(|s| {
                (0..mdp.num_actions)
                    .filter(|&a| {
                        mdp.row(s, a)
                            .iter()
                            .enumerate()
                            .all(|(t, p)| *p == 0.0 || inside[t])
                    })
                    .collect()
            })
            .collect();
        // Backward reachability of the target through safe actions.
        let mut reach = vec![false; n];
        reach[target] = true;
        let mut grew = true;
        while grew {
            grew = false;
            for s in 0..n {
                if reach[s] || !inside[s] {
                    continue;
                }
                let hits = safe[s]
                    .iter()
                    .any(|&a| mdp.row(s, a).iter().enumerate().any(|(t, p)| *p > 0.0 && reach[t]));
                if hits {
                    reach[s] = true;
                    grew = true;
                }
            }
        }
        if reach == inside {
            return if inside.iter().all(|x| *x) { Some(safe) } else { None };
        }
        inside = reach;
    }
}

impl fmt::Display for Mdp {
    /// Text form:
    ///
    /// ```text
    /// mdp <S> <A> <gamma>
    /// transitions
    /// <s> <a> <s'> <prob>      one line per nonzero entry
    /// rewards
    /// <s> <a> <reward_mean>    one line per pair
    /// end
    /// ```
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mdp {} {} {}", self.num_states, self.num_actions, self.discount)?;
        writeln!(f, "transitions")?;
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                for (t, p) in self.row(s, a).iter().enumerate() {
                    if *p != 0.0 {
                        writeln!(f, "{s} {a} {t} {p}")?;
                    }
                }
            }
        }
        writeln!(f, "rewards")?;
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                writeln!(f, "{s} {a} {}", self.reward(s, a))?;
            }
        }
        writeln!(f, "end")
    }
}

impl std::str::FromStr for Mdp {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut lines = crate::text::Lines::new(text);
        let mdp = parse_mdp(&mut lines)?;
        lines.expect_eof()?;
        Ok(mdp)
    }
}

pub(crate) fn parse_mdp(lines: &mut crate::text::Lines<'_>) -> Result<Mdp> {
    let (line_no, header) = lines.next_required("mdp header")?;
    let fields = crate::text::fields(header);
    if fields.len() != 4 || fields[0] != "mdp" {
        return Err(Error::parse(line_no, "expected `mdp <S> <A> <gamma>`"));
    }
    let s_count: usize = crate::text::num(line_no, fields[1])?;
    let a_count: usize = crate::text::num(line_no, fields[2])?;
    let gamma: f64 = crate::text::num(line_no, fields[3])?;
    if s_count == 0 || a_count == 0 {
        return Err(Error::parse(line_no, "S and A must be positive"));
    }
    lines.expect_keyword("transitions")?;
    let mut transition = vec![0.0; s_count * a_count * s_count];
    let mut reward = vec![0.0; s_count * a_count];
    loop {
        let (no, line) = lines.next_required("transition row or `rewards`")?;
        if line == "rewards" {
            break;
        }
        let f = crate::text::fields(line);
        if f.len() != 4 {
            return Err(Error::parse(no, "expected `<s> <a> <s'> <prob>`"));
        }
        let (s, a, t): (usize, usize, usize) = (
            crate::text::num(no, f[0])?,
            crate::text::num(no, f[1])?,
            crate::text::num(no, f[2])?,
        );
        if s >= s_count || a >= a_count || t >= s_count {
            return Err(Error::parse(no, "index out of range"));
        }
        transition[(s * a_count + a) * s_count + t] = crate::text::num(no, f[3])?;
    }
    loop {
        let (no, line) = lines.next_required("reward row or `end`")?;
        if line == "end" {
            break;
        }
        let f = crate::text::fields(line);
        if f.len() != 3 {
            return Err(Error::parse(no, "expected `<s> <a> <reward>`"));
        }
        let (s, a): (usize, usize) = (crate::text::num(no, f[0])?, crate::text::num(no, f[1])?);
        if s >= s_count || a >= a_count {
            return Err(Error::parse(no, "index out of range"));
        }
        reward[s * a_count + a] = crate::text::num(no, f[2])?;
    }
    Mdp::new(s_count, a_count, gamma, transition, reward)
}
