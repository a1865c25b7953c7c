//! Brute-force reference computations for testing `mtrl`.
//!
//! Everything here is written independently of the code it checks: it
//! reads MDPs only through their transition and reward tables and never
//! calls the library's planners, samplers or estimators. Speed is not a
//! goal; inputs are expected to be tiny.

use mtrl::mdp::{Mdp, Policy, ValueFunction};
use mtrl::{Error, Result};
use rand::Rng;

/// Tolerance used by [`reference_plan`].
pub const REFERENCE_TOL: f64 = 1e-12;

/// Largest number of deterministic policies [`exhaustive_policy_search`]
/// will enumerate.
pub const MAX_POLICIES: usize = 4096;

/// True model and two estimates at one state-action pair, all of length
/// `S + 1` (transition row, then mean reward).
#[derive(Debug, Clone, PartialEq)]
pub struct LossGapInstance {
    pub truth: Vec<f64>,
    pub est1: Vec<f64>,
    pub est2: Vec<f64>,
    /// Bound on `||truth - est1||`.
    pub radius: f64,
}

fn norm(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

impl LossGapInstance {
    /// Checks that `truth` is a distribution plus a mean in `[0, 1]`, that
    /// the lengths agree and that `est1` lies within `radius` of `truth`.
    pub fn new(truth: Vec<f64>, est1: Vec<f64>, est2: Vec<f64>, radius: f64) -> Result<Self> {
        let d = truth.len();
        if d < 2 || est1.len() != d || est2.len() != d {
            return Err(Error::Input("vectors must share a length of at least 2".into()));
        }
        let (row, reward) = truth.split_at(d - 1);
        if row.iter().any(|p| *p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Input("transition part of the truth is not a distribution".into()));
        }
        if !(0.0..=1.0).contains(&reward[0]) {
            return Err(Error::Input("reward mean outside [0,1]".into()));
        }
        if norm(&truth, &est1) > radius {
            return Err(Error::Input("first estimate is outside the stated radius".into()));
        }
        Ok(LossGapInstance {
            truth,
            est1,
            est2,
            radius,
        })
    }

    /// `d (d - 2 r)` with `d = ||est1 - est2||`.
    pub fn lower_bound(&self) -> f64 {
        let d = norm(&self.est1, &self.est2);
        d * (d - 2.0 * self.radius)
    }
}

/// Every possible encoded outcome `(indicator of s', r)` with its
/// probability under `truth`, for Bernoulli rewards.
pub fn outcome_distribution(truth: &[f64]) -> Vec<(Vec<f64>, f64)> {
    let s = truth.len() - 1;
    let mean = truth[s];
    let mut out = Vec::with_capacity(2 * s);
    for next in 0..s {
        for (r, pr) in [(0.0, 1.0 - mean), (1.0, mean)] {
            let mut z = vec![0.0; s + 1];
            z[next] = 1.0;
            z[s] = r;
            out.push((z, truth[next] * pr));
        }
    }
    out
}

/// Exact `E[l(est2) - l(est1)]` under the true model, by enumerating all
/// outcomes. Rewards are restricted to `{0, 1}`.
pub fn exact_loss_gap(inst: &LossGapInstance) -> f64 {
    let loss = |theta: &[f64], z: &[f64]| theta.iter().zip(z).map(|(t, v)| (t - v) * (t - v)).sum::<f64>();
    outcome_distribution(&inst.truth)
        .iter()
        .map(|(z, w)| w * (loss(&inst.est2, z) - loss(&inst.est1, z)))
        .sum()
}

/// Random instance with `s` states: a random true model, a first estimate
/// perturbed within `radius`, and an arbitrary second estimate.
pub fn random_instance<R: Rng + ?Sized>(s: usize, radius: f64, rng: &mut R) -> LossGapInstance {
    let mut truth: Vec<f64> = (0..s).map(|_| rng.random::<f64>()).collect();
    let total: f64 = truth.iter().sum();
    truth.iter_mut().for_each(|p| *p /= total);
    truth.push(rng.random());
    let dir: Vec<f64> = (0..=s).map(|_| rng.random::<f64>() - 0.5).collect();
    let len = norm(&dir, &vec![0.0; s + 1]).max(1e-12);
    let scale = radius * rng.random::<f64>() / len;
    let est1: Vec<f64> = truth.iter().zip(&dir).map(|(t, d)| t + scale * d).collect();
    let est2: Vec<f64> = (0..=s).map(|_| rng.random::<f64>()).collect();
    // Rounding can push the perturbation a hair past the radius.
    let radius = radius.max(norm(&truth, &est1));
    LossGapInstance {
        truth,
        est1,
        est2,
        radius,
    }
}

fn bellman(mdp: &Mdp, s: usize, a: usize, v: &[f64]) -> f64 {
    let mut expected = 0.0;
    for (next, value) in v.iter().enumerate() {
        expected += mdp.prob(s, a, next) * value;
    }
    mdp.reward(s, a) + mdp.discount() * expected
}

/// Value iteration to a Bellman residual of [`REFERENCE_TOL`], written
/// separately from the library's planner.
pub fn reference_plan(mdp: &Mdp) -> (ValueFunction, Policy) {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let gamma = mdp.discount();
    let mut v = vec![0.0; ns];
    loop {
        let next: Vec<f64> = (0..ns)
            .map(|s| (0..na).map(|a| bellman(mdp, s, a, &v)).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if change <= REFERENCE_TOL * (1.0 - gamma) / gamma {
            break;
        }
    }
    let policy = (0..ns)
        .map(|s| {
            let q: Vec<f64> = (0..na).map(|a| bellman(mdp, s, a, &v)).collect();
            let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            q.iter().position(|x| *x == best).unwrap_or(0)
        })
        .collect();
    (ValueFunction(v), Policy(policy))
}

/// Solves `m x = b` by Gaussian elimination with partial pivoting.
fn solve(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .expect("non-empty system");
        m.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            if f != 0.0 {
                let (upper, lower) = m.split_at_mut(row);
                for (x, p) in lower[0][col..].iter_mut().zip(&upper[col][col..]) {
                    *x -= f * p;
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / m[row][row];
    }
    x
}

/// Exact discounted value of a deterministic policy, `(I - gamma P) V = R`.
pub fn exact_policy_value(mdp: &Mdp, policy: &[usize]) -> Vec<f64> {
    let ns = mdp.num_states();
    let gamma = mdp.discount();
    let m = (0..ns)
        .map(|s| {
            (0..ns)
                .map(|t| f64::from(u8::from(s == t)) - gamma * mdp.prob(s, policy[s], t))
                .collect()
        })
        .collect();
    let b = (0..ns).map(|s| mdp.reward(s, policy[s])).collect();
    solve(m, b)
}

/// Enumerates every deterministic policy, evaluates it exactly and returns
/// the one with the highest value at `start`. Among policies within 1e-12
/// of the best, the lexicographically smallest wins.
pub fn exhaustive_policy_search(mdp: &Mdp, start: usize) -> Result<(Policy, ValueFunction)> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let count = (0..ns).try_fold(1usize, |acc, _| acc.checked_mul(na).filter(|c| *c <= MAX_POLICIES));
    let Some(count) = count else {
        return Err(Error::Input(format!("{na}^{ns} policies exceed the limit of {MAX_POLICIES}")));
    };
    let mut best: Option<(Vec<usize>, Vec<f64>)> = None;
    for code in 0..count {
        // State 0 is the most significant digit, so codes run in lexicographic order.
        let mut policy = vec![0; ns];
        let mut rest = code;
        for s in (0..ns).rev() {
            policy[s] = rest % na;
            rest /= na;
        }
        let value = exact_policy_value(mdp, &policy);
        let better = match &best {
            None => true,
            Some((_, v)) => value[start] > v[start] + 1e-12,
        };
        if better {
            best = Some((policy, value));
        }
    }
    let (p, v) = best.expect("at least one policy");
    Ok((Policy(p), ValueFunction(v)))
}

/// Minimal expected hitting times of `target` from every state, by policy
/// iteration on the stochastic shortest-path problem. `None` if some state
/// has no path to the target.
pub fn hitting_times(mdp: &Mdp, target: usize) -> Option<Vec<f64>> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    // Breadth-first distances to the target over the support graph.
    let mut dist = vec![usize::MAX; ns];
    dist[target] = 0;
    let mut frontier = vec![target];
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for s in 0..ns {
            if dist[s] != usize::MAX {
                continue;
            }
            let reaches = (0..na).any(|a| frontier.iter().any(|&t| mdp.prob(s, a, t) > 0.0));
            if reaches {
                dist[s] = dist[frontier[0]] + 1;
                next.push(s);
            }
        }
        frontier = next;
    }
    if dist.contains(&usize::MAX) {
        return None;
    }
    // Start from a proper policy: step towards the target with positive probability.
    let mut policy: Vec<usize> = (0..ns)
        .map(|s| {
            (0..na)
                .find(|&a| (0..ns).any(|t| mdp.prob(s, a, t) > 0.0 && dist[t] < dist[s]))
                .unwrap_or(0)
        })
        .collect();
    let others: Vec<usize> = (0..ns).filter(|&s| s != target).collect();
    let evaluate = |policy: &[usize]| {
        let m = others
            .iter()
            .map(|&s| {
                others
                    .iter()
                    .map(|&t| f64::from(u8::from(s == t)) - mdp.prob(s, policy[s], t))
                    .collect()
            })
            .collect();
        let x = solve(m, vec![1.0; others.len()]);
        let mut h = vec![0.0; ns];
        for (k, &s) in others.iter().enumerate() {
            h[s] = x[k];
        }
        h
    };
    loop {
        let h = evaluate(&policy);
        let mut changed = false;
        for &s in &others {
            let cost = |a: usize| 1.0 + (0..ns).map(|t| mdp.prob(s, a, t) * h[t]).sum::<f64>();
            let current = cost(policy[s]);
            if let Some(a) = (0..na).find(|&a| cost(a) < current - 1e-10) {
                policy[s] = a;
                changed = true;
            }
        }
        if !changed {
            return Some(h);
        }
    }
}

/// Largest minimal expected hitting time over all ordered state pairs.
pub fn first_passage_diameter(mdp: &Mdp) -> f64 {
    let mut worst: f64 = 0.0;
    for target in 0..mdp.num_states() {
        match hitting_times(mdp, target) {
            Some(h) => worst = h.into_iter().fold(worst, f64::max),
            None => return f64::INFINITY,
        }
    }
    worst
}

/// Mean and standard error of a sample.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Samples `(s', r)` directly from the tables, independent of the
/// library's simulator.
pub fn sample_transition<R: Rng + ?Sized>(mdp: &Mdp, s: usize, a: usize, rng: &mut R) -> (usize, f64) {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut next = mdp.num_states() - 1;
    for t in 0..mdp.num_states() {
        acc += mdp.prob(s, a, t);
        if u < acc {
            next = t;
            break;
        }
    }
    let r = if rng.random::<f64>() < mdp.reward(s, a) { 1.0 } else { 0.0 };
    (next, r)
}

/// Monte Carlo returns of a deterministic policy from `start`: each rollout
/// runs `length` steps and sums `discount^t r_t` (use `discount = 1` for
/// undiscounted totals). Returns the mean and its standard error.
pub fn rollout_returns<R: Rng + ?Sized>(
    mdp: &Mdp,
    policy: &[usize],
    start: usize,
    length: usize,
    discount: f64,
    rollouts: usize,
    rng: &mut R,
) -> (f64, f64) {
    let returns: Vec<f64> = (0..rollouts)
        .map(|_| {
            let (mut s, mut total, mut weight) = (start, 0.0, 1.0);
            for _ in 0..length {
                let (next, r) = sample_transition(mdp, s, policy[s], rng);
                total += weight * r;
                weight *= discount;
                s = next;
            }
            total
        })
        .collect();
    mean_and_se(&returns)
}
