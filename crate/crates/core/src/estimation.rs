//! Empirical model estimation per state-action pair.
//!
//! Each pair `(s, a)` is summarised by an `(S+1)`-dimensional model vector:
//! the next-state distribution followed by the mean reward. Estimates come
//! from a [`CountTable`]; their accuracy is bounded in l2 norm by
//! [`confidence_radius`], which inverts the vector-valued martingale tail
//! bound `P(|X_n / n| >= eps) <= 2 exp(2 - n eps^2 / 2)`.

use std::fmt;

use crate::error::{Error, Result};
use crate::mdp::TransitionRecord;

/// Per-pair transition counts and reward sums collected from experience.
#[derive(Debug, Clone, PartialEq)]
pub struct CountTable {
    num_states: usize,
    num_actions: usize,
    next_counts: Vec<u64>,
    visits: Vec<u64>,
    reward_sums: Vec<f64>,
}

/// Model estimate for one pair: `S` transition entries then the mean reward.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    pub values: Vec<f64>,
    pub samples: u64,
}

/// l2 confidence radius. `f64::INFINITY` means "no data".
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ConfidenceRadius(pub f64);

/// Indicator of the realised next state with the realised reward appended.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedOutcome(pub Vec<f64>);

impl CountTable {
    pub fn new(num_states: usize, num_actions: usize) -> Self {
        CountTable {
            num_states,
            num_actions,
            next_counts: vec![0; num_states * num_actions * num_states],
            visits: vec![0; num_states * num_actions],
            reward_sums: vec![0.0; num_states * num_actions],
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    fn pair(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    pub fn record(&mut self, rec: &TransitionRecord) {
        let p = self.pair(rec.state, rec.action);
        self.visits[p] += 1;
        self.reward_sums[p] += rec.reward;
        self.next_counts[p * self.num_states + rec.next_state] += 1;
    }

    /// `o(s, a)`.
    #[inline]
    pub fn visits(&self, s: usize, a: usize) -> u64 {
        self.visits[self.pair(s, a)]
    }

    /// `o(s, a, s')`.
    pub fn next_count(&self, s: usize, a: usize, next: usize) -> u64 {
        self.next_counts[self.pair(s, a) * self.num_states + next]
    }

    pub fn next_counts(&self, s: usize, a: usize) -> &[u64] {
        let start = self.pair(s, a) * self.num_states;
        &self.next_counts[start..start + self.num_states]
    }

    pub fn reward_sum(&self, s: usize, a: usize) -> f64 {
        self.reward_sums[self.pair(s, a)]
    }

    pub fn total_visits(&self) -> u64 {
        self.visits.iter().sum()
    }

    pub fn min_visits(&self) -> u64 {
        self.visits.iter().copied().min().unwrap_or(0)
    }

    /// Adds `count` observations of `(s, a) -> next` with total reward
    /// `reward_sum`.
    pub fn add(&mut self, s: usize, a: usize, next: usize, count: u64, reward_sum: f64) {
        let p = self.pair(s, a);
        self.visits[p] += count;
        self.reward_sums[p] += reward_sum;
        self.next_counts[p * self.num_states + next] += count;
    }

    fn check_shape(&self, other: &CountTable) -> Result<()> {
        if self.num_states != other.num_states || self.num_actions != other.num_actions {
            return Err(Error::Shape(format!(
                "count tables {}x{} and {}x{}",
                self.num_states, self.num_actions, other.num_states, other.num_actions
            )));
        }
        Ok(())
    }

    /// In-place entrywise sum.
    pub fn absorb(&mut self, other: &CountTable) -> Result<()> {
        self.check_shape(other)?;
        for (x, y) in self.next_counts.iter_mut().zip(&other.next_counts) {
            *x += y;
        }
        for (x, y) in self.visits.iter_mut().zip(&other.visits) {
            *x += y;
        }
        for (x, y) in self.reward_sums.iter_mut().zip(&other.reward_sums) {
            *x += y;
        }
        Ok(())
    }
}

/// Entrywise sum of two count tables.
pub fn merge_counts(a: &CountTable, b: &CountTable) -> Result<CountTable> {
    let mut out = a.clone();
    out.absorb(b)?;
    Ok(out)
}

/// Empirical means at `(s, a)`. Without data the estimate is the uniform
/// transition row with reward 0.5.
pub fn estimate_theta(counts: &CountTable, s: usize, a: usize) -> ThetaVector {
    let n = counts.visits(s, a);
    let num_states = counts.num_states;
    let mut values = Vec::with_capacity(num_states + 1);
    if n == 0 {
        values.resize(num_states, 1.0 / num_states as f64);
        values.push(0.5);
    } else {
        let inv = 1.0 / n as f64;
        values.extend(counts.next_counts(s, a).iter().map(|c| *c as f64 * inv));
        values.push(counts.reward_sum(s, a) * inv);
    }
    ThetaVector { values, samples: n }
}

/// Radius `eps` solving `2 exp(2 - n eps^2 / 2) = delta`, i.e.
/// `sqrt((2 / n) (2 + ln(2 / delta)))`.
pub fn confidence_radius(n: u64, delta: f64) -> ConfidenceRadius {
    assert!(delta > 0.0 && delta < 1.0, "delta must lie in (0, 1)");
    if n == 0 {
        return ConfidenceRadius(f64::INFINITY);
    }
    ConfidenceRadius(((2.0 / n as f64) * (2.0 + (2.0 / delta).ln())).sqrt())
}

impl ConfidenceRadius {
    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }
}

pub fn encode_transition(rec: &TransitionRecord, num_states: usize) -> EncodedOutcome {
    let mut z = vec![0.0; num_states + 1];
    z[rec.next_state] = 1.0;
    z[num_states] = rec.reward;
    EncodedOutcome(z)
}

/// Square loss of a model vector against an observed outcome, `|theta - z|^2`.
pub fn square_loss(theta: &ThetaVector, z: &EncodedOutcome) -> Result<f64> {
    if theta.values.len() != z.0.len() {
        return Err(Error::Shape(format!(
            "model vector has {} entries, outcome has {}",
            theta.values.len(),
            z.0.len()
        )));
    }
    Ok(squared_distance(&theta.values, &z.0))
}

#[inline]
pub(crate) fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// l2 distance between two model vectors.
pub fn theta_distance(a: &ThetaVector, b: &ThetaVector) -> f64 {
    squared_distance(&a.values, &b.values).sqrt()
}

impl fmt::Display for CountTable {
    /// Text form, parallel to the MDP format:
    ///
    /// ```text
    /// counts <S> <A>
    /// transitions
    /// <s> <a> <s'> <count>            nonzero entries only
    /// rewards
    /// <s> <a> <reward_sum>            pairs with visits only
    /// end
    /// ```
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "counts {} {}", self.num_states, self.num_actions)?;
        writeln!(f, "transitions")?;
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                for (t, c) in self.next_counts(s, a).iter().enumerate() {
                    if *c > 0 {
                        writeln!(f, "{s} {a} {t} {c}")?;
                    }
                }
            }
        }
        writeln!(f, "rewards")?;
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                if self.visits(s, a) > 0 {
                    writeln!(f, "{s} {a} {}", self.reward_sum(s, a))?;
                }
            }
        }
        writeln!(f, "end")
    }
}

impl std::str::FromStr for CountTable {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        use crate::text::{fields, num, Lines};
        let mut lines = Lines::new(text);
        let (no, header) = lines.next_required("counts header")?;
        let h = fields(header);
        if h.len() != 3 || h[0] != "counts" {
            return Err(Error::parse(no, "expected `counts <S> <A>`"));
        }
        let (ns, na): (usize, usize) = (num(no, h[1])?, num(no, h[2])?);
        let mut table = CountTable::new(ns, na);
        lines.expect_keyword("transitions")?;
        loop {
            let (no, line) = lines.next_required("count row or `rewards`")?;
            if line == "rewards" {
                break;
            }
            let f = fields(line);
            if f.len() != 4 {
                return Err(Error::parse(no, "expected `<s> <a> <s'> <count>`"));
            }
            let (s, a, t, c): (usize, usize, usize, u64) =
                (num(no, f[0])?, num(no, f[1])?, num(no, f[2])?, num(no, f[3])?);
            if s >= ns || a >= na || t >= ns {
                return Err(Error::parse(no, "index out of range"));
            }
            table.add(s, a, t, c, 0.0);
        }
        loop {
            let (no, line) = lines.next_required("reward row or `end`")?;
            if line == "end" {
                break;
            }
            let f = fields(line);
            if f.len() != 3 {
                return Err(Error::parse(no, "expected `<s> <a> <reward_sum>`"));
            }
            let (s, a, r): (usize, usize, f64) = (num(no, f[0])?, num(no, f[1])?, num(no, f[2])?);
            if s >= ns || a >= na {
                return Err(Error::parse(no, "index out of range"));
            }
            if r < 0.0 || r > table.visits(s, a) as f64 {
                return Err(Error::parse(no, "reward sum outside [0, visits]"));
            }
            let p = table.pair(s, a);
            table.reward_sums[p] = r;
        }
        lines.expect_eof()?;
        Ok(table)
    }
}
