#![allow(dead_code)]

use std::path::PathBuf;

use mtrl::mdp::Mdp;
use rand::Rng;

/// Random MDP with dense random rows; about a third of the entries are
/// zeroed so rows have varied supports.
pub fn random_mdp<R: Rng>(rng: &mut R, ns: usize, na: usize, discount: f64) -> Mdp {
    let mut transition = Vec::with_capacity(ns * na * ns);
    for _ in 0..ns * na {
        let mut row: Vec<f64> = (0..ns)
            .map(|_| if rng.random::<f64>() < 0.33 { 0.0 } else { rng.random::<f64>() })
            .collect();
        if row.iter().all(|p| *p == 0.0) {
            row[rng.random_range(0..ns)] = 1.0;
        }
        let total: f64 = row.iter().sum();
        transition.extend(row.into_iter().map(|p| p / total));
    }
    let reward = (0..ns * na).map(|_| rng.random::<f64>()).collect();
    Mdp::new(ns, na, discount, transition, reward).expect("valid random MDP")
}

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// Nearest-rank percentile of an unsorted sample, `q` in (0, 1].
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
