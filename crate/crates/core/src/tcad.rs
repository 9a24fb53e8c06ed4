//! Ternary per-dimension action increments.

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

/// One SP's decision: client count, CPU frequency (Hz), bandwidth (Hz),
/// quantization level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub n: u32,
    pub f: f64,
    pub b: f64,
    pub q: u32,
}

/// Feasible box for actions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub n_max: u32,
    pub f_min: f64,
    pub f_max: f64,
    pub b_min: f64,
    pub b_max: f64,
    pub q_min: u32,
    pub q_max: u32,
}

/// Step sizes per dimension.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Granularity {
    pub n: u32,
    pub f: f64,
    pub b: f64,
    pub q: u32,
}

impl ActionBounds {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        ActionBounds {
            n_max: cfg.num_clients as u32,
            f_min: cfg.f_min,
            f_max: cfg.f_max,
            b_min: cfg.b_min,
            b_max: cfg.b_max,
            q_min: cfg.q_min,
            q_max: cfg.q_max,
        }
    }

    pub fn contains(&self, a: &Action) -> bool {
        (1..=self.n_max).contains(&a.n)
            && (self.f_min..=self.f_max).contains(&a.f)
            && (self.b_min..=self.b_max).contains(&a.b)
            && (self.q_min..=self.q_max).contains(&a.q)
    }

    /// Normalized encoding `(n/N, f/f_max, B/B_max, q/q_max)`.
    pub fn encode(&self, a: &Action) -> [f64; 4] {
        [
            f64::from(a.n) / f64::from(self.n_max),
            a.f / self.f_max,
            a.b / self.b_max,
            f64::from(a.q) / f64::from(self.q_max),
        ]
    }
}

impl Granularity {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Granularity { n: cfg.gran_n, f: cfg.gran_f, b: cfg.gran_b, q: cfg.gran_q }
    }
}

/// Episode-start action: half the clients, mid frequency, an equal share of
/// the bandwidth and the rounded mid quantization level.
pub fn initial_action(cfg: &ExperimentConfig) -> Action {
    Action {
        n: (cfg.num_clients as u32).div_ceil(2),
        f: 0.5 * (cfg.f_min + cfg.f_max),
        b: cfg.b_max / cfg.num_sps as f64,
        q: (f64::from(cfg.q_min + cfg.q_max) / 2.0).round() as u32,
    }
}

/// Increments in `{-1, 0, +1}` for (n, f, B, q).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TernaryDelta(pub [i8; 4]);

impl TernaryDelta {
    pub const ZERO: TernaryDelta = TernaryDelta([0; 4]);

    /// Position in [`enumerate_deltas`] order.
    pub fn index(&self) -> usize {
        self.0.iter().fold(0, |acc, &d| acc * 3 + (d + 1) as usize)
    }

    pub fn from_index(mut idx: usize) -> Self {
        assert!(idx < DELTA_COUNT, "delta index {idx} out of range");
        let mut d = [0i8; 4];
        for slot in d.iter_mut().rev() {
            *slot = (idx % 3) as i8 - 1;
            idx /= 3;
        }
        TernaryDelta(d)
    }
}

pub const DELTA_COUNT: usize = 81;

/// All 81 deltas in lexicographic order with -1 < 0 < +1.
pub fn enumerate_deltas() -> Vec<TernaryDelta> {
    (0..DELTA_COUNT).map(TernaryDelta::from_index).collect()
}

fn step_int(x: u32, d: i8, step: u32, lo: u32, hi: u32) -> u32 {
    let moved = i64::from(x) + i64::from(d) * i64::from(step);
    moved.clamp(i64::from(lo), i64::from(hi)) as u32
}

/// Moves each dimension by `delta * step` and clamps into the bounds.
pub fn apply_delta(a: &Action, delta: TernaryDelta, gran: &Granularity, bounds: &ActionBounds) -> Action {
    let [dn, df, db, dq] = delta.0;
    Action {
        n: step_int(a.n, dn, gran.n, 1, bounds.n_max),
        f: (a.f + f64::from(df) * gran.f).clamp(bounds.f_min, bounds.f_max),
        b: (a.b + f64::from(db) * gran.b).clamp(bounds.b_min, bounds.b_max),
        q: step_int(a.q, dq, gran.q, bounds.q_min, bounds.q_max),
    }
}

/// Lazy iterator over every combination of one delta per opponent, in
/// odometer order with the first opponent most significant.
#[derive(Clone, Debug)]
pub struct JointDeltas {
    digits: Vec<usize>,
    done: bool,
}

pub fn enumerate_joint(opponents: usize) -> JointDeltas {
    JointDeltas { digits: vec![0; opponents], done: opponents == 0 }
}

/// Number of opponent joint deltas, `81^opponents`.
pub fn joint_count(opponents: usize) -> u64 {
    (DELTA_COUNT as u64).pow(opponents as u32)
}

impl Iterator for JointDeltas {
    type Item = Vec<TernaryDelta>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let out = self.digits.iter().map(|&i| TernaryDelta::from_index(i)).collect();
        let mut pos = self.digits.len();
        loop {
            if pos == 0 {
                self.done = true;
                break;
            }
            pos -= 1;
            self.digits[pos] += 1;
            if self.digits[pos] < DELTA_COUNT {
                break;
            }
            self.digits[pos] = 0;
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::{HashSet, VecDeque};

    fn bounds() -> ActionBounds {
        ActionBounds { n_max: 5, f_min: 0.5e9, f_max: 3.5e9, b_min: 0.0, b_max: 30e6, q_min: 2, q_max: 32 }
    }

    fn gran() -> Granularity {
        Granularity { n: 1, f: 0.5e9, b: 2e6, q: 4 }
    }

    #[test]
    fn worked_example() {
        let a = Action { n: 3, f: 2e9, b: 10e6, q: 8 };
        let out = apply_delta(&a, TernaryDelta([1, -1, 1, 0]), &gran(), &bounds());
        assert_eq!(out, Action { n: 4, f: 1.5e9, b: 12e6, q: 8 });
    }

    #[test]
    fn clamps_and_identity() {
        let a = Action { n: 5, f: 3.5e9, b: 30e6, q: 32 };
        assert_eq!(apply_delta(&a, TernaryDelta([1, 1, 1, 1]), &gran(), &bounds()), a);
        assert_eq!(apply_delta(&a, TernaryDelta::ZERO, &gran(), &bounds()), a);
        let low = Action { n: 1, f: 0.5e9, b: 1e6, q: 3 };
        let out = apply_delta(&low, TernaryDelta([-1, -1, -1, -1]), &gran(), &bounds());
        assert_eq!(out, Action { n: 1, f: 0.5e9, b: 0.0, q: 2 });
    }

    #[test]
    fn delta_enumeration() {
        let all = enumerate_deltas();
        assert_eq!(all.len(), 81);
        assert_eq!(all[0], TernaryDelta([-1; 4]));
        assert_eq!(all[80], TernaryDelta([1; 4]));
        assert_eq!(all[40], TernaryDelta::ZERO);
        assert_eq!(all.iter().collect::<HashSet<_>>().len(), 81);
        for (i, d) in all.iter().enumerate() {
            assert_eq!(d.index(), i);
        }
        // Lexicographic order.
        for w in all.windows(2) {
            assert!(w[0].0 < w[1].0);
        }
    }

    #[test]
    fn joint_counts() {
        assert_eq!(enumerate_joint(1).count(), 81);
        assert_eq!(enumerate_joint(2).count(), 6561);
        assert_eq!(enumerate_joint(3).count(), 531_441);
        assert_eq!(joint_count(3), 531_441);
        let mut it = enumerate_joint(2);
        assert_eq!(it.next().unwrap(), vec![TernaryDelta([-1; 4]); 2]);
        assert_eq!(it.next().unwrap()[1], TernaryDelta::from_index(1));
    }

    #[test]
    fn naive_three_level_space_matches() {
        // Three levels in each of four dimensions.
        assert_eq!(3usize.pow(4), enumerate_deltas().len());
    }

    #[test]
    fn initial_action_defaults() {
        let cfg = ExperimentConfig::default();
        let a = initial_action(&cfg);
        assert_eq!(a, Action { n: 3, f: 2e9, b: 10e6, q: 17 });
        assert!(ActionBounds::from_config(&cfg).contains(&a));
    }

    #[test]
    fn lattice_connectivity() {
        // Small grid: every lattice point is reachable from every other by BFS.
        let b = ActionBounds { n_max: 3, f_min: 1.0, f_max: 3.0, b_min: 0.0, b_max: 2.0, q_min: 2, q_max: 6 };
        let g = Granularity { n: 1, f: 1.0, b: 1.0, q: 2 };
        let key = |a: &Action| (a.n, a.f as i64, a.b as i64, a.q);
        let start = Action { n: 1, f: 1.0, b: 0.0, q: 2 };
        let mut seen = HashSet::from([key(&start)]);
        let mut queue = VecDeque::from([start]);
        while let Some(a) = queue.pop_front() {
            for d in enumerate_deltas() {
                let next = apply_delta(&a, d, &g, &b);
                if seen.insert(key(&next)) {
                    queue.push_back(next);
                }
            }
        }
        // 3 * 3 * 3 * 3 lattice points.
        assert_eq!(seen.len(), 81);
    }

    proptest! {
        #[test]
        fn stays_in_bounds(n in 1u32..=5, f in 0.5e9f64..3.5e9, bw in 0.0f64..30e6, q in 2u32..=32, idx in 0usize..81) {
            let a = Action { n, f, b: bw, q };
            let out = apply_delta(&a, TernaryDelta::from_index(idx), &gran(), &bounds());
            prop_assert!(bounds().contains(&out));
        }

        #[test]
        fn repeated_increase_saturates(n in 1u32..=5, f in 0.5e9f64..3.5e9, bw in 0.0f64..30e6, q in 2u32..=32) {
            let mut a = Action { n, f, b: bw, q };
            for _ in 0..40 {
                a = apply_delta(&a, TernaryDelta([1; 4]), &gran(), &bounds());
            }
            prop_assert_eq!(a, Action { n: 5, f: 3.5e9, b: 30e6, q: 32 });
            prop_assert_eq!(apply_delta(&a, TernaryDelta([1; 4]), &gran(), &bounds()), a);
        }
    }
}
