//! Learned opponent-action generator used in place of exhaustive search.
//!
//! The output is factorized: for each opponent, four independent softmax
//! heads over `{-1, 0, +1}`, one per action dimension.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{Mlp, Optimizer};
use crate::rng::Rng;
use crate::tcad::TernaryDelta;

/// One categorical distribution per (opponent, dimension).
pub type HeadProbs = Vec<[f64; 3]>;

pub fn softmax3(z: &[f64]) -> [f64; 3] {
    let m = z[0].max(z[1]).max(z[2]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp(), (z[2] - m).exp()];
    let s = e[0] + e[1] + e[2];
    [e[0] / s, e[1] / s, e[2] / s]
}

/// Softmax over consecutive triples of logits.
pub fn heads_from_logits(logits: &[f64]) -> HeadProbs {
    logits.chunks(3).map(softmax3).collect()
}

fn sample_index(p: &[f64; 3], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    if u < p[0] {
        0
    } else if u < p[0] + p[1] {
        1
    } else {
        2
    }
}

/// Draws one delta per group of four heads.
pub fn sample_deltas(heads: &[[f64; 3]], rng: &mut Rng) -> Vec<TernaryDelta> {
    heads
        .chunks(4)
        .map(|h| {
            let mut d = [0i8; 4];
            for (m, p) in h.iter().enumerate() {
                d[m] = sample_index(p, rng) as i8 - 1;
            }
            TernaryDelta(d)
        })
        .collect()
}

/// Per-head argmax; ties go to the zero delta, then to the lowest index.
pub fn argmax_deltas(heads: &[[f64; 3]]) -> Vec<TernaryDelta> {
    heads
        .chunks(4)
        .map(|h| {
            let mut d = [0i8; 4];
            for (m, p) in h.iter().enumerate() {
                let best = p[0].max(p[1]).max(p[2]);
                d[m] = if p[1] == best {
                    0
                } else if p[0] == best {
                    -1
                } else {
                    1
                };
            }
            TernaryDelta(d)
        })
        .collect()
}

/// Log-probability of `deltas` under factorized heads.
pub fn log_prob(heads: &[[f64; 3]], deltas: &[TernaryDelta]) -> f64 {
    deltas
        .iter()
        .enumerate()
        .flat_map(|(o, d)| d.0.iter().enumerate().map(move |(m, &v)| heads[4 * o + m][(v + 1) as usize].ln()))
        .sum()
}

pub fn kl3(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Running average of observed opponent deltas, kept strictly positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetEma {
    pub probs: HeadProbs,
    pub decay: f64,
    pub floor: f64,
}

impl TargetEma {
    pub fn uniform(opponents: usize, decay: f64) -> Self {
        TargetEma { probs: vec![[1.0 / 3.0; 3]; 4 * opponents], decay, floor: 1e-6 }
    }

    pub fn update(&mut self, observed: &[TernaryDelta]) {
        for (o, d) in observed.iter().enumerate() {
            for (m, &v) in d.0.iter().enumerate() {
                let p = &mut self.probs[4 * o + m];
                for (j, pj) in p.iter_mut().enumerate() {
                    let hit = if j as i8 - 1 == v { 1.0 } else { 0.0 };
                    *pj = self.decay * *pj + (1.0 - self.decay) * hit;
                    *pj = pj.max(self.floor);
                }
                let s: f64 = p.iter().sum();
                for pj in p.iter_mut() {
                    *pj /= s;
                }
            }
        }
    }
}

/// Generator network plus optimizer state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Generator {
    pub net: Mlp,
    pub opt: Optimizer,
    pub opponents: usize,
}

/// Output of [`generate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub heads: HeadProbs,
    pub deltas: Vec<TernaryDelta>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Sample,
    Greedy,
}

impl Generator {
    pub fn new(input_dim: usize, hidden: &[usize], opponents: usize, rng: &mut Rng) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(12 * opponents);
        let net = Mlp::new(&sizes, rng)?;
        let opt = Optimizer::adam(net.param_count());
        Ok(Generator { net, opt, opponents })
    }

    pub fn input(own: &[f64; 4], obs: &[f64], summary: &[f64]) -> Vec<f64> {
        let mut v = own.to_vec();
        v.extend_from_slice(obs);
        v.extend_from_slice(summary);
        v
    }

    pub fn heads(&self, input: &[f64]) -> Result<HeadProbs> {
        Ok(heads_from_logits(&self.net.forward(input)?))
    }
}

/// Opponent-delta distribution for one input, plus a sampled or argmax draw.
pub fn generate(gen: &Generator, input: &[f64], mode: Mode, rng: &mut Rng) -> Result<Generated> {
    let heads = gen.heads(input)?;
    let deltas = match mode {
        Mode::Sample => sample_deltas(&heads, rng),
        Mode::Greedy => argmax_deltas(&heads),
    };
    Ok(Generated { heads, deltas })
}

/// Compound loss `-E[Q] + chi * KL(gen || target)` with its gradient with
/// respect to the logits. The expectation is estimated from `samples` and
/// their critic values with the score-function estimator; the KL is exact.
pub fn generator_loss(
    heads: &[[f64; 3]],
    samples: &[Vec<TernaryDelta>],
    q_values: &[f64],
    target: &TargetEma,
    chi: f64,
) -> (f64, Vec<f64>) {
    let k = q_values.len() as f64;
    let mean_q = q_values.iter().sum::<f64>() / k;
    let mut grad = vec![0.0; heads.len() * 3];
    for (s, &qv) in samples.iter().zip(q_values) {
        let adv = qv - mean_q;
        for (o, d) in s.iter().enumerate() {
            for (m, &v) in d.0.iter().enumerate() {
                let h = 4 * o + m;
                for j in 0..3 {
                    let indicator = if j as i8 - 1 == v { 1.0 } else { 0.0 };
                    grad[3 * h + j] -= adv * (indicator - heads[h][j]) / k;
                }
            }
        }
    }
    let mut kl_total = 0.0;
    for (h, (p, t)) in heads.iter().zip(&target.probs).enumerate() {
        let kl = kl3(p, t);
        kl_total += kl;
        for j in 0..3 {
            grad[3 * h + j] += chi * p[j] * ((p[j] / t[j]).ln() - kl);
        }
    }
    (-mean_q + chi * kl_total, grad)
}

/// Both sides of the expected-value error bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub kl: f64,
    /// `|E_soft[Q] - max Q|`, the error already present in the softened target.
    pub slack: f64,
    pub holds: bool,
}

/// `softmax(q / temperature)`.
pub fn softened_argmax(q: &[f64], temperature: f64) -> Vec<f64> {
    let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = q.iter().map(|v| ((v - m) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Checks `|E_approx[Q] - max Q| <= c * sqrt(KL(approx || target)) + slack`.
pub fn kl_bound_check(q: &[f64], approx: &[f64], target: &[f64], c: f64) -> Result<BoundCheck> {
    if q.len() != approx.len() || q.len() != target.len() || q.is_empty() {
        return Err(Error::ShapeMismatch { expected: q.len(), got: approx.len().min(target.len()) });
    }
    let max_q = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_q = q.iter().cloned().fold(f64::INFINITY, f64::min);
    if c < max_q - min_q {
        return Err(Error::Mismatch(format!("constant {c} below Q range {}", max_q - min_q)));
    }
    let mut kl = 0.0;
    for (&a, &t) in approx.iter().zip(target) {
        if a > 0.0 {
            if t <= 0.0 {
                return Err(Error::SupportMismatch);
            }
            kl += a * (a / t).ln();
        }
    }
    let kl = kl.max(0.0);
    let expect = |p: &[f64]| p.iter().zip(q).map(|(a, b)| a * b).sum::<f64>();
    let lhs = (expect(approx) - max_q).abs();
    let slack = (expect(target) - max_q).abs();
    let rhs = c * kl.sqrt() + slack;
    Ok(BoundCheck { lhs, rhs, kl, slack, holds: lhs <= rhs })
}
