//! Stochastic norm-scaled quantization and payload accounting.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// A vector quantized to `q` levels relative to its norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedVec {
    pub norm: f64,
    pub signs: Vec<i8>,
    pub levels: Vec<u32>,
    pub q: u32,
}

impl QuantizedVec {
    pub fn dim(&self) -> usize {
        self.levels.len()
    }
}

/// p-norm; `p = f64::INFINITY` gives the max norm.
pub fn p_norm(v: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        v.iter().fold(0.0, |m, x| m.max(x.abs()))
    } else if p == 2.0 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    } else {
        v.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

/// Quantizes with the 2-norm.
pub fn quantize(vec: &[f64], q: u32, rng: &mut Rng) -> Result<QuantizedVec> {
    quantize_p(vec, q, 2.0, rng)
}

/// Quantizes each element to `level / q` of the `p`-norm, rounding the
/// fractional part up with probability equal to it.
pub fn quantize_p(vec: &[f64], q: u32, p: f64, rng: &mut Rng) -> Result<QuantizedVec> {
    if q < 2 {
        return Err(Error::LevelTooSmall(q));
    }
    if let Some(i) = vec.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let norm = p_norm(vec, p);
    let dim = vec.len();
    if norm == 0.0 {
        return Ok(QuantizedVec { norm: 0.0, signs: vec![0; dim], levels: vec![0; dim], q });
    }
    let qf = f64::from(q);
    let mut signs = Vec::with_capacity(dim);
    let mut levels = Vec::with_capacity(dim);
    for &x in vec {
        let sign = if x > 0.0 {
            1
        } else if x < 0.0 {
            -1
        } else {
            0
        };
        let e = (x.abs() / norm).min(1.0);
        let level = if e >= 1.0 {
            q
        } else {
            let scaled = e * qf;
            let u = scaled.floor();
            let up = rng.random::<f64>() < scaled - u;
            (u as u32 + u32::from(up)).min(q)
        };
        signs.push(sign);
        levels.push(level);
    }
    Ok(QuantizedVec { norm, signs, levels, q })
}

pub fn dequantize(qv: &QuantizedVec) -> Vec<f64> {
    let scale = qv.norm / f64::from(qv.q);
    qv.signs
        .iter()
        .zip(&qv.levels)
        .map(|(&s, &l)| scale * f64::from(s) * f64::from(l))
        .collect()
}

/// Bits needed per element: magnitude level plus a sign bit.
pub fn bits_per_element(q: u32) -> u64 {
    u64::from(32 - (q - 1).leading_zeros()) + 1
}

/// Payload size of a quantized vector: per-element bits plus a 32-bit norm.
pub fn payload_bits(dim: usize, q: u32) -> u64 {
    dim as u64 * bits_per_element(q) + 32
}

/// Size of the same vector sent as 32-bit floats.
pub fn uncompressed_bits(dim: usize) -> u64 {
    32 * dim as u64
}
