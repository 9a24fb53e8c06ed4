//! Hypervolume-based comparison of reward vectors and action-share sizes.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tcad::Action;

/// Reward vectors (one per run) of one algorithm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoSet {
    pub label: String,
    pub points: Vec<Vec<f64>>,
}

/// Per-dimension bounds over every set, checking equal lengths.
fn bounds(sets: &[ParetoSet]) -> Result<(Vec<f64>, Vec<f64>)> {
    let dim = sets
        .iter()
        .flat_map(|s| s.points.first())
        .map(Vec::len)
        .next()
        .ok_or(Error::EmptySelection)?;
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for p in sets.iter().flat_map(|s| &s.points) {
        if p.len() != dim {
            return Err(Error::ShapeMismatch { expected: dim, got: p.len() });
        }
        for d in 0..dim {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    Ok((lo, hi))
}

/// Min-max normalizes over the union of all sets, then maps each point to
/// `v_ref - v_norm` so larger rewards become smaller coordinates.
pub fn normalize_invert(sets: &[ParetoSet], v_ref: f64) -> Result<Vec<Vec<Vec<f64>>>> {
    let (lo, hi) = bounds(sets)?;
    if let Some(d) = (0..lo.len()).find(|&d| hi[d] <= lo[d]) {
        return Err(Error::DegenerateDimension(d));
    }
    Ok(invert_with(sets, &lo, &hi, v_ref))
}

/// Like [`normalize_invert`], but a dimension where every run scored the
/// same is treated as fully achieved (normalized value 1).
pub fn normalize_invert_lenient(sets: &[ParetoSet], v_ref: f64) -> Result<Vec<Vec<Vec<f64>>>> {
    let (lo, hi) = bounds(sets)?;
    Ok(invert_with(sets, &lo, &hi, v_ref))
}

fn invert_with(sets: &[ParetoSet], lo: &[f64], hi: &[f64], v_ref: f64) -> Vec<Vec<Vec<f64>>> {
    sets.iter()
        .map(|s| {
            s.points
                .iter()
                .map(|p| {
                    p.iter()
                        .enumerate()
                        .map(|(d, &v)| {
                            let norm = if hi[d] > lo[d] { (v - lo[d]) / (hi[d] - lo[d]) } else { 1.0 };
                            v_ref - norm
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn hv2(points: &[&[f64]], r: &[f64]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p[0], p[1])).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut area = 0.0;
    let mut y_cap = r[1];
    for (x, y) in pts {
        if y < y_cap {
            area += (r[0] - x) * (y_cap - y);
            y_cap = y;
        }
    }
    area
}

/// Volume dominated by `points` (minimization) and bounded by `reference`.
/// Exact for up to three dimensions.
pub fn hypervolume_exact(points: &[Vec<f64>], reference: &[f64]) -> Result<f64> {
    let dim = reference.len();
    if dim > 3 {
        return Err(Error::DimensionTooHigh(dim));
    }
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::ShapeMismatch { expected: dim, got: p.len() });
        }
        if p.iter().zip(reference).any(|(a, b)| a > b) {
            return Err(Error::BeyondReference(i));
        }
    }
    if points.is_empty() {
        return Ok(0.0);
    }
    Ok(match dim {
        0 => 0.0,
        1 => reference[0] - points.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min),
        2 => hv2(&points.iter().map(Vec::as_slice).collect::<Vec<_>>(), reference),
        _ => {
            let mut sorted: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
            sorted.sort_by(|a, b| a[2].total_cmp(&b[2]));
            let mut vol = 0.0;
            for i in 0..sorted.len() {
                let top = if i + 1 < sorted.len() { sorted[i + 1][2] } else { reference[2] };
                let depth = top - sorted[i][2];
                if depth > 0.0 {
                    vol += depth * hv2(&sorted[..=i], reference);
                }
            }
            vol
        }
    })
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

/// Uniform sampling over the box between the points' lower corner and the
/// reference.
pub fn hypervolume_mc(points: &[Vec<f64>], reference: &[f64], samples: usize, rng: &mut Rng) -> Estimate {
    if points.is_empty() || samples == 0 {
        return Estimate { value: 0.0, std_error: 0.0 };
    }
    let dim = reference.len();
    let lower: Vec<f64> = (0..dim).map(|d| points.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min)).collect();
    let box_vol: f64 = (0..dim).map(|d| (reference[d] - lower[d]).max(0.0)).product();
    if box_vol == 0.0 {
        return Estimate { value: 0.0, std_error: 0.0 };
    }
    let mut x = vec![0.0; dim];
    let mut hits = 0usize;
    for _ in 0..samples {
        for d in 0..dim {
            x[d] = rng.random_range(lower[d]..reference[d]);
        }
        if points.iter().any(|p| p.iter().zip(&x).all(|(a, b)| a <= b)) {
            hits += 1;
        }
    }
    let frac = hits as f64 / samples as f64;
    Estimate { value: box_vol * frac, std_error: box_vol * (frac * (1.0 - frac) / samples as f64).sqrt() }
}

/// HVI of every set after joint normalization, in input order.
pub fn hvi(sets: &[ParetoSet], v_ref: f64) -> Result<Vec<f64>> {
    let inverted = normalize_invert_lenient(sets, v_ref)?;
    let dim = inverted.iter().flat_map(|s| s.first()).map(Vec::len).next().unwrap_or(0);
    let reference = vec![v_ref; dim];
    inverted.iter().map(|pts| hypervolume_exact(pts, &reference)).collect()
}

/// Wire encoding of one provider's action share: `f` and `B` as 32-bit
/// floats, `n`, `q` and the provider id as 16-bit integers, little-endian.
pub fn encode_action(sp: u16, a: &Action) -> Vec<u8> {
    let mut out = Vec::with_capacity(14);
    out.extend_from_slice(&(a.f as f32).to_le_bytes());
    out.extend_from_slice(&(a.b as f32).to_le_bytes());
    out.extend_from_slice(&(a.n as u16).to_le_bytes());
    out.extend_from_slice(&(a.q as u16).to_le_bytes());
    out.extend_from_slice(&sp.to_le_bytes());
    out
}

pub fn action_payload_bytes(a: &Action) -> usize {
    encode_action(0, a).len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;
    use proptest::prelude::*;

    fn set(points: Vec<Vec<f64>>) -> ParetoSet {
        ParetoSet { label: "x".into(), points }
    }

    #[test]
    fn normalization_endpoints() {
        let out = normalize_invert(&[set(vec![vec![1.0, 5.0], vec![3.0, 9.0]])], 1.1).unwrap();
        assert_eq!(out[0][0], vec![1.1, 1.1]);
        assert!((out[0][1][0] - 0.1).abs() < 1e-15 && (out[0][1][1] - 0.1).abs() < 1e-15);
        let mid = normalize_invert(&[set(vec![vec![0.0, 0.0], vec![0.5, 0.5], vec![1.0, 1.0]])], 1.1).unwrap();
        assert!((mid[0][1][0] - 0.6).abs() < 1e-15);
        let mixed = normalize_invert(&[set(vec![vec![0.0, 1.0], vec![1.0, 0.0]])], 1.1).unwrap();
        assert!((mixed[0][1][0] - 0.1).abs() < 1e-15 && (mixed[0][1][1] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn degenerate_dimension_named() {
        let err = normalize_invert(&[set(vec![vec![1.0, 2.0], vec![3.0, 2.0]])], 1.1).unwrap_err();
        assert!(matches!(err, Error::DegenerateDimension(1)));
    }

    #[test]
    fn exact_fixtures() {
        let r = [1.1, 1.1];
        assert!((hypervolume_exact(&[vec![0.6, 0.6]], &r).unwrap() - 0.25).abs() < 1e-12);
        let two = vec![vec![0.3, 0.9], vec![0.9, 0.3]];
        assert!((hypervolume_exact(&two, &r).unwrap() - 0.28).abs() < 1e-12);
        let mut three = two.clone();
        three.push(vec![1.0, 1.0]);
        assert!((hypervolume_exact(&three, &r).unwrap() - 0.28).abs() < 1e-12);
        assert_eq!(hypervolume_exact(&[], &r).unwrap(), 0.0);
        assert!(matches!(hypervolume_exact(&[vec![1.2, 0.0]], &r), Err(Error::BeyondReference(0))));
        assert!(matches!(hypervolume_exact(&[vec![0.0; 4]], &[1.0; 4]), Err(Error::DimensionTooHigh(4))));
    }

    #[test]
    fn exact_3d_box_union() {
        // Two boxes of 0.5^3 overlapping in 0.5 * 0.5 * 0.2.
        let pts = vec![vec![0.0, 0.0, 0.5], vec![0.0, 0.0, 0.3]];
        let v = hypervolume_exact(&pts, &[0.5, 0.5, 1.0]).unwrap();
        assert!((v - 0.25 * 0.7).abs() < 1e-12);
        let pts = vec![vec![0.5, 0.0, 0.0], vec![0.0, 0.5, 0.0]];
        let v = hypervolume_exact(&pts, &[1.0, 1.0, 1.0]).unwrap();
        assert!((v - 0.75).abs() < 1e-12);
    }

    #[test]
    fn mc_fixture() {
        let two = vec![vec![0.3, 0.9], vec![0.9, 0.3]];
        let est = hypervolume_mc(&two, &[1.1, 1.1], 1_000_000, &mut rng_stream(1, "mc"));
        assert!((est.value - 0.28).abs() < 4.0 * est.std_error, "{est:?}");
        assert_eq!(hypervolume_mc(&[], &[1.1, 1.1], 10, &mut rng_stream(1, "mc")).value, 0.0);
    }

    #[test]
    fn action_share_size() {
        let a = Action { n: 3, f: 2e9, b: 10e6, q: 17 };
        assert_eq!(action_payload_bytes(&a), 14);
        assert!(14.0 / (21840.0 * 4.0) < 0.0002);
        assert_eq!(3 * action_payload_bytes(&a), 42);
    }

    #[test]
    fn single_point_hvi_is_one() {
        let h = hvi(&[set(vec![vec![3.0, 4.0, 5.0]])], 1.1).unwrap();
        assert!((h[0] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn adding_a_point_never_shrinks(
            pts in prop::collection::vec(prop::collection::vec(0.0f64..1.1, 3), 1..8),
            extra in prop::collection::vec(0.0f64..1.1, 3),
        ) {
            let r = [1.1; 3];
            let before = hypervolume_exact(&pts, &r).unwrap();
            let mut more = pts.clone();
            more.push(extra);
            prop_assert!(hypervolume_exact(&more, &r).unwrap() >= before - 1e-12);
        }

        #[test]
        fn hvi_scale_invariant(
            a in prop::collection::vec(prop::collection::vec(-50.0f64..150.0, 3), 2..6),
            b in prop::collection::vec(prop::collection::vec(-50.0f64..150.0, 3), 2..6),
            k in 0.01f64..100.0,
        ) {
            let sets = vec![set(a.clone()), set(b.clone())];
            let scale = |v: &Vec<Vec<f64>>| v.iter().map(|p| p.iter().map(|x| x * k).collect()).collect();
            let scaled = vec![set(scale(&a)), set(scale(&b))];
            let h1 = hvi(&sets, 1.1).unwrap();
            let h2 = hvi(&scaled, 1.1).unwrap();
            for (x, y) in h1.iter().zip(&h2) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
