//! Small fully connected networks with hand-written backpropagation.
//!
//! Parameters live in one flat vector. Layer `l` stores its weight matrix
//! (`out x in`, row-major) followed by its bias. Hidden layers use ReLU and
//! the output layer is linear.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug)]
struct Cache {
    rows: usize,
    /// `acts[0]` is the input; `acts[l]` the output of layer `l - 1`.
    acts: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    #[serde(skip)]
    cache: Option<Cache>,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.sizes == other.sizes && self.params == other.params
    }
}

/// `c = a * b + beta * c` for row-major/strided operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

impl Mlp {
    /// Uniform `±sqrt(6 / (fan_in + fan_out))` weights, zero biases.
    pub fn new(sizes: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut net.params[off..off + fan_in * fan_out] {
                *p = rng.random_range(-limit..=limit);
            }
            off += (fan_in + 1) * fan_out;
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidConfig("network needs at least two layer sizes".into()));
        }
        if let Some(i) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::DegenerateDimension(i));
        }
        let count = sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
        Ok(Mlp { sizes: sizes.to_vec(), params: vec![0.0; count], cache: None })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.cache = None;
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch { expected: self.params.len(), got: params.len() });
        }
        self.params.copy_from_slice(params);
        self.cache = None;
        Ok(())
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.sizes.windows(2).take(layer).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Weight matrix (`out x in`, row-major) and bias of one layer.
    pub fn layer(&self, layer: usize) -> (&[f64], &[f64]) {
        let (fi, fo) = (self.sizes[layer], self.sizes[layer + 1]);
        let off = self.layer_offset(layer);
        let (w, rest) = self.params[off..].split_at(fi * fo);
        (w, &rest[..fo])
    }

    fn apply_layer(&self, layer: usize, x: &[f64], rows: usize) -> Vec<f64> {
        let (fi, fo) = (self.sizes[layer], self.sizes[layer + 1]);
        let (w, b) = self.layer(layer);
        let mut y = Vec::with_capacity(rows * fo);
        if fo == 1 {
            y.extend(x.chunks_exact(fi).map(|r| b[0] + r.iter().zip(w).map(|(a, v)| a * v).sum::<f64>()));
        } else {
            for _ in 0..rows {
                y.extend_from_slice(b);
            }
            gemm(rows, fi, fo, x, fi, 1, w, 1, fi, 1.0, &mut y, fo);
        }
        if layer + 1 < self.num_layers() {
            for v in &mut y {
                *v = v.max(0.0);
            }
        }
        y
    }

    fn check_input(&self, x: &[f64], rows: usize) -> Result<()> {
        let expected = rows * self.input_dim();
        if x.len() != expected {
            return Err(Error::ShapeMismatch { expected, got: x.len() });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_batch(x, 1)
    }

    /// Forward pass over `rows` inputs stored contiguously.
    pub fn forward_batch(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        self.check_input(x, rows)?;
        Ok(self.forward_tail(0, x, rows))
    }

    /// Runs layers `start..` on activations `h` that feed layer `start`.
    pub fn forward_tail(&self, start: usize, h: &[f64], rows: usize) -> Vec<f64> {
        if start == self.num_layers() {
            return h.to_vec();
        }
        let mut cur = self.apply_layer(start, h, rows);
        for l in start + 1..self.num_layers() {
            cur = self.apply_layer(l, &cur, rows);
        }
        cur
    }

    /// Forward pass that keeps the activations for [`Mlp::backward`].
    pub fn forward_train(&mut self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        self.check_input(x, rows)?;
        let mut acts = vec![x.to_vec()];
        for l in 0..self.num_layers() {
            let next = self.apply_layer(l, &acts[l], rows);
            acts.push(next);
        }
        let out = acts.last().unwrap().clone();
        self.cache = Some(Cache { rows, acts });
        Ok(out)
    }

    /// Gradients of `sum(upstream * output)` with respect to the parameters
    /// and the input, using the last [`Mlp::forward_train`] call.
    pub fn backward(&self, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardCache)?;
        let rows = cache.rows;
        let expected = rows * self.output_dim();
        if upstream.len() != expected {
            return Err(Error::ShapeMismatch { expected, got: upstream.len() });
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = upstream.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.layer_offset(l);
            let x = &cache.acts[l];
            let (gw, gb) = grads[off..off + (fi + 1) * fo].split_at_mut(fi * fo);
            gemm(fo, rows, fi, &delta, 1, fo, x, fi, 1, 0.0, gw, fi);
            for r in 0..rows {
                for (g, d) in gb.iter_mut().zip(&delta[r * fo..(r + 1) * fo]) {
                    *g += d;
                }
            }
            let (w, _) = self.layer(l);
            let mut dx = vec![0.0; rows * fi];
            gemm(rows, fo, fi, &delta, fo, 1, w, fi, 1, 0.0, &mut dx, fi);
            if l > 0 {
                for (d, a) in dx.iter_mut().zip(x) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            delta = dx;
        }
        Ok((grads, delta))
    }

    /// `self = rho * self + (1 - rho) * source`.
    pub fn polyak_from(&mut self, source: &Mlp, rho: f64) {
        for (t, s) in self.params.iter_mut().zip(&source.params) {
            *t = rho * *t + (1.0 - rho) * s;
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: Mlp = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        let fresh = Mlp::zeros(&net.sizes)?;
        if fresh.params.len() != net.params.len() {
            return Err(Error::ShapeMismatch { expected: fresh.params.len(), got: net.params.len() });
        }
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64, t: u64, m: Vec<f64>, v: Vec<f64> },
}

impl Optimizer {
    pub fn adam(params: usize) -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; params], v: vec![0.0; params] }
    }

    /// One descent step along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], rate: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch { expected: params.len(), got: grads.len() });
        }
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= rate * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps, t, m, v } => {
                if m.len() != params.len() {
                    return Err(Error::ShapeMismatch { expected: m.len(), got: params.len() });
                }
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t as i32);
                let c2 = 1.0 - beta2.powi(*t as i32);
                for i in 0..params.len() {
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * grads[i];
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * grads[i] * grads[i];
                    params[i] -= rate * (m[i] / c1) / ((v[i] / c2).sqrt() + *eps);
                }
            }
        }
        Ok(())
    }
}

/// Relative error used by the gradient checks.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Worst relative error between analytic and central-difference gradients of
/// `w . net(x)` over `checks` randomly chosen parameters.
pub fn gradient_check(net: &Mlp, x: &[f64], checks: usize, h: f64, rng: &mut Rng) -> Result<f64> {
    let rows = x.len() / net.input_dim();
    let mut work = net.clone();
    let out = work.forward_train(x, rows)?;
    let weights: Vec<f64> = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (grads, _) = work.backward(&weights)?;
    let objective = |n: &Mlp| -> Result<f64> {
        Ok(n.forward_batch(x, rows)?.iter().zip(&weights).map(|(a, b)| a * b).sum())
    };
    let mut worst = 0.0f64;
    for _ in 0..checks {
        let i = rng.random_range(0..net.param_count());
        let orig = work.params[i];
        work.params[i] = orig + h;
        let plus = objective(&work)?;
        work.params[i] = orig - h;
        let minus = objective(&work)?;
        work.params[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        // Skip draws whose ReLU pattern flips inside the stencil.
        if (numeric - grads[i]).abs() > 1e-3 * (1.0 + numeric.abs()) && near_kink(&work, x, rows, i, h) {
            continue;
        }
        worst = worst.max(relative_error(numeric, grads[i]));
    }
    Ok(worst)
}

fn near_kink(net: &Mlp, x: &[f64], rows: usize, i: usize, h: f64) -> bool {
    let mut a = net.clone();
    let mut b = net.clone();
    a.params[i] += h;
    b.params[i] -= h;
    let sign_pattern = |n: &mut Mlp| -> Vec<bool> {
        n.forward_train(x, rows).ok();
        let cache = n.cache.as_ref().unwrap();
        cache.acts[1..cache.acts.len() - 1].iter().flatten().map(|v| *v > 0.0).collect()
    };
    sign_pattern(&mut a) != sign_pattern(&mut b)
}
