//! Actor-critic agents with ternary actions, joint-action expectile critics
//! and opponent-action conjecture.

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::conjgen::{generator_loss, heads_from_logits, sample_deltas, Generator, TargetEma};
use crate::env::obs_dim;
use crate::error::{Error, Result};
use crate::neural::{Mlp, Optimizer};
use crate::rng::{rng_stream, Rng};
use crate::tcad::{apply_delta, initial_action, Action, ActionBounds, Granularity, TernaryDelta, DELTA_COUNT};

/// Per-dimension categorical distributions over `{-1, 0, +1}`.
pub type Heads = [[f64; 3]; 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMode {
    Sample,
    Greedy,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Actor {
    pub net: Mlp,
    pub opt: Optimizer,
}

fn to_heads(logits: &[f64]) -> Heads {
    let v = heads_from_logits(logits);
    [v[0], v[1], v[2], v[3]]
}

/// Probability of each of the 81 deltas under factorized heads.
pub fn joint_probs(h: &Heads) -> [f64; DELTA_COUNT] {
    let mut out = [0.0; DELTA_COUNT];
    for (k, p) in out.iter_mut().enumerate() {
        let d = TernaryDelta::from_index(k);
        *p = (0..4).map(|m| h[m][(d.0[m] + 1) as usize]).product();
    }
    out
}

impl Actor {
    pub fn new(obs_dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(12);
        let net = Mlp::new(&sizes, rng)?;
        let opt = Optimizer::adam(net.param_count());
        Ok(Actor { net, opt })
    }

    pub fn heads(&self, obs: &[f64]) -> Result<Heads> {
        Ok(to_heads(&self.net.forward(obs)?))
    }

    /// Draws (or takes the per-head mode of) a delta and its log-probability.
    pub fn select_action(&self, obs: &[f64], rng: &mut Rng, mode: SelectMode) -> Result<(TernaryDelta, f64)> {
        let h = self.heads(obs)?;
        let mut d = [0i8; 4];
        for m in 0..4 {
            let p = &h[m];
            d[m] = match mode {
                SelectMode::Sample => {
                    let u: f64 = rng.random();
                    if u < p[0] {
                        -1
                    } else if u < p[0] + p[1] {
                        0
                    } else {
                        1
                    }
                }
                SelectMode::Greedy => {
                    let best = p[0].max(p[1]).max(p[2]);
                    if p[1] == best {
                        0
                    } else if p[0] == best {
                        -1
                    } else {
                        1
                    }
                }
            };
        }
        let logp = (0..4).map(|m| h[m][(d[m] + 1) as usize].ln()).sum();
        Ok((TernaryDelta(d), logp))
    }
}

/// Gradient of `-mean_s [sum_a pi(a|s) (Q(s,a) - b(s)) + beta H(s)]` with
/// respect to the actor logits, where `b(s) = sum_a pi(a|s) Q(s,a)` and `H`
/// sums the four head entropies. `q` holds 81 values per state in delta order.
pub fn actor_logit_grad(logits: &[f64], q: &[f64], rows: usize, beta: f64) -> Vec<f64> {
    let mut up = vec![0.0; rows * 12];
    for r in 0..rows {
        let h = to_heads(&logits[r * 12..(r + 1) * 12]);
        let pi = joint_probs(&h);
        let qs = &q[r * DELTA_COUNT..(r + 1) * DELTA_COUNT];
        let baseline: f64 = pi.iter().zip(qs).map(|(p, v)| p * v).sum();
        let mut by_choice = [[0.0; 3]; 4];
        let mut total = 0.0;
        for k in 0..DELTA_COUNT {
            let w = pi[k] * (qs[k] - baseline);
            total += w;
            let d = TernaryDelta::from_index(k);
            for m in 0..4 {
                by_choice[m][(d.0[m] + 1) as usize] += w;
            }
        }
        for m in 0..4 {
            let ent: f64 = h[m].iter().map(|p| -p * p.max(1e-300).ln()).sum();
            for j in 0..3 {
                let p = h[m][j];
                let g = by_choice[m][j] - p * total;
                let g_ent = -p * (p.max(1e-300).ln() + ent);
                up[r * 12 + 3 * m + j] = -(g + beta * g_ent) / rows as f64;
            }
        }
    }
    up
}

/// One ascent step of the actor on critic values for all 81 own deltas.
pub fn actor_step(actor: &mut Actor, obs: &[f64], rows: usize, q: &[f64], lr: f64, beta: f64) -> Result<()> {
    let logits = actor.net.forward_train(obs, rows)?;
    let up = actor_logit_grad(&logits, q, rows, beta);
    let (grads, _) = actor.net.backward(&up)?;
    actor.opt.step(actor.net.params_mut(), &grads, lr)
}

/// `mean(tau * max(d, 0)^2 + (1 - tau) * min(d, 0)^2)`.
pub fn expectile_loss(td: &[f64], tau: f64) -> f64 {
    td.iter().map(|&d| expectile_weight(d, tau) * d * d).sum::<f64>() / td.len() as f64
}

fn expectile_weight(d: f64, tau: f64) -> f64 {
    if d > 0.0 {
        tau
    } else {
        1.0 - tau
    }
}

/// Derivative of the per-sample expectile loss in `d`; zero at `d = 0`.
pub fn expectile_grad(d: f64, tau: f64) -> f64 {
    if d == 0.0 {
        0.0
    } else {
        2.0 * expectile_weight(d, tau) * d
    }
}

/// One expectile-regression step of `critic` toward `targets`. Returns the
/// loss before the step.
pub fn critic_step(
    critic: &mut Mlp,
    opt: &mut Optimizer,
    inputs: &[f64],
    targets: &[f64],
    tau: f64,
    lr: f64,
) -> Result<f64> {
    let rows = targets.len();
    let q = critic.forward_train(inputs, rows)?;
    let td: Vec<f64> = targets.iter().zip(&q).map(|(y, v)| y - v).collect();
    let up: Vec<f64> = td.iter().map(|&d| -expectile_grad(d, tau) / rows as f64).collect();
    let (grads, _) = critic.backward(&up)?;
    opt.step(critic.params_mut(), &grads, lr)?;
    Ok(expectile_loss(&td, tau))
}

/// Best opponent joint action found for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct Conjecture {
    pub actions: Vec<Action>,
    pub deltas: Vec<TernaryDelta>,
    pub value: f64,
    pub evaluations: u64,
}

fn candidates(base: &Action, gran: &Granularity, bounds: &ActionBounds) -> Vec<Action> {
    (0..DELTA_COUNT).map(|k| apply_delta(base, TernaryDelta::from_index(k), gran, bounds)).collect()
}

fn advance(digits: &mut [usize]) -> bool {
    for d in digits.iter_mut().rev() {
        *d += 1;
        if *d < DELTA_COUNT {
            return true;
        }
        *d = 0;
    }
    false
}

/// Exhaustive argmax of `value` over every opponent joint delta applied to
/// `current`; ties keep the first in enumeration order.
pub fn conjecture_bruteforce<F: FnMut(&[Action]) -> f64>(
    current: &[Action],
    gran: &Granularity,
    bounds: &ActionBounds,
    mut value: F,
) -> Result<Conjecture> {
    if current.is_empty() {
        return Err(Error::EmptySelection);
    }
    let cands: Vec<Vec<Action>> = current.iter().map(|a| candidates(a, gran, bounds)).collect();
    let mut digits = vec![0usize; current.len()];
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut evaluations = 0u64;
    let mut joint = vec![current[0]; current.len()];
    loop {
        for (j, &d) in digits.iter().enumerate() {
            joint[j] = cands[j][d];
        }
        let v = value(&joint);
        evaluations += 1;
        if best.as_ref().is_none_or(|(b, _)| v > *b) {
            best = Some((v, digits.clone()));
        }
        if !advance(&mut digits) {
            break;
        }
    }
    let (value, digits) = best.unwrap();
    Ok(Conjecture {
        actions: digits.iter().enumerate().map(|(j, &d)| cands[j][d]).collect(),
        deltas: digits.iter().map(|&d| TernaryDelta::from_index(d)).collect(),
        value,
        evaluations,
    })
}

/// Critic input `[obs, own, opponents...]` with actions normalized.
pub fn critic_input(obs: &[f64], own: &Action, opps: &[Action], bounds: &ActionBounds) -> Vec<f64> {
    let mut v = obs.to_vec();
    v.extend_from_slice(&bounds.encode(own));
    for a in opps {
        v.extend_from_slice(&bounds.encode(a));
    }
    v
}

const CHUNK_ROWS: usize = 729;

/// [`conjecture_bruteforce`] specialised to an MLP critic.
///
/// The first layer's pre-activation splits into a part fixed by `(obs, own)`
/// and one 81-row table per opponent, so each joint candidate costs one sum
/// of table rows before the remaining layers run in batches.
pub fn conjecture_critic(
    critic: &Mlp,
    obs: &[f64],
    own: &Action,
    current: &[Action],
    gran: &Granularity,
    bounds: &ActionBounds,
) -> Result<Conjecture> {
    if current.is_empty() {
        return Err(Error::EmptySelection);
    }
    let fixed = critic_input(obs, own, &[], bounds);
    let input_dim = fixed.len() + 4 * current.len();
    if input_dim != critic.input_dim() {
        return Err(Error::ShapeMismatch { expected: critic.input_dim(), got: input_dim });
    }
    let (w, b) = critic.layer(0);
    let hidden = b.len();
    let base: Vec<f64> = (0..hidden)
        .map(|i| b[i] + w[i * input_dim..i * input_dim + fixed.len()].iter().zip(&fixed).map(|(a, x)| a * x).sum::<f64>())
        .collect();
    let cands: Vec<Vec<Action>> = current.iter().map(|a| candidates(a, gran, bounds)).collect();
    let tables: Vec<Vec<f64>> = cands
        .iter()
        .enumerate()
        .map(|(j, cs)| {
            let off = fixed.len() + 4 * j;
            let mut t = Vec::with_capacity(DELTA_COUNT * hidden);
            for c in cs {
                let e = bounds.encode(c);
                for i in 0..hidden {
                    let row = &w[i * input_dim + off..i * input_dim + off + 4];
                    t.push(row[0] * e[0] + row[1] * e[1] + row[2] * e[2] + row[3] * e[3]);
                }
            }
            t
        })
        .collect();
    let linear_only = critic.num_layers() == 1;
    let mut digits = vec![0usize; current.len()];
    let width = current.len();
    let mut chunk_digits: Vec<usize> = Vec::with_capacity(CHUNK_ROWS * width);
    let mut h1 = Vec::with_capacity(CHUNK_ROWS * hidden);
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut evaluations = 0u64;
    let mut more = true;
    while more {
        chunk_digits.clear();
        h1.clear();
        while more && chunk_digits.len() < CHUNK_ROWS * width {
            let start = h1.len();
            h1.extend_from_slice(&base);
            for (j, &d) in digits.iter().enumerate() {
                let row = &tables[j][d * hidden..(d + 1) * hidden];
                for (h, t) in h1[start..].iter_mut().zip(row) {
                    *h += t;
                }
            }
            if !linear_only {
                for h in &mut h1[start..] {
                    *h = h.max(0.0);
                }
            }
            chunk_digits.extend_from_slice(&digits);
            more = advance(&mut digits);
        }
        let rows = chunk_digits.len() / width;
        let out = if linear_only { h1.clone() } else { critic.forward_tail(1, &h1, rows) };
        evaluations += rows as u64;
        for (v, d) in out.iter().zip(chunk_digits.chunks_exact(width)) {
            if best.as_ref().is_none_or(|(b, _)| *v > *b) {
                best = Some((*v, d.to_vec()));
            }
        }
        if cfg!(debug_assertions) {
            let top = best.as_ref().unwrap().0;
            debug_assert!(out.iter().all(|v| *v <= top));
        }
    }
    let (value, digits) = best.unwrap();
    Ok(Conjecture {
        actions: digits.iter().enumerate().map(|(j, &d)| cands[j][d]).collect(),
        deltas: digits.iter().map(|&d| TernaryDelta::from_index(d)).collect(),
        value,
        evaluations,
    })
}

/// One provider's step record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub next_obs: Vec<f64>,
    /// Own action before this step's delta.
    pub prev_own: Action,
    pub own: Action,
    pub delta: TernaryDelta,
    /// Opponents' actions before and after their deltas.
    pub prev_opps: Vec<Action>,
    pub opps: Vec<Action>,
    pub reward: f64,
    pub done: bool,
}

/// FIFO store of whole episodes.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    episodes: VecDeque<Vec<T>>,
    capacity: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { episodes: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn push(&mut self, episode: Vec<T>) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Up to `k` distinct episodes chosen uniformly.
    pub fn sample(&self, k: usize, rng: &mut Rng) -> Vec<&Vec<T>> {
        let k = k.min(self.episodes.len());
        sample_indices(rng, self.episodes.len(), k).into_iter().map(|i| &self.episodes[i]).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<T>> {
        self.episodes.iter()
    }
}

/// One step of the state-driven expectile schedule.
pub fn adapt_tau(tau: f64, accuracy: f64, threshold: f64, inc: f64, dec: f64, bounds: [f64; 2]) -> f64 {
    if accuracy < threshold {
        (tau + inc).min(bounds[1])
    } else {
        (tau - dec).max(bounds[0])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Exhaustive conjecture over opponent deltas.
    Pac,
    /// Conjecture sampled from a learned generator.
    PacP,
    /// Critic sees only its own action.
    Independent,
}

/// Hyperparameters shared by all agents of a run.
#[derive(Clone, Debug)]
pub struct Settings {
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub generator_lr: f64,
    pub polyak: f64,
    pub reward_scale: f64,
    pub chi: f64,
    pub samples: usize,
    pub updates: usize,
    pub entropy: f64,
    pub gran: Granularity,
    pub bounds: ActionBounds,
}

impl Settings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let a = &cfg.agent;
        Settings {
            gamma: cfg.discount,
            actor_lr: cfg.actor_lr,
            critic_lr: cfg.critic_lr,
            generator_lr: a.generator_lr,
            polyak: a.polyak,
            reward_scale: a.reward_scale,
            chi: a.chi,
            samples: a.generator_samples,
            updates: a.updates_per_batch.max(1),
            entropy: a.entropy_coef,
            gran: Granularity::from_config(cfg),
            bounds: ActionBounds::from_config(cfg),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Agent {
    pub sp: usize,
    pub variant: Variant,
    pub actor: Actor,
    pub critic: Mlp,
    pub target: Mlp,
    pub critic_opt: Optimizer,
    pub generator: Option<Generator>,
    pub ema: Option<TargetEma>,
    pub tau: f64,
    /// Critic evaluations spent on conjecture so far.
    pub evaluations: u64,
}

/// Diagnostics from one training batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub mean_q: f64,
    pub evaluations: u64,
}

/// Normalized `(n, q, B)` of each opponent.
pub fn opponent_summary(opps: &[Action], bounds: &ActionBounds) -> Vec<f64> {
    opps.iter()
        .flat_map(|a| {
            let e = bounds.encode(a);
            [e[0], e[3], e[2]]
        })
        .collect()
}

/// Sign of each dimension's change, used as the observed opponent delta.
pub fn observed_delta(before: &Action, after: &Action) -> TernaryDelta {
    let s = |x: f64| {
        if x > 0.0 {
            1
        } else if x < 0.0 {
            -1
        } else {
            0
        }
    };
    TernaryDelta([
        s(f64::from(after.n) - f64::from(before.n)),
        s(after.f - before.f),
        s(after.b - before.b),
        s(f64::from(after.q) - f64::from(before.q)),
    ])
}

impl Agent {
    pub fn new(cfg: &ExperimentConfig, sp: usize, variant: Variant, rng: &mut Rng) -> Result<Self> {
        let od = obs_dim(cfg.num_sps);
        let opponents = cfg.num_sps - 1;
        let actor = Actor::new(od, &cfg.agent.actor_hidden, rng)?;
        let critic_in = match variant {
            Variant::Independent => od + 4,
            _ => od + 4 * cfg.num_sps,
        };
        let mut sizes = vec![critic_in];
        sizes.extend_from_slice(&cfg.agent.critic_hidden);
        sizes.push(1);
        let critic = Mlp::new(&sizes, rng)?;
        let critic_opt = Optimizer::adam(critic.param_count());
        let (generator, ema) = if variant == Variant::PacP && opponents > 0 {
            let g = Generator::new(4 + od + 3 * opponents, &cfg.agent.generator_hidden, opponents, rng)?;
            (Some(g), Some(TargetEma::uniform(opponents, cfg.agent.ema_decay)))
        } else {
            (None, None)
        };
        Ok(Agent {
            sp,
            variant,
            actor,
            target: critic.clone(),
            critic,
            critic_opt,
            generator,
            ema,
            tau: cfg.services[sp].tau,
            evaluations: 0,
        })
    }

    fn uses_opponents(&self) -> bool {
        self.variant != Variant::Independent && self.critic.input_dim() > self.actor.net.input_dim() + 4
    }

    pub fn critic_row(&self, obs: &[f64], own: &Action, opps: &[Action], bounds: &ActionBounds) -> Vec<f64> {
        if self.uses_opponents() {
            critic_input(obs, own, opps, bounds)
        } else {
            critic_input(obs, own, &[], bounds)
        }
    }

    /// Opponent joint action maximizing `net` for `(obs, own)`, searched
    /// around `current`.
    pub fn conjecture(
        &self,
        net: &Mlp,
        obs: &[f64],
        own: &Action,
        current: &[Action],
        s: &Settings,
        rng: &mut Rng,
    ) -> Result<Conjecture> {
        if !self.uses_opponents() {
            let v = net.forward(&critic_input(obs, own, &[], &s.bounds))?[0];
            return Ok(Conjecture { actions: current.to_vec(), deltas: vec![], value: v, evaluations: 1 });
        }
        match &self.generator {
            None => conjecture_critic(net, obs, own, current, &s.gran, &s.bounds),
            Some(gen) => {
                let input = Generator::input(&s.bounds.encode(own), obs, &opponent_summary(current, &s.bounds));
                let heads = gen.heads(&input)?;
                let draws: Vec<Vec<TernaryDelta>> = (0..s.samples).map(|_| sample_deltas(&heads, rng)).collect();
                let joints: Vec<Vec<Action>> = draws
                    .iter()
                    .map(|ds| current.iter().zip(ds).map(|(a, d)| apply_delta(a, *d, &s.gran, &s.bounds)).collect())
                    .collect();
                let rows: Vec<f64> = joints.iter().flat_map(|j| critic_input(obs, own, j, &s.bounds)).collect();
                let vals = net.forward_batch(&rows, joints.len())?;
                let mut best = 0;
                for (i, v) in vals.iter().enumerate() {
                    if *v > vals[best] {
                        best = i;
                    }
                }
                Ok(Conjecture {
                    actions: joints[best].clone(),
                    deltas: draws[best].clone(),
                    value: vals[best],
                    evaluations: vals.len() as u64,
                })
            }
        }
    }

    /// Conjecture, critic, actor and generator updates on one batch.
    pub fn update(&mut self, batch: &[&Transition], s: &Settings, rng: &mut Rng) -> Result<UpdateStats> {
        if batch.is_empty() {
            return Err(Error::EmptySelection);
        }
        let n = batch.len();
        let mut evaluations = 0;
        let mut anchors = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for tr in batch {
            let c = self.conjecture(&self.critic, &tr.obs, &tr.own, &tr.prev_opps, s, rng)?;
            evaluations += c.evaluations;
            anchors.push(c.actions);
            let mut y = s.reward_scale * tr.reward;
            if !tr.done && s.gamma > 0.0 {
                let (d, _) = self.actor.select_action(&tr.next_obs, rng, SelectMode::Sample)?;
                let next_own = apply_delta(&tr.own, d, &s.gran, &s.bounds);
                let c = self.conjecture(&self.target, &tr.next_obs, &next_own, &tr.opps, s, rng)?;
                evaluations += c.evaluations;
                y += s.gamma * c.value;
            }
            targets.push(y);
        }
        self.evaluations += evaluations;
        let inputs: Vec<f64> = batch.iter().flat_map(|tr| self.critic_row(&tr.obs, &tr.own, &tr.opps, &s.bounds)).collect();
        let obs: Vec<f64> = batch.iter().flat_map(|tr| tr.obs.iter().copied()).collect();
        let mut stats = UpdateStats { evaluations, ..Default::default() };
        for _ in 0..s.updates {
            stats.critic_loss = critic_step(&mut self.critic, &mut self.critic_opt, &inputs, &targets, self.tau, s.critic_lr)?;
            self.target.polyak_from(&self.critic, s.polyak);
            let mut rows = Vec::with_capacity(n * DELTA_COUNT * self.critic.input_dim());
            for (tr, anchor) in batch.iter().zip(&anchors) {
                for k in 0..DELTA_COUNT {
                    let own = apply_delta(&tr.prev_own, TernaryDelta::from_index(k), &s.gran, &s.bounds);
                    rows.extend(self.critic_row(&tr.obs, &own, anchor, &s.bounds));
                }
            }
            let q = self.critic.forward_batch(&rows, n * DELTA_COUNT)?;
            stats.mean_q = q.iter().sum::<f64>() / q.len() as f64;
            actor_step(&mut self.actor, &obs, n, &q, s.actor_lr, s.entropy)?;
            if self.generator.is_some() {
                self.generator_step(batch, s, rng)?;
            }
        }
        Ok(stats)
    }

    fn generator_step(&mut self, batch: &[&Transition], s: &Settings, rng: &mut Rng) -> Result<()> {
        let (Some(gen), Some(ema)) = (self.generator.as_mut(), self.ema.as_ref()) else {
            return Ok(());
        };
        let inputs: Vec<f64> = batch
            .iter()
            .flat_map(|tr| Generator::input(&s.bounds.encode(&tr.own), &tr.obs, &opponent_summary(&tr.prev_opps, &s.bounds)))
            .collect();
        let logits = gen.net.forward_train(&inputs, batch.len())?;
        let width = gen.net.output_dim();
        let mut upstream = Vec::with_capacity(logits.len());
        for (r, tr) in batch.iter().enumerate() {
            let heads = heads_from_logits(&logits[r * width..(r + 1) * width]);
            let draws: Vec<Vec<TernaryDelta>> = (0..s.samples).map(|_| sample_deltas(&heads, rng)).collect();
            let rows: Vec<f64> = draws
                .iter()
                .flat_map(|ds| {
                    let joint: Vec<Action> =
                        tr.prev_opps.iter().zip(ds).map(|(a, d)| apply_delta(a, *d, &s.gran, &s.bounds)).collect();
                    critic_input(&tr.obs, &tr.own, &joint, &s.bounds)
                })
                .collect();
            let q = self.critic.forward_batch(&rows, draws.len())?;
            let (_, g) = generator_loss(&heads, &draws, &q, ema, s.chi);
            upstream.extend(g.into_iter().map(|v| v / batch.len() as f64));
        }
        let (grads, _) = gen.net.backward(&upstream)?;
        gen.opt.step(gen.net.params_mut(), &grads, s.generator_lr)
    }
}

/// Round-by-round driver for a team of learning agents.
pub struct Learner {
    pub agents: Vec<Agent>,
    pub replay: Vec<ReplayBuffer<Transition>>,
    pub settings: Settings,
    cfg: ExperimentConfig,
    current: Vec<Action>,
    pending: Vec<(Vec<Action>, Vec<TernaryDelta>)>,
    episode: Vec<Vec<Transition>>,
    rng: Rng,
    pub last_stats: Vec<UpdateStats>,
}

impl Learner {
    pub fn new(cfg: &ExperimentConfig, variant: Variant, seed: u64) -> Result<Self> {
        let mut init = rng_stream(seed, "agent-init");
        let agents = (0..cfg.num_sps).map(|r| Agent::new(cfg, r, variant, &mut init)).collect::<Result<Vec<_>>>()?;
        Ok(Learner {
            agents,
            replay: (0..cfg.num_sps).map(|_| ReplayBuffer::new(cfg.agent.replay_capacity)).collect(),
            settings: Settings::from_config(cfg),
            cfg: cfg.clone(),
            current: vec![initial_action(cfg); cfg.num_sps],
            pending: Vec::new(),
            episode: vec![Vec::new(); cfg.num_sps],
            rng: rng_stream(seed, "agent"),
            last_stats: Vec::new(),
        })
    }

    pub fn begin_episode(&mut self) -> Vec<Action> {
        self.current = vec![initial_action(&self.cfg); self.cfg.num_sps];
        for e in &mut self.episode {
            e.clear();
        }
        self.current.clone()
    }

    /// Samples each agent's delta and returns the joint absolute action.
    pub fn act(&mut self, obs: &[Vec<f64>], mode: SelectMode) -> Result<Vec<Action>> {
        let prev = self.current.clone();
        let mut deltas = Vec::with_capacity(self.agents.len());
        for (agent, o) in self.agents.iter().zip(obs) {
            deltas.push(agent.actor.select_action(o, &mut self.rng, mode)?.0);
        }
        self.current = prev
            .iter()
            .zip(&deltas)
            .map(|(a, d)| apply_delta(a, *d, &self.settings.gran, &self.settings.bounds))
            .collect();
        self.pending.push((prev, deltas));
        Ok(self.current.clone())
    }

    /// Stores the outcome of the last [`Learner::act`].
    pub fn record(&mut self, obs: &[Vec<f64>], next_obs: &[Vec<f64>], executed: &[Action], rewards: &[f64], done: bool) {
        let Some((prev, deltas)) = self.pending.pop() else {
            return;
        };
        // Executed bandwidths may have been scaled by the operator.
        self.current = executed.to_vec();
        let others = |v: &[Action], r: usize| -> Vec<Action> {
            v.iter().enumerate().filter(|&(j, _)| j != r).map(|(_, a)| *a).collect()
        };
        for r in 0..self.agents.len() {
            let prev_opps = others(&prev, r);
            let opps = others(executed, r);
            if let Some(ema) = self.agents[r].ema.as_mut() {
                let seen: Vec<TernaryDelta> = prev_opps.iter().zip(&opps).map(|(a, b)| observed_delta(a, b)).collect();
                ema.update(&seen);
            }
            self.episode[r].push(Transition {
                obs: obs[r].clone(),
                next_obs: next_obs[r].clone(),
                prev_own: prev[r],
                own: executed[r],
                delta: deltas[r],
                prev_opps,
                opps,
                reward: rewards[r],
                done,
            });
        }
    }

    /// Applies the expectile schedule when enabled.
    pub fn adapt(&mut self, accuracies: &[f64]) {
        let a = &self.cfg.agent;
        if !a.tau_adaptation {
            return;
        }
        for (agent, &acc) in self.agents.iter_mut().zip(accuracies) {
            agent.tau = adapt_tau(agent.tau, acc, a.tau_threshold, a.tau_step_inc, a.tau_step_dec, a.tau_bounds);
        }
    }

    /// Buffers the finished episode and trains once enough are stored.
    pub fn end_episode(&mut self) -> Result<()> {
        self.last_stats.clear();
        for r in 0..self.agents.len() {
            let ep = std::mem::take(&mut self.episode[r]);
            if !ep.is_empty() {
                self.replay[r].push(ep);
            }
        }
        let a = &self.cfg.agent;
        for r in 0..self.agents.len() {
            if self.replay[r].len() < a.train_start {
                continue;
            }
            let episodes = self.replay[r].sample(a.batch_episodes, &mut self.rng);
            let flat: Vec<&Transition> = episodes.into_iter().flatten().collect();
            let batch: Vec<&Transition> = if a.batch_transitions == 0 || a.batch_transitions >= flat.len() {
                flat
            } else {
                let mut idx: Vec<usize> = sample_indices(&mut self.rng, flat.len(), a.batch_transitions).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| flat[i]).collect()
            };
            let stats = self.agents[r].update(&batch, &self.settings, &mut self.rng)?;
            self.last_stats.push(stats);
        }
        Ok(())
    }

    /// Writes every agent to `dir/{run_id}_ep{episode}_sp{r}.json`.
    pub fn save_checkpoint(&self, dir: &Path, run_id: &str, episode: usize) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for a in &self.agents {
            let text = serde_json::to_string(a).map_err(|e| Error::Serde(e.to_string()))?;
            std::fs::write(dir.join(format!("{run_id}_ep{episode}_sp{}.json", a.sp)), text)?;
        }
        Ok(())
    }

    pub fn load_checkpoint(&mut self, dir: &Path, run_id: &str, episode: usize) -> Result<()> {
        for r in 0..self.agents.len() {
            let text = std::fs::read_to_string(dir.join(format!("{run_id}_ep{episode}_sp{r}.json")))?;
            self.agents[r] = serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
        }
        Ok(())
    }
}
