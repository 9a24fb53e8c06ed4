//! Finite two-agent stochastic games and the Pareto-family Bellman operators
//! acting on joint Q-tables.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Two-agent finite stochastic game. Joint actions are indexed
/// `a0 * actions[1] + a1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteGame {
    pub states: usize,
    pub actions: [usize; 2],
    /// `rewards[agent][state][joint]`.
    pub rewards: [Vec<Vec<f64>>; 2],
    /// `transitions[state][joint][next]`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub gamma: f64,
}

impl FiniteGame {
    pub fn joint_count(&self) -> usize {
        self.actions[0] * self.actions[1]
    }

    pub fn joint_index(&self, a0: usize, a1: usize) -> usize {
        a0 * self.actions[1] + a1
    }

    /// Own and opponent action of `agent` within a joint index.
    pub fn split(&self, agent: usize, joint: usize) -> (usize, usize) {
        let (a0, a1) = (joint / self.actions[1], joint % self.actions[1]);
        if agent == 0 {
            (a0, a1)
        } else {
            (a1, a0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joint_count();
        if self.states == 0 || j == 0 {
            return Err(Error::InvalidConfig("game needs at least one state and action".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig("gamma outside [0, 1)".into()));
        }
        for r in &self.rewards {
            if r.len() != self.states || r.iter().any(|row| row.len() != j) {
                return Err(Error::Mismatch("reward tensor shape".into()));
            }
        }
        if self.transitions.len() != self.states {
            return Err(Error::Mismatch("transition kernel shape".into()));
        }
        for (s, rows) in self.transitions.iter().enumerate() {
            if rows.len() != j {
                return Err(Error::Mismatch("transition kernel shape".into()));
            }
            for row in rows {
                if row.len() != self.states || row.iter().any(|&p| p < 0.0) {
                    return Err(Error::Mismatch(format!("transition row in state {s}")));
                }
                if (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return Err(Error::Mismatch(format!("transition row in state {s} does not sum to 1")));
                }
            }
        }
        Ok(())
    }

    /// Repeated matrix game with a shared payoff.
    pub fn repeated_team(payoff: &[Vec<f64>], gamma: f64) -> Self {
        let rows = payoff.len();
        let cols = payoff[0].len();
        let flat: Vec<f64> = payoff.iter().flatten().copied().collect();
        // Agent 1 sees the transposed matrix through `split`, so both agents
        // read the same joint reward.
        Self {
            states: 1,
            actions: [rows, cols],
            rewards: [vec![flat.clone()], vec![flat]],
            transitions: vec![vec![vec![1.0]; rows * cols]],
            gamma,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let game: Self = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        game.validate()?;
        Ok(game)
    }
}

/// `Q_r(s, own, opp)` for both agents, stored flat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTableJoint {
    pub states: usize,
    pub actions: [usize; 2],
    pub tables: [Vec<f64>; 2],
}

impl QTableJoint {
    pub fn zeros(game: &FiniteGame) -> Self {
        let len = game.states * game.joint_count();
        Self { states: game.states, actions: game.actions, tables: [vec![0.0; len], vec![0.0; len]] }
    }

    pub fn random(game: &FiniteGame, scale: f64, rng: &mut Rng) -> Self {
        let mut q = Self::zeros(game);
        for t in &mut q.tables {
            for v in t.iter_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
        q
    }

    fn own_count(&self, agent: usize) -> usize {
        self.actions[agent]
    }

    fn opp_count(&self, agent: usize) -> usize {
        self.actions[1 - agent]
    }

    pub fn index(&self, agent: usize, s: usize, own: usize, opp: usize) -> usize {
        (s * self.own_count(agent) + own) * self.opp_count(agent) + opp
    }

    pub fn get(&self, agent: usize, s: usize, own: usize, opp: usize) -> f64 {
        self.tables[agent][self.index(agent, s, own, opp)]
    }

    fn state_slice(&self, agent: usize, s: usize) -> &[f64] {
        let n = self.own_count(agent) * self.opp_count(agent);
        &self.tables[agent][s * n..(s + 1) * n]
    }

    pub fn sup_distance(&self, other: &Self) -> f64 {
        self.tables
            .iter()
            .zip(&other.tables)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn max_entry(&self) -> f64 {
        self.tables.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn check(&self, game: &FiniteGame) -> Result<()> {
        let len = game.states * game.joint_count();
        for t in &self.tables {
            if t.len() != len || self.actions != game.actions || self.states != game.states {
                return Err(Error::ShapeMismatch { expected: len, got: t.len() });
            }
        }
        Ok(())
    }
}

/// Which next-state own action the Pareto target maximizes over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Own action held at its current value; max over the opponent only.
    Literal,
    /// Max over the full joint action.
    JointMax,
}

/// Backup operators on [`QTableJoint`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Operator {
    Pareto(Variant),
    Expectile { variant: Variant, tau: f64 },
    /// Max over own action of the min over the opponent's.
    Pessimistic,
}

impl Operator {
    /// Continuation value of `next` for `agent` when its current own action
    /// is `own`.
    fn continuation(&self, q: &QTableJoint, agent: usize, next: usize, own: usize) -> f64 {
        let slice = q.state_slice(agent, next);
        let opp_n = q.opp_count(agent);
        let scope = |variant: Variant| -> &[f64] {
            match variant {
                Variant::Literal => &slice[own * opp_n..(own + 1) * opp_n],
                Variant::JointMax => slice,
            }
        };
        let max = |v: &[f64], f: fn(f64) -> f64| v.iter().map(|&x| f(x)).fold(f64::NEG_INFINITY, f64::max);
        match *self {
            Operator::Pareto(v) => max(scope(v), |x| x),
            Operator::Expectile { variant, tau } => {
                let s = scope(variant);
                tau * max(s, |x| x.max(0.0)) + (1.0 - tau) * max(s, |x| x.min(0.0))
            }
            Operator::Pessimistic => slice
                .chunks(opp_n)
                .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn apply(&self, game: &FiniteGame, q: &QTableJoint) -> Result<QTableJoint> {
        q.check(game)?;
        let mut out = q.clone();
        for agent in 0..2 {
            for s in 0..game.states {
                for joint in 0..game.joint_count() {
                    let (own, opp) = game.split(agent, joint);
                    out.tables[agent][q.index(agent, s, own, opp)] = self.backup(game, q, agent, s, joint, None);
                }
            }
        }
        Ok(out)
    }

    /// Expected (or, with `next`, sampled) one-step target.
    fn backup(&self, game: &FiniteGame, q: &QTableJoint, agent: usize, s: usize, joint: usize, next: Option<usize>) -> f64 {
        let (own, _) = game.split(agent, joint);
        let reward = game.rewards[agent][s][joint];
        if game.gamma == 0.0 {
            return reward;
        }
        let future = match next {
            Some(n) => self.continuation(q, agent, n, own),
            None => game.transitions[s][joint]
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(n, &p)| p * self.continuation(q, agent, n, own))
                .sum(),
        };
        reward + game.gamma * future
    }
}

pub fn pareto_apply(game: &FiniteGame, q: &QTableJoint, variant: Variant) -> Result<QTableJoint> {
    Operator::Pareto(variant).apply(game, q)
}

/// Expectile backup over the joint maximum.
pub fn expectile_pareto_apply(game: &FiniteGame, q: &QTableJoint, tau: f64) -> Result<QTableJoint> {
    Operator::Expectile { variant: Variant::JointMax, tau }.apply(game, q)
}

/// Largest observed `‖HQ1 − HQ2‖ / ‖Q1 − Q2‖` over random table pairs.
pub fn contraction_probe(game: &FiniteGame, op: Operator, trials: usize, rng: &mut Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..trials.max(1) {
        let q1 = QTableJoint::random(game, 10.0, rng);
        let q2 = QTableJoint::random(game, 10.0, rng);
        let d = q1.sup_distance(&q2);
        if d == 0.0 {
            continue;
        }
        let h = op.apply(game, &q1)?.sup_distance(&op.apply(game, &q2)?);
        worst = worst.max(h / d);
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPoint {
    pub q: QTableJoint,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

pub fn iterate_to_fixed_point(game: &FiniteGame, op: Operator, q0: QTableJoint, tol: f64, max_iters: usize) -> Result<FixedPoint> {
    let mut q = q0;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iters {
        let next = op.apply(game, &q)?;
        residual = next.sup_distance(&q);
        q = next;
        iterations += 1;
        if residual <= tol {
            break;
        }
    }
    Ok(FixedPoint { q, iterations, residual, converged: residual <= tol })
}

/// One sampled update of `agent`'s entry at `(s, joint)` toward
/// `reward + γ·continuation(next)`.
#[allow(clippy::too_many_arguments)]
pub fn async_q_update(
    game: &FiniteGame,
    q: &mut QTableJoint,
    op: Operator,
    agent: usize,
    s: usize,
    joint: usize,
    next: usize,
    alpha: f64,
) -> Result<()> {
    q.check(game)?;
    if agent > 1 || s >= game.states || joint >= game.joint_count() || next >= game.states {
        return Err(Error::IndexOutOfRange(format!("agent {agent}, state {s}, joint {joint}, next {next}")));
    }
    let target = op.backup(game, q, agent, s, joint, Some(next));
    let (own, opp) = game.split(agent, joint);
    let i = q.index(agent, s, own, opp);
    q.tables[agent][i] += alpha * (target - q.tables[agent][i]);
    Ok(())
}

pub fn sample_next(game: &FiniteGame, s: usize, joint: usize, rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let row = &game.transitions[s][joint];
    for (n, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return n;
        }
    }
    row.len() - 1
}

/// Round-robin sweeps over every (agent, state, joint) entry with
/// `α = visits^(-exponent)`, until `samples` updates are made.
pub fn run_async(game: &FiniteGame, op: Operator, samples: usize, exponent: f64, rng: &mut Rng) -> Result<QTableJoint> {
    let mut q = QTableJoint::zeros(game);
    let per_sweep = 2 * game.states * game.joint_count();
    let mut done = 0;
    let mut visits = 0.0f64;
    while done < samples {
        visits += 1.0;
        let alpha = visits.powf(-exponent);
        for agent in 0..2 {
            for s in 0..game.states {
                for joint in 0..game.joint_count() {
                    let next = sample_next(game, s, joint, rng);
                    async_q_update(game, &mut q, op, agent, s, joint, next, alpha)?;
                }
            }
        }
        done += per_sweep;
    }
    Ok(q)
}

/// Joint action each agent picks greedily in `state`: the optimistic
/// operators take the best joint entry, the pessimistic one the max-min row.
pub fn greedy_joint(q: &QTableJoint, op: Operator, state: usize) -> [usize; 2] {
    let mut pick = [0usize; 2];
    for (agent, slot) in pick.iter_mut().enumerate() {
        let slice = q.state_slice(agent, state);
        let opp_n = q.opp_count(agent);
        let score = |own: usize| -> f64 {
            let row = &slice[own * opp_n..(own + 1) * opp_n];
            match op {
                Operator::Pessimistic => row.iter().copied().fold(f64::INFINITY, f64::min),
                _ => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        };
        *slot = (0..q.own_count(agent)).fold(0, |best, a| if score(a) > score(best) { a } else { best });
    }
    pick
}

/// Single-state team game `[[10, 0], [0, 5]]`.
pub fn team_game(gamma: f64) -> FiniteGame {
    FiniteGame::repeated_team(&[vec![10.0, 0.0], vec![0.0, 5.0]], gamma)
}

/// Symmetric three-action coordination game: (a, a) pays 10 but pairing a
/// with b costs 20; (c, c) pays 5 and row c never pays below 0.
pub fn penalty_game(gamma: f64) -> FiniteGame {
    FiniteGame::repeated_team(
        &[vec![10.0, -20.0, 0.0], vec![-20.0, 2.0, 1.0], vec![0.0, 1.0, 5.0]],
        gamma,
    )
}

/// Two-state game with stochastic transitions and asymmetric rewards.
pub fn two_state_game(gamma: f64) -> FiniteGame {
    FiniteGame {
        states: 2,
        actions: [2, 2],
        rewards: [
            vec![vec![1.0, 0.0, 0.5, 2.0], vec![0.0, 3.0, 1.0, -1.0]],
            vec![vec![0.5, 1.0, 0.0, 2.0], vec![2.0, -1.0, 0.0, 1.0]],
        ],
        transitions: vec![
            vec![vec![0.9, 0.1], vec![0.3, 0.7], vec![0.5, 0.5], vec![0.2, 0.8]],
            vec![vec![0.4, 0.6], vec![1.0, 0.0], vec![0.1, 0.9], vec![0.6, 0.4]],
        ],
        gamma,
    }
}
