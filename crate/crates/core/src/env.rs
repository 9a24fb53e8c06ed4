//! Multi-provider environment: one FL round per provider per step.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{db_to_linear, dbm_to_watts, ExperimentConfig};
use crate::error::{Error, Result};
use crate::fedcore::{aggregate, evaluate, local_update, partition, select_clients, ClientShard, SyntheticTask};
use crate::quantizer::{payload_bits, quantize};
use crate::rng::{rng_stream, Rng};
use crate::sysmodel::{comm_costs, energy_cmp, latency_cmp, round_totals, tx_rate, ClientCost, ClientProfile, RoundCosts};
use crate::tcad::{Action, ActionBounds};

/// Per-client settings after jitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientSetting {
    pub f: f64,
    pub q: u32,
    pub b: f64,
}

/// Draws each selected client's frequency and level around the action and
/// splits the bandwidth equally.
pub fn apply_action(
    a: &Action,
    clients: usize,
    jitter_q: f64,
    jitter_f: f64,
    bounds: &ActionBounds,
    rng: &mut Rng,
) -> Vec<ClientSetting> {
    let share = if clients == 0 { 0.0 } else { a.b / clients as f64 };
    (0..clients)
        .map(|_| {
            let f = if jitter_f > 0.0 {
                Normal::new(a.f, jitter_f).unwrap().sample(rng)
            } else {
                a.f
            };
            let q = if jitter_q > 0.0 {
                Normal::new(f64::from(a.q), jitter_q).unwrap().sample(rng).round()
            } else {
                f64::from(a.q)
            };
            ClientSetting {
                f: f.clamp(bounds.f_min, bounds.f_max),
                q: q.clamp(f64::from(bounds.q_min), f64::from(bounds.q_max)) as u32,
                b: share,
            }
        })
        .collect()
}

/// `n q / (eps vol + sum_j n_j q_j)` with `vol` in Mbits.
pub fn adversarial_factor(n: u32, q: u32, vol_mbits: f64, others: &[(u32, u32)], eps: f64) -> Result<f64> {
    let denom = eps * vol_mbits + others.iter().map(|&(n, q)| f64::from(n) * f64::from(q)).sum::<f64>();
    if denom <= 0.0 {
        return Err(Error::DegenerateAdversarial);
    }
    Ok(f64::from(n) * f64::from(q) / denom)
}

/// `sigma1 acc + sigma2 phi - sigma3 energy - sigma4 latency`.
pub fn reward(accuracy: f64, phi: f64, energy: f64, latency: f64, sigma: &[f64; 4]) -> f64 {
    sigma[0] * accuracy + sigma[1] * phi - sigma[2] * energy - sigma[3] * latency
}

/// Raw observation of one provider after a round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub n: u32,
    pub f: f64,
    pub q: u32,
    pub t_total: f64,
    pub e_total: f64,
    pub vol: f64,
    /// Bandwidth of every provider, in provider order.
    pub bandwidths: Vec<f64>,
}

/// Length of [`Env::encode`] output for `sps` providers.
pub fn obs_dim(sps: usize) -> usize {
    9 + sps
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub energy_cap: bool,
    pub latency_cap: bool,
    pub bandwidth_budget: bool,
    /// Zero bandwidth per client: nobody could upload this round.
    pub stalled: bool,
}

impl Flags {
    pub fn cap_violations(&self) -> u32 {
        u32::from(self.energy_cap) + u32::from(self.latency_cap)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpOutcome {
    pub obs: Observation,
    pub reward: f64,
    pub phi: f64,
    pub costs: RoundCosts,
    /// The action as executed, after any budget scaling.
    pub action: Action,
    pub flags: Flags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub outcomes: Vec<SpOutcome>,
    pub done: bool,
}

/// Scales bandwidths to fit `b_max` when their sum exceeds it.
pub fn enforce_budget(bandwidths: &mut [f64], b_min: f64, b_max: f64) -> bool {
    let sum: f64 = bandwidths.iter().sum();
    if sum > b_max {
        let k = b_max / sum;
        for b in bandwidths.iter_mut() {
            *b *= k;
        }
        true
    } else {
        sum < b_min
    }
}

pub struct Env {
    cfg: ExperimentConfig,
    seed: u64,
    bounds: ActionBounds,
    tasks: Vec<SyntheticTask>,
    shards: Vec<Vec<ClientShard>>,
    cycles: Vec<Vec<f64>>,
    clients: Vec<ClientProfile>,
    models: Vec<Vec<f64>>,
    last: Vec<(f64, f64)>,
    t: usize,
    rng: Rng,
}

impl Env {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut tasks = Vec::new();
        let mut shards = Vec::new();
        for (r, svc) in cfg.services.iter().enumerate() {
            let task = SyntheticTask::generate(&svc.task, seed, &format!("task/{r}"));
            let mut prng = rng_stream(seed, &format!("partition/{r}"));
            shards.push(partition(&task.train, task.classes, cfg.num_clients, cfg.non_iid_degree, &mut prng)?);
            tasks.push(task);
        }
        let mut crng = rng_stream(seed, "cycles");
        let cycles = (0..cfg.num_clients)
            .map(|_| {
                cfg.services
                    .iter()
                    .map(|s| {
                        let [lo, hi] = s.cycles_per_sample;
                        if hi > lo {
                            crng.random_range(lo..=hi)
                        } else {
                            lo
                        }
                    })
                    .collect()
            })
            .collect();
        let mut env = Env {
            bounds: ActionBounds::from_config(cfg),
            cfg: cfg.clone(),
            seed,
            tasks,
            shards,
            cycles,
            clients: Vec::new(),
            models: Vec::new(),
            last: Vec::new(),
            t: 0,
            rng: rng_stream(seed, "episode/0"),
        };
        env.sample_clients(0);
        Ok(env)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn bounds(&self) -> &ActionBounds {
        &self.bounds
    }

    pub fn tasks(&self) -> &[SyntheticTask] {
        &self.tasks
    }

    pub fn clients(&self) -> &[ClientProfile] {
        &self.clients
    }

    pub fn round(&self) -> usize {
        self.t
    }

    fn sample_clients(&mut self, episode: usize) {
        let cfg = &self.cfg;
        let mut rng = rng_stream(self.seed, &format!("channel/{episode}"));
        let mut uniform = |[lo, hi]: [f64; 2]| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        self.clients = (0..cfg.num_clients)
            .map(|i| ClientProfile {
                capacitance: cfg.capacitance,
                cycles_per_sample: self.cycles[i].clone(),
                dataset_size: cfg
                    .services
                    .iter()
                    .zip(&self.shards)
                    .map(|(s, sh)| s.cost_samples * cfg.num_clients as f64 * sh[i].weight)
                    .collect(),
                channel_gain: db_to_linear(uniform(cfg.channel_gain_db)),
                tx_power: dbm_to_watts(uniform(cfg.tx_power_dbm)),
                noise_density: dbm_to_watts(uniform(cfg.noise_dbm_per_hz)),
            })
            .collect();
    }

    /// Starts an episode: fresh models, new channel draws, round 0.
    pub fn reset(&mut self, episode: usize, actions: &[Action]) -> Result<Vec<Observation>> {
        self.check_actions(actions)?;
        self.sample_clients(episode);
        self.rng = rng_stream(self.seed, &format!("episode/{episode}"));
        self.t = 0;
        self.models = self.tasks.iter().map(|t| vec![0.0; t.model_dim()]).collect();
        self.last = self
            .tasks
            .iter()
            .zip(&self.models)
            .map(|(t, m)| evaluate(m, t.classes, &t.test))
            .collect::<Result<_>>()?;
        let bandwidths: Vec<f64> = actions.iter().map(|a| a.b).collect();
        Ok((0..self.cfg.num_sps)
            .map(|r| Observation {
                t: 0,
                loss: self.last[r].1,
                accuracy: self.last[r].0,
                n: actions[r].n,
                f: actions[r].f,
                q: actions[r].q,
                t_total: 0.0,
                e_total: 0.0,
                vol: 0.0,
                bandwidths: bandwidths.clone(),
            })
            .collect())
    }

    fn check_actions(&self, actions: &[Action]) -> Result<()> {
        if actions.len() != self.cfg.num_sps {
            return Err(Error::ShapeMismatch { expected: self.cfg.num_sps, got: actions.len() });
        }
        for (r, a) in actions.iter().enumerate() {
            if !self.bounds.contains(a) {
                return Err(Error::IndexOutOfRange(format!("action of SP {r} outside bounds: {a:?}")));
            }
        }
        Ok(())
    }

    /// Largest possible per-round payload of one provider, for normalization.
    pub fn vol_max(&self, sp: usize) -> f64 {
        self.cfg.num_clients as f64 * payload_bits(self.cfg.services[sp].payload_dim, self.cfg.q_max) as f64
    }

    /// Normalized agent input for provider `sp`.
    pub fn encode(&self, sp: usize, obs: &Observation) -> Vec<f64> {
        encode_observation(&self.cfg, sp, obs, self.vol_max(sp))
    }

    /// Executes one round for every provider.
    pub fn step(&mut self, actions: &[Action]) -> Result<StepResult> {
        if self.t >= self.cfg.rounds_per_episode {
            return Err(Error::IndexOutOfRange("episode already finished".into()));
        }
        self.check_actions(actions)?;
        let mut executed = actions.to_vec();
        let mut bandwidths: Vec<f64> = actions.iter().map(|a| a.b).collect();
        let budget_flag = enforce_budget(&mut bandwidths, self.cfg.b_min, self.cfg.b_max);
        for (a, &b) in executed.iter_mut().zip(&bandwidths) {
            a.b = b;
        }
        let mut outcomes = Vec::with_capacity(self.cfg.num_sps);
        let mut rounds = Vec::with_capacity(self.cfg.num_sps);
        for r in 0..self.cfg.num_sps {
            rounds.push(self.run_service(r, &executed[r])?);
        }
        let t_next = self.t + 1;
        for (r, (costs, stalled)) in rounds.into_iter().enumerate() {
            let svc = &self.cfg.services[r];
            let a = executed[r];
            let others: Vec<(u32, u32)> = executed
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != r)
                .map(|(_, o)| (o.n, o.q))
                .collect();
            let phi = adversarial_factor(a.n, a.q, costs.vol_total / 1e6, &others, self.cfg.adversarial_eps)
                .unwrap_or(0.0);
            let (acc, loss) = self.last[r];
            let flags = Flags {
                energy_cap: costs.e_total > svc.e_max,
                latency_cap: costs.t_total > svc.t_max,
                bandwidth_budget: budget_flag,
                stalled,
            };
            let rwd = reward(acc, phi, costs.e_total, costs.t_total, &svc.sigma)
                - self.cfg.agent.cap_penalty * f64::from(flags.cap_violations());
            outcomes.push(SpOutcome {
                obs: Observation {
                    t: t_next,
                    loss,
                    accuracy: acc,
                    n: a.n,
                    f: a.f,
                    q: a.q,
                    t_total: costs.t_total,
                    e_total: costs.e_total,
                    vol: costs.vol_total,
                    bandwidths: bandwidths.clone(),
                },
                reward: rwd,
                phi,
                costs,
                action: a,
                flags,
            });
        }
        self.t = t_next;
        Ok(StepResult { outcomes, done: self.t >= self.cfg.rounds_per_episode })
    }

    fn run_service(&mut self, r: usize, a: &Action) -> Result<(RoundCosts, bool)> {
        let selected = select_clients(&self.shards[r], a.n as usize);
        let settings = apply_action(a, selected.len(), self.cfg.jitter_q, self.cfg.jitter_f, &self.bounds, &mut self.rng);
        let svc = &self.cfg.services[r];
        if settings.iter().any(|s| s.b <= 0.0) {
            let idle = RoundCosts { clients: vec![ClientCost::default(); selected.len()], e_total: 0.0, t_total: svc.t_max, vol_total: 0.0 };
            return Ok((idle, true));
        }
        let task = &self.tasks[r];
        let mut updates = Vec::with_capacity(selected.len());
        let mut costs = Vec::with_capacity(selected.len());
        let mut vol_total = 0.0;
        for (&i, s) in selected.iter().zip(&settings) {
            let shard = &self.shards[r][i];
            let local = local_update(
                &self.models[r],
                task.classes,
                &task.train,
                shard,
                self.cfg.fl_learning_rate,
                self.cfg.local_steps,
                self.cfg.local_batch,
                &mut self.rng,
            )?;
            updates.push((quantize(&local, s.q, &mut self.rng)?, shard.weight));
            let p = &self.clients[i];
            let vol = payload_bits(svc.payload_dim, s.q) as f64;
            let rate = tx_rate(s.b, p.channel_gain, p.tx_power, p.noise_density)?;
            let (t_com, e_com) = comm_costs(vol, rate, p.tx_power)?;
            costs.push(ClientCost {
                e_cmp: energy_cmp(p, r, s.f)?,
                t_cmp: latency_cmp(p, r, s.f)?,
                e_com,
                t_com,
            });
            vol_total += vol;
        }
        self.models[r] = aggregate(&updates)?;
        self.last[r] = evaluate(&self.models[r], task.classes, &task.test)?;
        Ok((round_totals(&costs, vol_total)?, false))
    }
}

/// `[t/T, loss/5, acc, q/q_max, n/N, f/f_max, T/T_max, E/E_max, vol/vol_max, B_j/B_max...]`
/// with loss and the cost ratios clipped.
pub fn encode_observation(cfg: &ExperimentConfig, sp: usize, obs: &Observation, vol_max: f64) -> Vec<f64> {
    let svc = &cfg.services[sp];
    let mut v = vec![
        obs.t as f64 / cfg.rounds_per_episode as f64,
        (obs.loss / 5.0).clamp(0.0, 1.0),
        obs.accuracy,
        f64::from(obs.q) / f64::from(cfg.q_max),
        f64::from(obs.n) / cfg.num_clients as f64,
        obs.f / cfg.f_max,
        (obs.t_total / svc.t_max).min(5.0),
        (obs.e_total / svc.e_max).min(5.0),
        obs.vol / vol_max,
    ];
    v.extend(obs.bandwidths.iter().map(|b| b / cfg.b_max));
    v
}
