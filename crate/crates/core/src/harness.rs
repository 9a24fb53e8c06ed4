//! Experiment runner: baseline and learning policies, per-run records,
//! CSV/JSONL output and cross-policy summaries.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agent::{Learner, SelectMode, Variant};
use crate::config::ExperimentConfig;
use crate::env::{Env, Observation, StepResult};
use crate::error::{Error, Result};
use crate::metrics::{hvi, ParetoSet};
use crate::tcad::{Action, ActionBounds};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySpec {
    /// Actor-critic with the brute-force conjecture of opponents.
    Pac,
    /// Actor-critic with the learned conjecture generator.
    PacP,
    /// Actor-critic that holds opponents at their current action.
    IndependentAc,
    /// All clients, full precision, equal bandwidth split.
    Fixed,
    /// All clients at `q = 8`, equal bandwidth split.
    UniformQ,
    /// Raises `q` when the loss stalls and scales `B` and `f` with it.
    Heuristic,
}

impl PolicySpec {
    pub const ALL: [PolicySpec; 6] = [
        PolicySpec::Pac,
        PolicySpec::PacP,
        PolicySpec::IndependentAc,
        PolicySpec::Fixed,
        PolicySpec::UniformQ,
        PolicySpec::Heuristic,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PolicySpec::Pac => "pac",
            PolicySpec::PacP => "pac_p",
            PolicySpec::IndependentAc => "independent_ac",
            PolicySpec::Fixed => "fixed",
            PolicySpec::UniformQ => "uniform_q",
            PolicySpec::Heuristic => "heuristic",
        }
    }

    pub fn learner_variant(&self) -> Option<Variant> {
        match self {
            PolicySpec::Pac => Some(Variant::Pac),
            PolicySpec::PacP => Some(Variant::PacP),
            PolicySpec::IndependentAc => Some(Variant::Independent),
            _ => None,
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicySpec::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown policy {s:?}")))
    }
}

/// Every client, mid frequency, an equal share of the band.
fn static_action(cfg: &ExperimentConfig, q: u32) -> Action {
    Action {
        n: cfg.num_clients as u32,
        f: 0.5 * (cfg.f_min + cfg.f_max),
        b: cfg.b_max / cfg.num_sps as f64,
        q: q.clamp(cfg.q_min, cfg.q_max),
    }
}

pub const PLATEAU_TOLERANCE: f64 = 1e-3;
pub const PLATEAU_ROUNDS: usize = 3;

/// State of the quantization-tied allocation rule of one provider.
#[derive(Clone, Debug, PartialEq)]
pub struct HeuristicState {
    pub q: u32,
    last_loss: Option<f64>,
    flat_rounds: usize,
}

impl HeuristicState {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self { q: cfg.q_min, last_loss: None, flat_rounds: 0 }
    }

    pub fn action(&self, cfg: &ExperimentConfig) -> Action {
        let bounds = ActionBounds::from_config(cfg);
        let scale = f64::from(self.q) / f64::from(cfg.q_max);
        Action {
            n: cfg.num_clients as u32,
            f: (cfg.f_max * scale).clamp(bounds.f_min, bounds.f_max),
            b: (cfg.b_max / cfg.num_sps as f64 * scale).clamp(bounds.b_min, bounds.b_max),
            q: self.q,
        }
    }
}

/// Feeds the latest loss to the rule and returns the next action.
pub fn heuristic_policy_step(state: &mut HeuristicState, obs: &Observation, cfg: &ExperimentConfig) -> Action {
    if let Some(prev) = state.last_loss {
        if (obs.loss - prev).abs() < PLATEAU_TOLERANCE {
            state.flat_rounds += 1;
        } else {
            state.flat_rounds = 0;
        }
    }
    state.last_loss = Some(obs.loss);
    if state.flat_rounds >= PLATEAU_ROUNDS {
        state.q = (state.q + cfg.gran_q).min(cfg.q_max);
        state.flat_rounds = 0;
    }
    state.action(cfg)
}

/// One line of the per-run CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub sp: usize,
    pub mean_reward: f64,
    pub max_accuracy: f64,
    pub mean_vol: f64,
    pub mean_latency: f64,
    pub mean_energy: f64,
    pub cap_violations: u32,
    pub budget_violations: u32,
}

pub const CSV_HEADER: &str =
    "episode,sp,mean_reward,max_accuracy,mean_vol,mean_latency,mean_energy,cap_violations,budget_violations";

impl EpisodeRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.episode,
            self.sp,
            self.mean_reward,
            self.max_accuracy,
            self.mean_vol,
            self.mean_latency,
            self.mean_energy,
            self.cap_violations,
            self.budget_violations
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::ShapeMismatch { expected: 9, got: f.len() });
        }
        let bad = |i: usize| Error::Serde(format!("column {i} of {line:?}"));
        let float = |i: usize| f[i].parse::<f64>().map_err(|_| bad(i));
        let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad(i));
        Ok(Self {
            episode: int(0)?,
            sp: int(1)?,
            mean_reward: float(2)?,
            max_accuracy: float(3)?,
            mean_vol: float(4)?,
            mean_latency: float(5)?,
            mean_energy: float(6)?,
            cap_violations: int(7)? as u32,
            budget_violations: int(8)? as u32,
        })
    }
}

/// One line of the JSONL round log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub episode: usize,
    pub round: usize,
    pub sp: usize,
    pub action: Action,
    pub reward: f64,
    pub accuracy: f64,
    pub loss: f64,
    pub vol: f64,
    pub latency: f64,
    pub energy: f64,
    pub phi: f64,
    pub energy_cap: bool,
    pub latency_cap: bool,
    pub bandwidth_budget: bool,
    pub stalled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub policy: PolicySpec,
    pub seed: u64,
    pub config_hash: String,
    pub num_sps: usize,
    pub rows: Vec<EpisodeRow>,
    /// Per-provider mean reward over the final fifth of episodes.
    pub pareto: Vec<f64>,
}

impl RunRecord {
    pub fn from_rows(policy: PolicySpec, seed: u64, config_hash: String, num_sps: usize, rows: Vec<EpisodeRow>) -> Self {
        let mut record = RunRecord { policy, seed, config_hash, num_sps, rows, pareto: Vec::new() };
        let e = record.episodes();
        let from = e - record.window().min(e);
        record.pareto = (0..num_sps)
            .map(|r| {
                let v: Vec<f64> = record.rows.iter().filter(|x| x.sp == r && x.episode >= from).map(|x| x.mean_reward).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            })
            .collect();
        record
    }

    pub fn episodes(&self) -> usize {
        self.rows.len() / self.num_sps.max(1)
    }

    /// Sum over providers of their mean episode reward within
    /// `episodes[from..to]`.
    pub fn total_reward(&self, from: usize, to: usize) -> f64 {
        let span = to.saturating_sub(from).max(1) as f64;
        self.rows.iter().filter(|r| r.episode >= from && r.episode < to).map(|r| r.mean_reward).sum::<f64>() / span
    }

    fn window(&self) -> usize {
        (self.episodes() as f64 * 0.2).ceil().max(1.0) as usize
    }

    pub fn first_fifth_total(&self) -> f64 {
        self.total_reward(0, self.window())
    }

    pub fn final_fifth_total(&self) -> f64 {
        let e = self.episodes();
        self.total_reward(e - self.window().min(e), e)
    }

    /// Mean of a per-row metric over the final fifth of episodes and every
    /// provider.
    pub fn final_mean(&self, metric: impl Fn(&EpisodeRow) -> f64) -> f64 {
        let e = self.episodes();
        let from = e - self.window().min(e);
        let rows: Vec<&EpisodeRow> = self.rows.iter().filter(|r| r.episode >= from).collect();
        rows.iter().map(|r| metric(r)).sum::<f64>() / rows.len().max(1) as f64
    }
}

struct Sink {
    csv: BufWriter<File>,
    jsonl: BufWriter<File>,
}

impl Sink {
    fn open(dir: &Path, policy: PolicySpec, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let (csv, jsonl) = output_paths(dir, policy, seed);
        let mut csv = BufWriter::new(File::create(csv)?);
        writeln!(csv, "{CSV_HEADER}")?;
        Ok(Self { csv, jsonl: BufWriter::new(File::create(jsonl)?) })
    }
}

/// `{dir}/{policy}_seed{seed}.csv` and the matching `.jsonl`.
pub fn output_paths(dir: &Path, policy: PolicySpec, seed: u64) -> (PathBuf, PathBuf) {
    let stem = format!("{policy}_seed{seed}");
    (dir.join(format!("{stem}.csv")), dir.join(format!("{stem}.jsonl")))
}

enum Driver {
    Learn(Box<Learner>),
    Static(Vec<Action>),
    Rule(Vec<HeuristicState>),
}

pub fn run(cfg: &ExperimentConfig, policy: PolicySpec, seed: u64) -> Result<RunRecord> {
    run_inner(cfg, policy, seed, None)
}

/// Like [`run`], streaming the CSV and round log into `dir` as it goes.
pub fn run_to_dir(cfg: &ExperimentConfig, policy: PolicySpec, seed: u64, dir: &Path) -> Result<RunRecord> {
    let mut sink = Sink::open(dir, policy, seed)?;
    let out = run_inner(cfg, policy, seed, Some(&mut sink));
    sink.csv.flush()?;
    sink.jsonl.flush()?;
    out
}

fn run_inner(cfg: &ExperimentConfig, policy: PolicySpec, seed: u64, mut sink: Option<&mut Sink>) -> Result<RunRecord> {
    cfg.validate()?;
    let sps = cfg.num_sps;
    let mut env = Env::new(cfg, seed)?;
    let mut driver = match policy.learner_variant() {
        Some(v) => Driver::Learn(Box::new(Learner::new(cfg, v, seed)?)),
        None if policy == PolicySpec::Heuristic => Driver::Rule(Vec::new()),
        None => {
            let q = if policy == PolicySpec::UniformQ { 8 } else { cfg.q_max };
            Driver::Static(vec![static_action(cfg, q); sps])
        }
    };
    let mut rows = Vec::with_capacity(cfg.episodes * sps);
    for ep in 0..cfg.episodes {
        let start = match &mut driver {
            Driver::Learn(l) => l.begin_episode(),
            Driver::Static(a) => a.clone(),
            Driver::Rule(states) => {
                *states = vec![HeuristicState::new(cfg); sps];
                states.iter().map(|s| s.action(cfg)).collect()
            }
        };
        let mut obs = env.reset(ep, &start)?;
        let mut acc = vec![Accumulator::default(); sps];
        loop {
            let encoded: Vec<Vec<f64>> = (0..sps).map(|r| env.encode(r, &obs[r])).collect();
            let actions = match &mut driver {
                Driver::Learn(l) => l.act(&encoded, SelectMode::Sample)?,
                Driver::Static(a) => a.clone(),
                Driver::Rule(states) => states.iter_mut().zip(&obs).map(|(s, o)| heuristic_policy_step(s, o, cfg)).collect(),
            };
            let step = env.step(&actions)?;
            let next: Vec<Observation> = step.outcomes.iter().map(|o| o.obs.clone()).collect();
            if let Driver::Learn(l) = &mut driver {
                let next_enc: Vec<Vec<f64>> = (0..sps).map(|r| env.encode(r, &next[r])).collect();
                let executed: Vec<Action> = step.outcomes.iter().map(|o| o.action).collect();
                let rewards: Vec<f64> = step.outcomes.iter().map(|o| o.reward).collect();
                l.record(&encoded, &next_enc, &executed, &rewards, step.done);
                l.adapt(&next.iter().map(|o| o.accuracy).collect::<Vec<_>>());
            }
            for (r, a) in acc.iter_mut().enumerate() {
                a.add(&step, r);
            }
            if let Some(s) = sink.as_deref_mut() {
                for (r, o) in step.outcomes.iter().enumerate() {
                    let log = RoundLog {
                        episode: ep,
                        round: o.obs.t,
                        sp: r,
                        action: o.action,
                        reward: o.reward,
                        accuracy: o.obs.accuracy,
                        loss: o.obs.loss,
                        vol: o.costs.vol_total,
                        latency: o.costs.t_total,
                        energy: o.costs.e_total,
                        phi: o.phi,
                        energy_cap: o.flags.energy_cap,
                        latency_cap: o.flags.latency_cap,
                        bandwidth_budget: o.flags.bandwidth_budget,
                        stalled: o.flags.stalled,
                    };
                    let line = serde_json::to_string(&log).map_err(|e| Error::Serde(e.to_string()))?;
                    writeln!(s.jsonl, "{line}")?;
                }
            }
            obs = next;
            if step.done {
                break;
            }
        }
        if let Driver::Learn(l) = &mut driver {
            l.end_episode()?;
        }
        for (r, a) in acc.iter().enumerate() {
            let row = a.row(ep, r);
            if let Some(s) = sink.as_deref_mut() {
                writeln!(s.csv, "{}", row.to_csv())?;
            }
            rows.push(row);
        }
    }
    Ok(RunRecord::from_rows(policy, seed, cfg.hash(), sps, rows))
}

/// Reads a CSV written by [`run_to_dir`]; the policy and seed come from the
/// file name and the config hash is left empty.
pub fn read_run_csv(path: &Path) -> Result<RunRecord> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let (policy, seed) = stem
        .rsplit_once("_seed")
        .ok_or_else(|| Error::Serde(format!("unexpected run file name {stem:?}")))?;
    let seed: u64 = seed.parse().map_err(|_| Error::Serde(format!("bad seed in {stem:?}")))?;
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Serde(format!("{} lacks the expected header", path.display())));
    }
    let rows = lines.map(EpisodeRow::from_csv).collect::<Result<Vec<_>>>()?;
    let sps = rows.iter().map(|r| r.sp + 1).max().unwrap_or(0);
    if sps == 0 || rows.len() % sps != 0 {
        return Err(Error::Mismatch(format!("{} rows do not tile {sps} providers", rows.len())));
    }
    Ok(RunRecord::from_rows(policy.parse()?, seed, String::new(), sps, rows))
}

#[derive(Clone, Default)]
struct Accumulator {
    rounds: usize,
    reward: f64,
    max_acc: f64,
    vol: f64,
    latency: f64,
    energy: f64,
    caps: u32,
    budget: u32,
}

impl Accumulator {
    fn add(&mut self, step: &StepResult, r: usize) {
        let o = &step.outcomes[r];
        self.rounds += 1;
        self.reward += o.reward;
        self.max_acc = self.max_acc.max(o.obs.accuracy);
        self.vol += o.costs.vol_total;
        self.latency += o.costs.t_total;
        self.energy += o.costs.e_total;
        self.caps += o.flags.cap_violations();
        self.budget += u32::from(o.flags.bandwidth_budget);
    }

    fn row(&self, episode: usize, sp: usize) -> EpisodeRow {
        let n = self.rounds.max(1) as f64;
        EpisodeRow {
            episode,
            sp,
            mean_reward: self.reward / n,
            max_accuracy: self.max_acc,
            mean_vol: self.vol / n,
            mean_latency: self.latency / n,
            mean_energy: self.energy / n,
            cap_violations: self.caps,
            budget_violations: self.budget,
        }
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }
}

impl fmt::Display for Stat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: PolicySpec,
    pub runs: usize,
    pub total_reward: Stat,
    pub vol: Stat,
    pub latency: Stat,
    pub energy: Stat,
    pub hvi: f64,
}

/// Groups records by policy (in first-seen order), aggregates the
/// final-fifth metrics over seeds and scores each policy's per-seed reward
/// vectors with the hypervolume indicator under a shared normalization.
pub fn summarize(records: &[RunRecord]) -> Result<Vec<PolicySummary>> {
    let sps = records.first().ok_or(Error::EmptySelection)?.num_sps;
    if let Some(r) = records.iter().find(|r| r.num_sps != sps || r.pareto.len() != sps) {
        return Err(Error::Mismatch(format!("{} seed {} has {} providers, expected {sps}", r.policy, r.seed, r.num_sps)));
    }
    let mut order: Vec<PolicySpec> = Vec::new();
    for r in records {
        if !order.contains(&r.policy) {
            order.push(r.policy);
        }
    }
    let groups: Vec<Vec<&RunRecord>> = order.iter().map(|p| records.iter().filter(|r| r.policy == *p).collect()).collect();
    let sets: Vec<ParetoSet> = order
        .iter()
        .zip(&groups)
        .map(|(p, g)| ParetoSet { label: p.to_string(), points: g.iter().map(|r| r.pareto.clone()).collect() })
        .collect();
    let scores = hvi(&sets, 1.1)?;
    Ok(order
        .iter()
        .zip(&groups)
        .zip(scores)
        .map(|((p, g), h)| {
            let stat = |f: &dyn Fn(&RunRecord) -> f64| Stat::of(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            PolicySummary {
                policy: *p,
                runs: g.len(),
                total_reward: stat(&|r| r.final_fifth_total()),
                vol: stat(&|r| r.final_mean(|x| x.mean_vol)),
                latency: stat(&|r| r.final_mean(|x| x.mean_latency)),
                energy: stat(&|r| r.final_mean(|x| x.mean_energy)),
                hvi: h,
            }
        })
        .collect())
}

pub fn format_summary(rows: &[PolicySummary]) -> String {
    let mut out = format!(
        "{:<16}{:>5}  {:<22}{:<26}{:<22}{:<22}{:>8}\n",
        "policy", "runs", "total reward", "vol (bits)", "latency (s)", "energy (J)", "HVI"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<16}{:>5}  {:<22}{:<26}{:<22}{:<22}{:>8.4}\n",
            r.policy.to_string(),
            r.runs,
            r.total_reward.to_string(),
            format!("{:.4e} ± {:.2e}", r.vol.mean, r.vol.std),
            r.latency.to_string(),
            r.energy.to_string(),
            r.hvi
        ));
    }
    out
}
