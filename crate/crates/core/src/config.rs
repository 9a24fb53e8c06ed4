//! Experiment configuration.
//!
//! All internal quantities are SI base units (Hz, W, J, s, bits). The TOML
//! loader accepts either bare numbers (already SI) or strings with an explicit
//! unit suffix such as `"3.5 GHz"`, `"20 dBm"` or `"15 ms"`. Every key is
//! optional; absent keys take the defaults of the reference simulation setup.

use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Converts decibels to a linear power ratio.
pub fn db_to_linear(x: f64) -> f64 {
    10f64.powf(x / 10.0)
}

/// Inverse of [`db_to_linear`].
pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Converts dBm to watts.
pub fn dbm_to_watts(x: f64) -> f64 {
    10f64.powf((x - 30.0) / 10.0)
}

/// Inverse of [`dbm_to_watts`].
pub fn watts_to_dbm(x: f64) -> f64 {
    10.0 * x.log10() + 30.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Family {
    Frequency,
    Power,
    Energy,
    Time,
    Bits,
}

/// Parses `"<number> <unit>"` into an SI value for the given unit family.
fn parse_quantity(text: &str, family: Family) -> std::result::Result<f64, String> {
    let text = text.trim();
    let split = text
        .find(|c: char| c.is_ascii_alphabetic())
        .ok_or_else(|| format!("missing unit suffix in {text:?}"))?;
    let (num, unit) = text.split_at(split);
    let value: f64 = num
        .trim()
        .parse()
        .map_err(|_| format!("bad number in {text:?}"))?;
    let unit = unit.trim();
    let si = match (family, unit) {
        (Family::Frequency, "Hz") => value,
        (Family::Frequency, "kHz") => value * 1e3,
        (Family::Frequency, "MHz") => value * 1e6,
        (Family::Frequency, "GHz") => value * 1e9,
        (Family::Power, "W") => value,
        (Family::Power, "mW") => value * 1e-3,
        (Family::Power, "dBm") => dbm_to_watts(value),
        (Family::Energy, "J") => value,
        (Family::Energy, "mJ") => value * 1e-3,
        (Family::Time, "s") => value,
        (Family::Time, "ms") => value * 1e-3,
        (Family::Bits, "bit" | "bits") => value,
        (Family::Bits, "kbit" | "kbits") => value * 1e3,
        (Family::Bits, "Mbit" | "Mbits") => value * 1e6,
        _ => return Err(format!("unit {unit:?} not valid for {family:?}")),
    };
    if !si.is_finite() {
        return Err(format!("non-finite quantity {text:?}"));
    }
    Ok(si)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawQuantity {
    Number(f64),
    Text(String),
}

fn de_family<'de, D: Deserializer<'de>>(d: D, family: Family) -> std::result::Result<f64, D::Error> {
    match RawQuantity::deserialize(d)? {
        RawQuantity::Number(x) => Ok(x),
        RawQuantity::Text(s) => parse_quantity(&s, family).map_err(serde::de::Error::custom),
    }
}

fn de_hz<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    de_family(d, Family::Frequency)
}
fn de_joules<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    de_family(d, Family::Energy)
}
fn de_seconds<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    de_family(d, Family::Time)
}
fn de_bits<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    de_family(d, Family::Bits)
}
fn de_watts<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    de_family(d, Family::Power)
}

/// Complexity tier of a synthetic task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Hard,
    Medium,
    Easy,
}

/// Gaussian-blob classification task parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub tier: Tier,
    pub classes: usize,
    pub feature_dim: usize,
    /// Scale of the class means; larger is easier.
    pub separation: f64,
    pub train_size: usize,
    pub test_size: usize,
}

impl TaskConfig {
    pub fn for_tier(tier: Tier) -> Self {
        let (feature_dim, separation) = match tier {
            Tier::Hard => (16, 0.55),
            Tier::Medium => (12, 0.8),
            Tier::Easy => (8, 1.3),
        };
        TaskConfig {
            tier,
            classes: 10,
            feature_dim,
            separation,
            train_size: 2000,
            test_size: 500,
        }
    }
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self::for_tier(Tier::Medium)
    }
}

/// Per-service (per-SP) settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Expectile of the critic loss.
    pub tau: f64,
    /// Reward weights for accuracy, adversarial factor, energy and latency.
    pub sigma: [f64; 4],
    #[serde(deserialize_with = "de_joules")]
    pub e_max: f64,
    #[serde(deserialize_with = "de_seconds")]
    pub t_max: f64,
    /// CPU cycles per sample, sampled uniformly per client.
    pub cycles_per_sample: [f64; 2],
    /// Nominal per-client sample count charged by the cost model.
    pub cost_samples: f64,
    /// Parameter count used for payload accounting.
    pub payload_dim: usize,
    pub task: TaskConfig,
}

impl ServiceConfig {
    pub fn for_tier(tier: Tier) -> Self {
        let (sigma, cycles, cost_samples, payload_dim, e_max, t_max) = match tier {
            Tier::Hard => ([100.0, 4.8, 0.8, 0.8], [6.07e5, 7.41e5], 1000.0, 9_074_474, 30.0, 15.0),
            Tier::Medium => ([100.0, 31.25, 25.0, 25.0], [6.07e5, 7.41e5], 20.0, 21_840, 1.0, 1.0),
            Tier::Easy => ([100.0, 12.5, 16.6, 16.6], [1.10e8, 1.34e8], 0.2, 101_770, 1.0, 1.0),
        };
        ServiceConfig {
            tau: 0.5,
            sigma,
            e_max,
            t_max,
            cycles_per_sample: cycles,
            cost_samples,
            payload_dim,
            task: TaskConfig::for_tier(tier),
        }
    }

    /// Default services for `r` providers, cycling hard, medium, easy.
    pub fn defaults(r: usize) -> Vec<Self> {
        [Tier::Hard, Tier::Medium, Tier::Easy]
            .into_iter()
            .cycle()
            .take(r)
            .map(Self::for_tier)
            .collect()
    }
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self::for_tier(Tier::Medium)
    }
}

/// Learning-agent hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub generator_hidden: Vec<usize>,
    /// Episodes held in the replay buffer.
    pub replay_capacity: usize,
    /// Buffered episodes required before training starts.
    pub train_start: usize,
    /// Episodes drawn per training batch.
    pub batch_episodes: usize,
    /// Transitions subsampled from the drawn episodes per update (0 = all).
    pub batch_transitions: usize,
    /// Gradient steps taken on each sampled batch.
    pub updates_per_batch: usize,
    /// Weight of the actor's head-entropy bonus.
    pub entropy_coef: f64,
    pub polyak: f64,
    /// Multiplier applied to rewards before they enter the critic.
    pub reward_scale: f64,
    /// KL weight of the generator loss.
    pub chi: f64,
    /// Score-function samples for the generator loss.
    pub generator_samples: usize,
    pub ema_decay: f64,
    pub generator_lr: f64,
    /// Reward penalty per violated energy/latency cap.
    pub cap_penalty: f64,
    pub tau_adaptation: bool,
    pub tau_threshold: f64,
    pub tau_step_inc: f64,
    pub tau_step_dec: f64,
    pub tau_bounds: [f64; 2],
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            actor_hidden: vec![64, 128, 64],
            critic_hidden: vec![64, 64],
            generator_hidden: vec![64, 64],
            replay_capacity: 64,
            train_start: 8,
            batch_episodes: 4,
            batch_transitions: 32,
            updates_per_batch: 8,
            entropy_coef: 0.01,
            polyak: 0.995,
            reward_scale: 0.01,
            chi: 0.1,
            generator_samples: 8,
            ema_decay: 0.99,
            generator_lr: 0.001,
            cap_penalty: 0.0,
            tau_adaptation: false,
            tau_threshold: 0.8,
            tau_step_inc: 0.05,
            tau_step_dec: 0.05,
            tau_bounds: [0.1, 0.9],
        }
    }
}

/// Full experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub num_clients: usize,
    pub num_sps: usize,
    pub rounds_per_episode: usize,
    pub episodes: usize,
    pub local_steps: usize,
    pub local_batch: usize,
    pub fl_learning_rate: f64,
    pub non_iid_degree: f64,
    pub discount: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Adversarial-factor constant; multiplies the payload in Mbits.
    pub adversarial_eps: f64,
    /// Standard deviation of the per-client quantization-level jitter.
    pub jitter_q: f64,
    #[serde(deserialize_with = "de_hz")]
    pub jitter_f: f64,
    #[serde(deserialize_with = "de_hz")]
    pub f_min: f64,
    #[serde(deserialize_with = "de_hz")]
    pub f_max: f64,
    #[serde(deserialize_with = "de_hz")]
    pub b_min: f64,
    #[serde(deserialize_with = "de_hz")]
    pub b_max: f64,
    pub q_min: u32,
    pub q_max: u32,
    pub gran_n: u32,
    #[serde(deserialize_with = "de_hz")]
    pub gran_f: f64,
    #[serde(deserialize_with = "de_hz")]
    pub gran_b: f64,
    pub gran_q: u32,
    pub channel_gain_db: [f64; 2],
    pub noise_dbm_per_hz: [f64; 2],
    pub tx_power_dbm: [f64; 2],
    pub capacitance: f64,
    /// Bits per float in the uncompressed reference payload.
    #[serde(deserialize_with = "de_bits")]
    pub float_bits: f64,
    /// Transmit power used by tests that pin a single client power.
    #[serde(deserialize_with = "de_watts")]
    pub reference_power: f64,
    pub seed: u64,
    #[serde(default)]
    pub services: Vec<ServiceConfig>,
    pub agent: AgentConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            num_clients: 5,
            num_sps: 3,
            rounds_per_episode: 35,
            episodes: 200,
            local_steps: 3,
            local_batch: 64,
            fl_learning_rate: 0.1,
            non_iid_degree: 1.0,
            discount: 0.9,
            actor_lr: 0.001,
            critic_lr: 0.001,
            adversarial_eps: 0.01,
            jitter_q: 0.5,
            jitter_f: 0.25e9,
            f_min: 0.5e9,
            f_max: 3.5e9,
            b_min: 0.0,
            b_max: 30e6,
            q_min: 2,
            q_max: 32,
            gran_n: 1,
            gran_f: 0.5e9,
            gran_b: 2e6,
            gran_q: 4,
            channel_gain_db: [-73.0, -63.0],
            noise_dbm_per_hz: [-174.0, -124.0],
            tx_power_dbm: [10.0, 33.0],
            capacitance: 1e-27,
            float_bits: 32.0,
            reference_power: 0.1,
            seed: 0,
            services: ServiceConfig::defaults(3),
            agent: AgentConfig::default(),
        }
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidConfig(msg()))
    }
}

impl ExperimentConfig {
    /// Checks every documented invariant, reporting the first violated bound.
    pub fn validate(&self) -> Result<()> {
        check(self.num_clients >= 1, || "num_clients below 1".into())?;
        check(self.num_sps >= 1, || "num_sps below 1".into())?;
        check(self.rounds_per_episode >= 1, || "rounds_per_episode below 1".into())?;
        check(self.local_steps >= 1, || "local_steps below 1".into())?;
        check(self.local_batch >= 1, || "local_batch below 1".into())?;
        check(self.q_min >= 2, || "q_min below 2".into())?;
        check(self.q_min <= self.q_max, || "q_min above q_max".into())?;
        check(self.f_min > 0.0, || "f_min must be positive".into())?;
        check(self.f_min <= self.f_max, || "f_min above f_max".into())?;
        check(self.b_min >= 0.0, || "b_min negative".into())?;
        check(self.b_min <= self.b_max, || "b_min above b_max".into())?;
        check(self.b_max > 0.0, || "b_max must be positive".into())?;
        check(self.non_iid_degree > 0.0 && self.non_iid_degree <= 1.0, || {
            "non_iid_degree outside (0, 1]".into()
        })?;
        check((0.0..1.0).contains(&self.discount), || "discount outside [0, 1)".into())?;
        check(self.actor_lr > 0.0 && self.critic_lr > 0.0, || "learning rates must be positive".into())?;
        check(self.fl_learning_rate >= 0.0, || "fl_learning_rate negative".into())?;
        check(self.gran_n > 0 && self.gran_q > 0, || "granularity must be positive".into())?;
        check(self.gran_f > 0.0 && self.gran_b > 0.0, || "granularity must be positive".into())?;
        check(self.adversarial_eps >= 0.0, || "adversarial_eps negative".into())?;
        check(self.jitter_q >= 0.0 && self.jitter_f >= 0.0, || "jitter negative".into())?;
        for (name, r) in [
            ("channel_gain_db", self.channel_gain_db),
            ("noise_dbm_per_hz", self.noise_dbm_per_hz),
            ("tx_power_dbm", self.tx_power_dbm),
        ] {
            check(r[0] <= r[1], || format!("{name} range reversed"))?;
        }
        check(self.capacitance > 0.0, || "capacitance must be positive".into())?;
        check(self.services.len() == self.num_sps, || {
            format!("{} services configured for {} SPs", self.services.len(), self.num_sps)
        })?;
        for (r, s) in self.services.iter().enumerate() {
            check(s.tau > 0.0 && s.tau < 1.0, || format!("service {r}: tau outside (0, 1)"))?;
            check(s.sigma.iter().all(|&x| x >= 0.0), || format!("service {r}: negative sigma"))?;
            check(s.e_max > 0.0 && s.t_max > 0.0, || format!("service {r}: caps must be positive"))?;
            check(
                s.cycles_per_sample[0] > 0.0 && s.cycles_per_sample[0] <= s.cycles_per_sample[1],
                || format!("service {r}: cycles_per_sample range invalid"),
            )?;
            check(s.cost_samples >= 0.0, || format!("service {r}: cost_samples negative"))?;
            check(s.task.classes >= 2, || format!("service {r}: fewer than 2 classes"))?;
            check(s.task.feature_dim >= 1, || format!("service {r}: feature_dim below 1"))?;
            check(s.task.train_size >= self.num_clients, || {
                format!("service {r}: train_size smaller than num_clients")
            })?;
            check(s.task.test_size >= 1, || format!("service {r}: empty test set"))?;
        }
        let a = &self.agent;
        check(a.replay_capacity >= 1 && a.batch_episodes >= 1, || "replay sizes must be positive".into())?;
        check(a.train_start >= 1 && a.train_start <= a.replay_capacity, || {
            "train_start outside [1, replay_capacity]".into()
        })?;
        check((0.0..=1.0).contains(&a.polyak), || "polyak outside [0, 1]".into())?;
        check(a.chi >= 0.0, || "chi negative".into())?;
        check(a.generator_samples >= 1, || "generator_samples below 1".into())?;
        check((0.0..1.0).contains(&a.ema_decay), || "ema_decay outside [0, 1)".into())?;
        check(
            0.0 < a.tau_bounds[0] && a.tau_bounds[0] < a.tau_bounds[1] && a.tau_bounds[1] < 1.0,
            || "tau_bounds must satisfy 0 < min < max < 1".into(),
        )?;
        Ok(())
    }

    /// Per-client CPU-frequency bounds as a pair.
    pub fn f_bounds(&self) -> (f64, f64) {
        (self.f_min, self.f_max)
    }

    /// Serializes to TOML with all values in SI units.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Short stable hash of the serialized configuration.
    pub fn hash(&self) -> String {
        let text = self.to_toml().unwrap_or_default();
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses and validates a TOML document.
pub fn load_config(source: &str) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig =
        toml::from_str(source).map_err(|e| Error::ConfigParse(e.to_string()))?;
    let has_services = toml::from_str::<toml::Table>(source)
        .map(|t| t.contains_key("services"))
        .unwrap_or(false);
    if !has_services {
        cfg.services = ServiceConfig::defaults(cfg.num_sps);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a config file from disk.
pub fn load_config_file(path: &std::path::Path) -> Result<ExperimentConfig> {
    load_config(&std::fs::read_to_string(path)?)
}
