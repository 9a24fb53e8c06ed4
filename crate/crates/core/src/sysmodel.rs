//! Computation and communication cost model for one FL round.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical constants of one client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub capacitance: f64,
    /// CPU cycles per sample, one entry per service.
    pub cycles_per_sample: Vec<f64>,
    /// Samples charged per local round, one entry per service.
    pub dataset_size: Vec<f64>,
    /// Linear channel power gain.
    pub channel_gain: f64,
    /// Transmit power in W.
    pub tx_power: f64,
    /// Noise power spectral density in W/Hz.
    pub noise_density: f64,
}

/// Costs incurred by one selected client.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientCost {
    pub e_cmp: f64,
    pub t_cmp: f64,
    pub e_com: f64,
    pub t_com: f64,
}

impl ClientCost {
    pub fn latency(&self) -> f64 {
        self.t_cmp + self.t_com
    }

    pub fn energy(&self) -> f64 {
        self.e_cmp + self.e_com
    }
}

/// Aggregate costs of one service in one round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundCosts {
    pub clients: Vec<ClientCost>,
    pub e_total: f64,
    pub t_total: f64,
    pub vol_total: f64,
}

fn check_frequency(f: f64) -> Result<()> {
    if f > 0.0 {
        Ok(())
    } else {
        Err(Error::NonPositiveFrequency(f))
    }
}

pub fn energy_cmp(profile: &ClientProfile, service: usize, f: f64) -> Result<f64> {
    check_frequency(f)?;
    let (c, d) = service_load(profile, service)?;
    Ok(profile.capacitance * c * d * f * f)
}

pub fn latency_cmp(profile: &ClientProfile, service: usize, f: f64) -> Result<f64> {
    check_frequency(f)?;
    let (c, d) = service_load(profile, service)?;
    Ok(c * d / f)
}

fn service_load(profile: &ClientProfile, service: usize) -> Result<(f64, f64)> {
    match (profile.cycles_per_sample.get(service), profile.dataset_size.get(service)) {
        (Some(&c), Some(&d)) => Ok((c, d)),
        _ => Err(Error::IndexOutOfRange(format!("service {service}"))),
    }
}

/// Shannon rate of an FDMA sub-band in bits/s.
pub fn tx_rate(bandwidth: f64, gain: f64, power: f64, noise_density: f64) -> Result<f64> {
    if bandwidth <= 0.0 {
        return Err(Error::NonPositiveBandwidth(bandwidth));
    }
    if noise_density <= 0.0 {
        return Err(Error::NonPositiveNoise(noise_density));
    }
    Ok(bandwidth * (gain * power / (bandwidth * noise_density)).ln_1p() / std::f64::consts::LN_2)
}

/// Upload latency and energy for `vol` bits.
pub fn comm_costs(vol: f64, rate: f64, power: f64) -> Result<(f64, f64)> {
    if rate <= 0.0 {
        return Err(Error::ZeroRate);
    }
    let t = vol / rate;
    Ok((t, t * power))
}

/// Sums energy and takes the slowest client's latency.
pub fn round_totals(clients: &[ClientCost], vol_total: f64) -> Result<RoundCosts> {
    if clients.is_empty() {
        return Err(Error::EmptySelection);
    }
    Ok(RoundCosts {
        clients: clients.to_vec(),
        e_total: clients.iter().map(ClientCost::energy).sum(),
        t_total: clients.iter().map(ClientCost::latency).fold(0.0, f64::max),
        vol_total,
    })
}
