//! Ground-truth simulation with disturbance and measurement-noise injection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::richards::{transition_with_fluxes, FluxTotals, StepOptions};
use crate::soil::{water_content, H_SATURATION_CLAMP};
use crate::{ColumnGrid, Error, ForcingSchedule, PressureState, Result, SoilParams};

/// Standard deviations of the injected noise, all zero-mean Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Additive process disturbance per state per sampling period (m).
    pub process_std_m: f64,
    /// Moisture sensor noise (m/m).
    pub moisture_std: f64,
    /// Tensiometer noise (m).
    pub head_std_m: f64,
}

impl NoiseConfig {
    pub fn none() -> Self {
        NoiseConfig {
            process_std_m: 0.0,
            moisture_std: 0.0,
            head_std_m: 0.0,
        }
    }
}

/// One sensor reading set: simultaneous moisture and tensiometer samples at
/// one sensor node and sampling instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementPair {
    /// 1-based compartment index of the sensor.
    pub node: usize,
    /// Sampling instant k.
    pub time_index: usize,
    /// Moisture reading (m/m).
    pub moisture: f64,
    /// Tensiometer head reading (m), negative.
    pub head: f64,
}

/// Output of a truth simulation.
#[derive(Debug, Clone)]
pub struct TruthRun {
    /// State at every sampling instant, `states[k]` for k = 0..=n_instants.
    pub states: Vec<PressureState>,
    /// Sensor pairs at every sampling instant, one per sensor node.
    pub pairs: Vec<Vec<MeasurementPair>>,
    /// Boundary water volumes over each sampling period (len = n_instants).
    pub fluxes: Vec<FluxTotals>,
    /// Sampling period (s).
    pub period_s: f64,
}

impl TruthRun {
    pub fn n_instants(&self) -> usize {
        self.states.len() - 1
    }
}

/// Deterministic seed derivation for independent RNG streams.
pub fn derive_seed(master: u64, tag: u64, a: u64, b: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(master ^ tag) ^ a) ^ b)
}

fn normal(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std).map_err(|e| Error::OutOfRange(format!("bad noise std {std}: {e}")))
}

/// Simulates the true column: the state advances by the transition map plus
/// additive process disturbance once per sampling period, and every sensor
/// node emits a measurement pair at every sampling instant (including
/// instant 0). Fully reproducible from the seed.
#[allow(clippy::too_many_arguments)]
pub fn simulate_truth(
    grid: &ColumnGrid,
    p: &SoilParams,
    u: &ForcingSchedule,
    x0: &PressureState,
    duration_s: f64,
    period_s: f64,
    substep_s: f64,
    noise: &NoiseConfig,
    seed: u64,
    opts: &StepOptions,
) -> Result<TruthRun> {
    x0.validate()?;
    if x0.len() != grid.n_nodes {
        return Err(Error::OutOfRange(format!(
            "initial state has {} nodes, grid has {}",
            x0.len(),
            grid.n_nodes
        )));
    }
    let n_instants = (duration_s / period_s).floor() as usize;

    let mut process_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x70726f63, 0, 0));
    let mut meas_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6d656173, 0, 0));
    let w_dist = normal(noise.process_std_m)?;
    let v_moist = normal(noise.moisture_std)?;
    let v_head = normal(noise.head_std_m)?;

    let mut states = Vec::with_capacity(n_instants + 1);
    let mut pairs = Vec::with_capacity(n_instants + 1);
    let mut fluxes = Vec::with_capacity(n_instants);

    let measure = |x: &PressureState, k: usize, rng: &mut ChaCha8Rng| -> Vec<MeasurementPair> {
        grid.sensor_nodes
            .iter()
            .map(|&node| {
                let h = x.h[node - 1];
                let moisture = water_content(h, p) + v_moist.sample(rng);
                let head = (h + v_head.sample(rng)).min(H_SATURATION_CLAMP);
                MeasurementPair {
                    node,
                    time_index: k,
                    moisture,
                    head,
                }
            })
            .collect()
    };

    let mut x = x0.clone();
    pairs.push(measure(&x, 0, &mut meas_rng));
    states.push(x.clone());

    for k in 1..=n_instants {
        let t0 = (k - 1) as f64 * period_s;
        let (mut next, flux) = transition_with_fluxes(&x, grid, p, u, t0, period_s, substep_s, opts)
            .map_err(|e| e.in_phase("simulator", k, 0))?;
        for i in 0..next.len() {
            next.h[i] = (next.h[i] + w_dist.sample(&mut process_rng)).min(H_SATURATION_CLAMP);
        }
        pairs.push(measure(&next, k, &mut meas_rng));
        fluxes.push(flux);
        states.push(next.clone());
        x = next;
    }

    Ok(TruthRun {
        states,
        pairs,
        fluxes,
        period_s,
    })
}
