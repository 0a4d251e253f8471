//! Declarative experiment configuration (TOML) and the bundled preset.
//!
//! All on-disk quantities are SI except where the key name says otherwise
//! (`*_hours`, `rate_m_per_hr`); conversions happen at this boundary.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::dekf::{DekfTuning, ReplayMode};
use crate::dmhe::MheTuning;
use crate::nlsq::SolverOptions;
use crate::richards::{BottomBc, StepOptions};
use crate::{ColumnGrid, Error, ForcingSchedule, NoiseConfig, PressureState, Result, SoilParams};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridConfig,
    pub soil: SoilConfig,
    pub initial: InitialConfig,
    pub forcing: ForcingConfig,
    pub noise: NoiseSection,
    pub clocks: ClockConfig,
    pub dekf: DekfSection,
    pub dmhe: DmheSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub depth_m: f64,
    pub n_nodes: usize,
    /// 1-based sensor compartments.
    pub sensor_nodes: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoilConfig {
    pub k_sat: f64,
    pub theta_s: f64,
    pub theta_r: f64,
    pub alpha: f64,
    pub n: f64,
    #[serde(default = "default_tortuosity")]
    pub tortuosity: f64,
}

fn default_tortuosity() -> f64 {
    SoilParams::DEFAULT_TORTUOSITY
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    /// Uniform initial capillary head (m).
    pub head_m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingConfig {
    /// Surface inflow while irrigation is on (m/hr).
    pub rate_m_per_hr: f64,
    /// Hours of irrigation at the start of each cycle.
    pub on_hours: f64,
    /// Cycle length in hours.
    pub cycle_hours: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub process_std_m: f64,
    pub moisture_std: f64,
    pub head_std_m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockConfig {
    /// Measurement / filter period (s).
    pub dekf_period_s: f64,
    /// Estimator period (s); must be an integer multiple of the filter
    /// period.
    pub dmhe_period_s: f64,
    /// Truth-simulation substep (s).
    pub truth_substep_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DekfSection {
    pub q_diag: f64,
    /// Inner-step decay exponent of the process-noise weight; 0 holds it
    /// constant.
    #[serde(default = "default_chi_q")]
    pub chi_q: f64,
    /// Restart each replay from the initial guesses with a per-instant
    /// schedule, instead of the default cumulative continuation.
    #[serde(default)]
    pub restart_per_instant: bool,
    pub r: f64,
    pub a: f64,
    pub chi_a: f64,
    pub b: f64,
    pub k_max: usize,
    pub eps_consensus: f64,
    pub eps_settle: f64,
    pub window: usize,
    /// Keep filtering after convergence (off implements the
    /// deactivate-on-convergence energy-saving policy).
    #[serde(default = "default_true")]
    pub keep_running_after_convergence: bool,
    /// One initial guess per filter.
    pub guesses: Vec<BetaGuess>,
}

fn default_true() -> bool {
    true
}

fn default_chi_q() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaGuess {
    pub theta_s: f64,
    pub theta_r: f64,
    pub alpha: f64,
    pub n: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmheSection {
    pub horizon: usize,
    pub q_w: f64,
    pub r_v: f64,
    pub pi_l: f64,
    pub pi_c: f64,
    pub mu_l: f64,
    pub mu_c: f64,
    pub p_max: usize,
    pub state_lo_m: f64,
    pub state_hi_m: f64,
    pub k_sat_lo: f64,
    pub k_sat_hi: f64,
    pub model_substep_s: f64,
    /// Initial-guess multipliers applied to the initial state and the true
    /// k_sat, one per estimator.
    pub guess_multipliers: Vec<f64>,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    pub solver_damping_init: f64,
    /// Config hook for triggered early termination of the solve rounds
    /// (off: always run p_max rounds).
    #[serde(default)]
    pub early_round_termination: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub duration_hours: f64,
    pub seed: u64,
    /// 1-based filter/estimator whose outputs feed the moisture recovery.
    pub recovery_index: usize,
    pub guard_dh_m: f64,
}

impl ExperimentConfig {
    /// The bundled loam scenario: 67 cm / 32-node profile, sensors at
    /// compartments 4/12/20/28, daily 8 h irrigation, stressed initial
    /// guesses, 5-day horizon.
    pub fn paper_loam() -> Self {
        ExperimentConfig {
            grid: GridConfig {
                depth_m: 0.67,
                n_nodes: 32,
                sensor_nodes: vec![4, 12, 20, 28],
            },
            soil: SoilConfig {
                k_sat: 2.89e-6,
                theta_s: 0.430,
                theta_r: 0.078,
                alpha: 3.60,
                n: 1.56,
                tortuosity: SoilParams::DEFAULT_TORTUOSITY,
            },
            initial: InitialConfig { head_m: -0.5139 },
            forcing: ForcingConfig {
                rate_m_per_hr: 1.944e-3,
                on_hours: 8.0,
                cycle_hours: 24.0,
            },
            noise: NoiseSection {
                process_std_m: 1e-4,
                moisture_std: 5e-4,
                head_std_m: 5e-4,
            },
            clocks: ClockConfig {
                dekf_period_s: 240.0,
                dmhe_period_s: 1200.0,
                truth_substep_s: 1.0,
            },
            dekf: DekfSection {
                q_diag: 0.0225,
                chi_q: 1.0,
                restart_per_instant: false,
                r: 0.01,
                a: 0.3,
                chi_a: 0.1,
                b: 0.5,
                k_max: 1000,
                eps_consensus: 1e-3,
                eps_settle: 5e-4,
                window: 50,
                keep_running_after_convergence: true,
                guesses: vec![
                    BetaGuess {
                        theta_s: 0.33,
                        theta_r: 0.37,
                        alpha: 1.60,
                        n: 0.57,
                    },
                    BetaGuess {
                        theta_s: 0.48,
                        theta_r: 0.12,
                        alpha: 3.20,
                        n: 1.36,
                    },
                    BetaGuess {
                        theta_s: 0.73,
                        theta_r: 0.15,
                        alpha: 3.85,
                        n: 1.87,
                    },
                    BetaGuess {
                        theta_s: 0.62,
                        theta_r: 0.04,
                        alpha: 2.65,
                        n: 0.70,
                    },
                ],
            },
            dmhe: DmheSection {
                horizon: 12,
                q_w: 1.0,
                r_v: 1.0,
                pi_l: 0.6,
                pi_c: 0.6,
                mu_l: 1.0e11,
                mu_c: 1.0e11,
                p_max: 2,
                state_lo_m: -1.0,
                state_hi_m: -1.0e-6,
                k_sat_lo: 1.0e-7,
                k_sat_hi: 1.0e-5,
                model_substep_s: 30.0,
                guess_multipliers: vec![0.6, 1.5, 0.5, 2.3],
                solver_tol: 1e-8,
                solver_max_iter: 100,
                solver_damping_init: 1e-6,
                early_round_termination: false,
            },
            run: RunSection {
                duration_hours: 120.0,
                seed: 42,
                recovery_index: 1,
                guard_dh_m: 0.1,
            },
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.soil_params()?;
        let ratio = self.clocks.dmhe_period_s / self.clocks.dekf_period_s;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(Error::InvalidConfig(format!(
                "dmhe period ({} s) must be an integer multiple of the dekf period ({} s)",
                self.clocks.dmhe_period_s, self.clocks.dekf_period_s
            )));
        }
        if self.dekf.guesses.len() != self.grid.sensor_nodes.len() {
            return Err(Error::InvalidConfig(format!(
                "{} filter guesses for {} sensor nodes",
                self.dekf.guesses.len(),
                self.grid.sensor_nodes.len()
            )));
        }
        if self.dmhe.guess_multipliers.len() != self.grid.sensor_nodes.len() {
            return Err(Error::InvalidConfig(format!(
                "{} estimator guess multipliers for {} sensor nodes",
                self.dmhe.guess_multipliers.len(),
                self.grid.sensor_nodes.len()
            )));
        }
        if !(self.initial.head_m < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "initial head must be negative, got {}",
                self.initial.head_m
            )));
        }
        if self.run.recovery_index < 1
            || self.run.recovery_index > self.grid.sensor_nodes.len()
        {
            return Err(Error::InvalidConfig(format!(
                "recovery index {} outside 1..={}",
                self.run.recovery_index,
                self.grid.sensor_nodes.len()
            )));
        }
        if !(self.run.duration_hours > 0.0) {
            return Err(Error::InvalidConfig("duration must be positive".into()));
        }
        self.dekf_tuning().validate()?;
        self.mhe_tuning().validate()?;
        if self.noise.process_std_m < 0.0
            || self.noise.moisture_std < 0.0
            || self.noise.head_std_m < 0.0
        {
            return Err(Error::InvalidConfig("noise std must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<ColumnGrid> {
        ColumnGrid::new(
            self.grid.depth_m,
            self.grid.n_nodes,
            self.grid.sensor_nodes.clone(),
        )
    }

    pub fn soil_params(&self) -> Result<SoilParams> {
        SoilParams::with_tortuosity(
            self.soil.k_sat,
            self.soil.theta_s,
            self.soil.theta_r,
            self.soil.alpha,
            self.soil.n,
            self.soil.tortuosity,
        )
    }

    pub fn duration_s(&self) -> f64 {
        self.run.duration_hours * 3600.0
    }

    pub fn forcing_schedule(&self) -> ForcingSchedule {
        ForcingSchedule::daily_cycle(
            self.forcing.rate_m_per_hr / 3600.0,
            self.forcing.on_hours * 3600.0,
            self.forcing.cycle_hours * 3600.0,
            self.duration_s(),
        )
    }

    pub fn noise_config(&self) -> NoiseConfig {
        NoiseConfig {
            process_std_m: self.noise.process_std_m,
            moisture_std: self.noise.moisture_std,
            head_std_m: self.noise.head_std_m,
        }
    }

    pub fn initial_state(&self) -> PressureState {
        PressureState::uniform(self.grid.n_nodes, self.initial.head_m)
    }

    pub fn step_options(&self) -> StepOptions {
        StepOptions {
            dh_guard: self.run.guard_dh_m,
            bottom: BottomBc::FreeDrainage,
        }
    }

    pub fn dekf_tuning(&self) -> DekfTuning {
        DekfTuning {
            q: Matrix4::from_diagonal(&Vector4::from_element(self.dekf.q_diag)),
            chi_q: self.dekf.chi_q,
            replay: if self.dekf.restart_per_instant {
                ReplayMode::RestartPerInstant
            } else {
                ReplayMode::Cumulative
            },
            r: self.dekf.r,
            a: self.dekf.a,
            chi_a: self.dekf.chi_a,
            b: self.dekf.b,
            k_max: self.dekf.k_max,
        }
    }

    pub fn dekf_guesses(&self) -> Vec<Vector4<f64>> {
        self.dekf
            .guesses
            .iter()
            .map(|g| Vector4::new(g.theta_s, g.theta_r, g.alpha, g.n))
            .collect()
    }

    pub fn mhe_tuning(&self) -> MheTuning {
        MheTuning {
            horizon: self.dmhe.horizon,
            q_w: self.dmhe.q_w,
            r_v: self.dmhe.r_v,
            pi_l: self.dmhe.pi_l,
            pi_c: self.dmhe.pi_c,
            mu_l: self.dmhe.mu_l,
            mu_c: self.dmhe.mu_c,
            p_max: self.dmhe.p_max,
            state_lo: self.dmhe.state_lo_m,
            state_hi: self.dmhe.state_hi_m,
            k_sat_lo: self.dmhe.k_sat_lo,
            k_sat_hi: self.dmhe.k_sat_hi,
            model_substep: self.dmhe.model_substep_s,
            tortuosity: self.soil.tortuosity,
            solver: SolverOptions {
                tol: self.dmhe.solver_tol,
                max_iter: self.dmhe.solver_max_iter,
                damping_init: self.dmhe.solver_damping_init,
                ..Default::default()
            },
        }
    }

    /// Ratio of the estimator period to the filter period.
    pub fn clock_ratio(&self) -> usize {
        (self.clocks.dmhe_period_s / self.clocks.dekf_period_s).round() as usize
    }

    pub fn n_dekf_instants(&self) -> usize {
        (self.duration_s() / self.clocks.dekf_period_s).floor() as usize
    }
}

/// Resolves `--preset` names.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    match name {
        "paper-loam" => Ok(ExperimentConfig::paper_loam()),
        other => Err(Error::InvalidConfig(format!(
            "unknown preset '{other}' (available: paper-loam)"
        ))),
    }
}
