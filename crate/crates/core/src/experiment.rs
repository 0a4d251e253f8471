//! End-to-end experiment orchestration: truth simulation, filter phase,
//! convergence hand-off, estimator phase, moisture recovery and metrics.
//!
//! The loop runs on the filter clock. Every instant feeds the four filters;
//! once their estimates are declared converged (instant `tau0`) the
//! estimator bank activates at the next estimator-clock tick and consumes
//! every `ratio`-th measurement from then on. Filters keep running after
//! `tau0` (configurable) and forward their latest estimates to the paired
//! estimators at every estimator instant.

use std::time::Instant;

use nalgebra::{DVector, Vector4};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dekf::{
    self, centralized_ekf_run, convergence_check, dekf_sampling_instant, pairwise_spread,
    DekfBank,
};
use crate::dmhe::{dmhe_sampling_instant, DmheBank, MheSolveRecord};
use crate::sim::{simulate_truth, TruthRun};
use crate::soil::water_content;
use crate::{Error, PressureState, Result, SoilParams};

/// Applies the retention curve node by node: moisture from an estimated
/// head profile and retention parameter estimate. Independent of any
/// saturated-conductivity estimate.
pub fn recover_moisture(x_hat: &DVector<f64>, beta_hat: &Vector4<f64>) -> Result<DVector<f64>> {
    let params = SoilParams {
        k_sat: 1.0,
        theta_s: beta_hat[0],
        theta_r: beta_hat[1],
        alpha: beta_hat[2],
        n: beta_hat[3],
        tortuosity: SoilParams::DEFAULT_TORTUOSITY,
    };
    params.validate()?;
    for (i, &h) in x_hat.iter().enumerate() {
        if !(h < 0.0 && h.is_finite()) {
            return Err(Error::OutOfRange(format!(
                "estimated head at node {} must be negative, got {h}",
                i + 1
            )));
        }
    }
    Ok(DVector::from_fn(x_hat.len(), |i, _| {
        water_content(x_hat[i], &params)
    }))
}

/// One filter log line per (instant, filter).
#[derive(Debug, Clone)]
pub struct DekfLogRow {
    pub k: usize,
    pub filter: usize,
    pub beta: [f64; 4],
    pub trace_p: f64,
    /// Bank-level pairwise spread at this instant.
    pub spread: f64,
}

/// Estimator outputs at one estimator-clock instant.
#[derive(Debug, Clone)]
pub struct DmheInstantEstimates {
    /// Filter-clock index (time_s = k * dekf_period).
    pub k: usize,
    /// Estimator-clock index (k / ratio).
    pub d: usize,
    /// Per-estimator (head profile, k_sat).
    pub estimates: Vec<(DVector<f64>, f64)>,
}

/// Recovered moisture profile at one estimator instant.
#[derive(Debug, Clone)]
pub struct MoistureRow {
    pub k: usize,
    pub theta: DVector<f64>,
}

/// Emitted once the filter estimates are declared converged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub tau0_instant: usize,
    pub tau0_hours: f64,
    /// Each filter's estimate at tau0.
    pub beta_per_filter: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    pub simulate_s: f64,
    pub dekf_s: f64,
    pub dmhe_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InstantRmse {
    pub k: usize,
    pub rmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DekfMetrics {
    pub beta_true: [f64; 4],
    pub spread_at_instant_1: Option<f64>,
    pub spread_at_instant_10: Option<f64>,
    pub spread_at_tau0: Option<f64>,
    pub beta_at_tau0: Option<Vec<[f64; 4]>>,
    pub beta_rel_err_at_tau0: Option<Vec<[f64; 4]>>,
    pub beta_final: Vec<[f64; 4]>,
    pub beta_rel_err_final: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DmheMetrics {
    /// Filter-clock index of the first estimator instant.
    pub activation_instant: usize,
    pub head_rmse_per_instant: Vec<InstantRmse>,
    pub head_rmse_final_24h_per_node: Vec<f64>,
    pub k_sat_true: f64,
    pub k_sat_per_estimator_final: Vec<f64>,
    /// Average over estimators and instants in the final 24 h.
    pub k_sat_avg_final_24h: f64,
    /// Max over nodes and estimator pairs at the last instant (m).
    pub terminal_pairwise_disagreement_m: f64,
    pub solver_fallbacks: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MoistureMetrics {
    pub rmse_per_instant: Vec<InstantRmse>,
    pub rmse_final_24h_per_node: Vec<f64>,
}

/// Deterministic run metrics (no wall-clock content; timings live in the
/// run summary).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunMetrics {
    pub tau0_instant: Option<usize>,
    pub tau0_hours: Option<f64>,
    pub dekf: DekfMetrics,
    pub dmhe: Option<DmheMetrics>,
    pub moisture: Option<MoistureMetrics>,
}

/// Everything a run produces, ready for export.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub truth: TruthRun,
    pub dekf_rows: Vec<DekfLogRow>,
    pub beta_history: Vec<Vec<Vector4<f64>>>,
    pub convergence: Option<ConvergenceRecord>,
    pub dmhe_estimates: Vec<DmheInstantEstimates>,
    pub dmhe_records: Vec<MheSolveRecord>,
    pub moisture: Vec<MoistureRow>,
    pub metrics: RunMetrics,
    pub timings: Timings,
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    /// Disable the estimator phase (filter-only runs).
    pub enable_dmhe: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { enable_dmhe: true }
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArtifacts> {
    run_experiment_opts(config, RunOptions::default())
}

pub fn run_experiment_opts(config: &ExperimentConfig, opts: RunOptions) -> Result<RunArtifacts> {
    config.validate()?;
    let total_clock = Instant::now();
    let grid = config.grid()?;
    let params = config.soil_params()?;
    let forcing = config.forcing_schedule();
    let step_opts = config.step_options();
    let seed = config.run.seed;
    let n_y = grid.n_sensors();
    let ratio = config.clock_ratio();

    let sim_clock = Instant::now();
    let truth = simulate_truth(
        &grid,
        &params,
        &forcing,
        &config.initial_state(),
        config.duration_s(),
        config.clocks.dekf_period_s,
        config.clocks.truth_substep_s,
        &config.noise_config(),
        seed,
        &step_opts,
    )?;
    let simulate_s = sim_clock.elapsed().as_secs_f64();

    let mut dekf_bank = DekfBank::new(
        config.dekf_guesses(),
        dekf::initial_covariances(n_y, seed),
        config.dekf_tuning(),
    )?;
    let mut dmhe_bank: Option<DmheBank> = None;

    let mut dekf_rows = Vec::new();
    let mut beta_history: Vec<Vec<Vector4<f64>>> = Vec::new();
    let mut convergence: Option<ConvergenceRecord> = None;
    let mut dekf_active = true;
    let mut consecutive_ok = 0usize;
    let mut betas: Vec<Vector4<f64>> = dekf_bank.betas();

    let mut dmhe_estimates = Vec::new();
    let mut dmhe_records = Vec::new();
    let mut moisture_rows = Vec::new();
    let mut dekf_s = 0.0;
    let mut dmhe_s = 0.0;

    let recovery = config.run.recovery_index - 1;

    for k in 0..=truth.n_instants() {
        if dekf_active {
            let clock = Instant::now();
            betas = dekf_sampling_instant(&mut dekf_bank, &truth.pairs[k], k, seed)?;
            dekf_s += clock.elapsed().as_secs_f64();
        }
        beta_history.push(betas.clone());
        let spread = pairwise_spread(&betas);
        for (i, f) in dekf_bank.filters.iter().enumerate() {
            dekf_rows.push(DekfLogRow {
                k,
                filter: i,
                beta: [f.beta_hat[0], f.beta_hat[1], f.beta_hat[2], f.beta_hat[3]],
                trace_p: f.p.trace(),
                spread,
            });
        }

        // Convergence detection: `window` consecutive instants with small
        // spread and small instant-to-instant movement.
        if convergence.is_none() && k >= 1 {
            let settle_ok = beta_history[k]
                .iter()
                .zip(&beta_history[k - 1])
                .all(|(cur, prev)| (cur - prev).norm() < config.dekf.eps_settle);
            if settle_ok && spread < config.dekf.eps_consensus {
                consecutive_ok += 1;
            } else {
                consecutive_ok = 0;
            }
            if consecutive_ok >= config.dekf.window {
                convergence = Some(ConvergenceRecord {
                    tau0_instant: k,
                    tau0_hours: k as f64 * config.clocks.dekf_period_s / 3600.0,
                    beta_per_filter: betas
                        .iter()
                        .map(|b| [b[0], b[1], b[2], b[3]])
                        .collect(),
                });
                if !config.dekf.keep_running_after_convergence {
                    dekf_active = false;
                }
            }
        }

        // Estimator phase on the slower clock, from tau0 onward.
        if opts.enable_dmhe && k % ratio == 0 {
            if let Some(conv) = &convergence {
                let d = k / ratio;
                let clock = Instant::now();
                if dmhe_bank.is_none() {
                    let x0 = config.initial.head_m;
                    let profiles: Vec<DVector<f64>> = config
                        .dmhe
                        .guess_multipliers
                        .iter()
                        .map(|m| DVector::from_element(grid.n_nodes, m * x0))
                        .collect();
                    let k_sats: Vec<f64> = config
                        .dmhe
                        .guess_multipliers
                        .iter()
                        .map(|m| m * params.k_sat)
                        .collect();
                    dmhe_bank = Some(DmheBank::new(
                        grid.n_nodes,
                        n_y,
                        d,
                        profiles,
                        k_sats,
                        betas.clone(),
                        config.mhe_tuning(),
                        step_opts,
                    )?);
                    debug_assert!(conv.tau0_instant <= k);
                }
                let bank = dmhe_bank.as_mut().unwrap();
                let y: Vec<f64> = truth.pairs[k].iter().map(|p| p.moisture).collect();
                let (outputs, records) = dmhe_sampling_instant(
                    bank,
                    d,
                    &y,
                    &betas,
                    &grid,
                    &forcing,
                    config.clocks.dmhe_period_s,
                )?;
                dmhe_records.extend(records);
                let theta = recover_moisture(&outputs[recovery].0, &betas[recovery])
                    .map_err(|e| e.in_phase("moisture-recovery", k, recovery))?;
                moisture_rows.push(MoistureRow { k, theta });
                dmhe_estimates.push(DmheInstantEstimates {
                    k,
                    d,
                    estimates: outputs,
                });
                dmhe_s += clock.elapsed().as_secs_f64();
            }
        }
    }

    let metrics = compute_metrics(
        config,
        &beta_history,
        &truth.states,
        &dmhe_estimates,
        &dmhe_records,
        &moisture_rows,
    );

    // Sanity parity between the streaming detector and the batch detector.
    debug_assert_eq!(
        convergence.as_ref().map(|c| c.tau0_instant),
        convergence_check(
            &beta_history,
            config.dekf.window,
            config.dekf.eps_consensus,
            config.dekf.eps_settle
        )
    );

    Ok(RunArtifacts {
        config: config.clone(),
        truth,
        dekf_rows,
        beta_history,
        convergence,
        dmhe_estimates,
        dmhe_records,
        moisture: moisture_rows,
        metrics,
        timings: Timings {
            simulate_s,
            dekf_s,
            dmhe_s,
            total_s: total_clock.elapsed().as_secs_f64(),
        },
    })
}

fn rel_err4(beta: &Vector4<f64>, truth: &Vector4<f64>) -> [f64; 4] {
    [
        ((beta[0] - truth[0]) / truth[0]).abs(),
        ((beta[1] - truth[1]) / truth[1]).abs(),
        ((beta[2] - truth[2]) / truth[2]).abs(),
        ((beta[3] - truth[3]) / truth[3]).abs(),
    ]
}

/// Computes the deterministic metrics from run series. Shared between the
/// live run and the offline recompute of stored runs.
pub fn compute_metrics(
    config: &ExperimentConfig,
    beta_history: &[Vec<Vector4<f64>>],
    truth_states: &[PressureState],
    dmhe_estimates: &[DmheInstantEstimates],
    dmhe_records: &[MheSolveRecord],
    moisture_rows: &[MoistureRow],
) -> RunMetrics {
    let beta_true = Vector4::new(
        config.soil.theta_s,
        config.soil.theta_r,
        config.soil.alpha,
        config.soil.n,
    );
    let tau0 = convergence_check(
        beta_history,
        config.dekf.window,
        config.dekf.eps_consensus,
        config.dekf.eps_settle,
    );

    let spread_at = |k: usize| beta_history.get(k).map(|b| pairwise_spread(b));
    let last = beta_history.last().cloned().unwrap_or_default();
    let dekf = DekfMetrics {
        beta_true: [beta_true[0], beta_true[1], beta_true[2], beta_true[3]],
        spread_at_instant_1: spread_at(1),
        spread_at_instant_10: spread_at(10),
        spread_at_tau0: tau0.and_then(spread_at),
        beta_at_tau0: tau0.map(|t| {
            beta_history[t]
                .iter()
                .map(|b| [b[0], b[1], b[2], b[3]])
                .collect()
        }),
        beta_rel_err_at_tau0: tau0.map(|t| {
            beta_history[t]
                .iter()
                .map(|b| rel_err4(b, &beta_true))
                .collect()
        }),
        beta_final: last.iter().map(|b| [b[0], b[1], b[2], b[3]]).collect(),
        beta_rel_err_final: last.iter().map(|b| rel_err4(b, &beta_true)).collect(),
    };

    let final_window_start =
        (config.duration_s() - 24.0 * 3600.0).max(0.0) / config.clocks.dekf_period_s;

    let dmhe = if dmhe_estimates.is_empty() {
        None
    } else {
        let recovery = config.run.recovery_index - 1;
        let n_nodes = config.grid.n_nodes;
        let mut rmse_series = Vec::with_capacity(dmhe_estimates.len());
        let mut sq_final = vec![0.0; n_nodes];
        let mut final_count = 0usize;
        let mut k_sum_final = 0.0;
        let mut k_count_final = 0usize;
        for inst in dmhe_estimates {
            let truth_h = &truth_states[inst.k].h;
            let x_hat = &inst.estimates[recovery].0;
            let mut sq = 0.0;
            for i in 0..n_nodes {
                sq += (x_hat[i] - truth_h[i]).powi(2);
            }
            rmse_series.push(InstantRmse {
                k: inst.k,
                rmse: (sq / n_nodes as f64).sqrt(),
            });
            if inst.k as f64 >= final_window_start {
                for i in 0..n_nodes {
                    sq_final[i] += (x_hat[i] - truth_h[i]).powi(2);
                }
                final_count += 1;
                for (_, k_sat) in &inst.estimates {
                    k_sum_final += k_sat;
                    k_count_final += 1;
                }
            }
        }
        let head_rmse_final_24h_per_node: Vec<f64> = sq_final
            .iter()
            .map(|s| (s / final_count.max(1) as f64).sqrt())
            .collect();

        let last = dmhe_estimates.last().unwrap();
        let mut disagreement: f64 = 0.0;
        for i in 0..last.estimates.len() {
            for j in i + 1..last.estimates.len() {
                disagreement =
                    disagreement.max((&last.estimates[i].0 - &last.estimates[j].0).amax());
            }
        }
        Some(DmheMetrics {
            activation_instant: dmhe_estimates[0].k,
            head_rmse_per_instant: rmse_series,
            head_rmse_final_24h_per_node,
            k_sat_true: config.soil.k_sat,
            k_sat_per_estimator_final: last.estimates.iter().map(|(_, k)| *k).collect(),
            k_sat_avg_final_24h: if k_count_final > 0 {
                k_sum_final / k_count_final as f64
            } else {
                f64::NAN
            },
            terminal_pairwise_disagreement_m: disagreement,
            solver_fallbacks: dmhe_records.iter().filter(|r| r.fallback).count(),
        })
    };

    let moisture = if moisture_rows.is_empty() {
        None
    } else {
        let n_nodes = config.grid.n_nodes;
        let truth_params = config.soil_params().expect("validated config");
        let mut rmse_series = Vec::with_capacity(moisture_rows.len());
        let mut sq_final = vec![0.0; n_nodes];
        let mut final_count = 0usize;
        for row in moisture_rows {
            let truth_h = &truth_states[row.k].h;
            let mut sq = 0.0;
            for i in 0..n_nodes {
                let theta_true = water_content(truth_h[i], &truth_params);
                let diff = row.theta[i] - theta_true;
                sq += diff * diff;
                if row.k as f64 >= final_window_start {
                    sq_final[i] += diff * diff;
                }
            }
            if row.k as f64 >= final_window_start {
                final_count += 1;
            }
            rmse_series.push(InstantRmse {
                k: row.k,
                rmse: (sq / n_nodes as f64).sqrt(),
            });
        }
        Some(MoistureMetrics {
            rmse_per_instant: rmse_series,
            rmse_final_24h_per_node: sq_final
                .iter()
                .map(|s| (s / final_count.max(1) as f64).sqrt())
                .collect(),
        })
    };

    RunMetrics {
        tau0_instant: tau0,
        tau0_hours: tau0.map(|t| t as f64 * config.clocks.dekf_period_s / 3600.0),
        dekf,
        dmhe,
        moisture,
    }
}

/// Centralized-baseline output for one initial guess.
#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub guess_index: usize,
    pub trajectory: Vec<Vector4<f64>>,
    pub final_beta: Vector4<f64>,
    pub final_rel_err: [f64; 4],
}

/// Runs the centralized single-filter baseline on the same simulated
/// measurement stream, initialized from Table-style guess `guess_index`
/// (1-based).
pub fn run_baseline_centralized_ekf(
    config: &ExperimentConfig,
    guess_index: usize,
) -> Result<BaselineRun> {
    config.validate()?;
    let guesses = config.dekf_guesses();
    if guess_index < 1 || guess_index > guesses.len() {
        return Err(Error::InvalidConfig(format!(
            "guess index {guess_index} outside 1..={}",
            guesses.len()
        )));
    }
    let grid = config.grid()?;
    let params = config.soil_params()?;
    let forcing = config.forcing_schedule();
    let truth = simulate_truth(
        &grid,
        &params,
        &forcing,
        &config.initial_state(),
        config.duration_s(),
        config.clocks.dekf_period_s,
        config.clocks.truth_substep_s,
        &config.noise_config(),
        config.run.seed,
        &config.step_options(),
    )?;
    let p0 = dekf::initial_covariances(grid.n_sensors(), config.run.seed)[guess_index - 1];
    let trajectory = centralized_ekf_run(
        &guesses[guess_index - 1],
        &p0,
        &truth.pairs,
        &config.dekf_tuning(),
        config.run.seed,
    )?;
    let beta_true = Vector4::new(
        config.soil.theta_s,
        config.soil.theta_r,
        config.soil.alpha,
        config.soil.n,
    );
    let final_beta = *trajectory.last().expect("nonempty run");
    Ok(BaselineRun {
        guess_index,
        final_rel_err: rel_err4(&final_beta, &beta_true),
        final_beta,
        trajectory,
    })
}
