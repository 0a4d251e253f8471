//! Consensus-based distributed moving horizon estimation of the full head
//! profile and the saturated conductivity.
//!
//! Each sensor node owns a local estimator that fits a window of its own
//! moisture measurements against the column model, with the window states
//! and `k_sat` as decision variables. The cost stacks weighted process and
//! measurement residuals, an arrival term anchoring the window start to the
//! estimator's own previous solution, and a consensus term pulling the
//! window start (and `k_sat`) toward the weighted average of the peers'
//! estimates. Within one sampling instant the estimators are solved in
//! `p_max` synchronous rounds, exchanging estimates between rounds. During
//! the first `N` instants after activation the window grows from one
//! measurement and the arrival term is omitted (full-information mode).

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Vector4};

use crate::nlsq::{self, LeastSquaresProblem, NormalStructure, SolveReport, SolverOptions};
use crate::richards::{transition, transition_with_jacobian, StepOptions};
use crate::soil::{capillary_capacity, water_content, SoilParams};
use crate::{ColumnGrid, Error, ForcingSchedule, PressureState, Result};

/// Weights and limits of the local estimators. The matrix weights are the
/// cost-side values: the cost uses their inverses for `q_w`, `r_v`, `pi_l`,
/// `pi_c` and the direct scalars `mu_l`, `mu_c`. Setting a matrix weight to
/// infinity disables its residual block.
#[derive(Debug, Clone)]
pub struct MheTuning {
    /// Window length N (a full window holds N+1 instants).
    pub horizon: usize,
    /// Process-disturbance weight (diagonal value of Q_w).
    pub q_w: f64,
    /// Measurement-noise weight.
    pub r_v: f64,
    /// Arrival-cost state weight (diagonal value of Pi_L).
    pub pi_l: f64,
    /// Consensus state weight (diagonal value of Pi_C).
    pub pi_c: f64,
    /// Arrival-cost k_sat weight.
    pub mu_l: f64,
    /// Consensus k_sat weight.
    pub mu_c: f64,
    /// Solver rounds per sampling instant.
    pub p_max: usize,
    /// Box bounds on every head entry (m).
    pub state_lo: f64,
    pub state_hi: f64,
    /// Box bounds on k_sat (m/s).
    pub k_sat_lo: f64,
    pub k_sat_hi: f64,
    /// Integration substep of the estimator's internal model (s).
    pub model_substep: f64,
    /// Mualem exponent used by the internal model.
    pub tortuosity: f64,
    pub solver: SolverOptions,
}

impl Default for MheTuning {
    fn default() -> Self {
        MheTuning {
            horizon: 12,
            q_w: 1.0,
            r_v: 1.0,
            pi_l: 0.6,
            pi_c: 0.6,
            mu_l: 1.0e11,
            mu_c: 1.0e11,
            p_max: 2,
            state_lo: -1.0,
            state_hi: -1.0e-6,
            k_sat_lo: 1.0e-7,
            k_sat_hi: 1.0e-5,
            model_substep: 30.0,
            tortuosity: SoilParams::DEFAULT_TORTUOSITY,
            solver: SolverOptions {
                damping_init: 1e-6,
                ..Default::default()
            },
        }
    }
}

impl MheTuning {
    pub fn validate(&self) -> Result<()> {
        if self.p_max == 0 {
            return Err(Error::InvalidConfig("p_max must be at least 1".into()));
        }
        if !(self.q_w > 0.0 && self.r_v > 0.0 && self.pi_l > 0.0 && self.pi_c > 0.0) {
            return Err(Error::InvalidConfig("mhe weights must be positive".into()));
        }
        if !(self.mu_l >= 0.0 && self.mu_c >= 0.0) {
            return Err(Error::InvalidConfig("mu weights must be nonnegative".into()));
        }
        if !(self.state_lo < self.state_hi && self.state_hi < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "state bounds invalid: [{}, {}]",
                self.state_lo, self.state_hi
            )));
        }
        if !(self.k_sat_lo > 0.0 && self.k_sat_lo < self.k_sat_hi) {
            return Err(Error::InvalidConfig(format!(
                "k_sat bounds invalid: [{}, {}]",
                self.k_sat_lo, self.k_sat_hi
            )));
        }
        if !(self.model_substep > 0.0) {
            return Err(Error::InvalidConfig("model substep must be positive".into()));
        }
        Ok(())
    }

    fn scale_w(&self) -> f64 {
        if self.q_w.is_infinite() {
            0.0
        } else {
            (1.0 / self.q_w).sqrt()
        }
    }

    fn scale_v(&self) -> f64 {
        if self.r_v.is_infinite() {
            0.0
        } else {
            (1.0 / self.r_v).sqrt()
        }
    }

    fn scale_l(&self) -> f64 {
        if self.pi_l.is_infinite() {
            0.0
        } else {
            (1.0 / self.pi_l).sqrt()
        }
    }

    fn scale_c(&self) -> f64 {
        if self.pi_c.is_infinite() {
            0.0
        } else {
            (1.0 / self.pi_c).sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MheMode {
    /// Window covers everything since activation; no arrival term.
    FullInformation,
    Moving,
}

/// Uniformly weighted average of the peers' (window-start state, k_sat)
/// values, excluding estimator `i`. Returns `None` without peers.
pub fn consensus_targets(
    i: usize,
    values: &[(DVector<f64>, f64)],
) -> Option<(DVector<f64>, f64)> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let weight = 1.0 / (n - 1) as f64;
    let mut x_bar = DVector::zeros(values[0].0.len());
    let mut k_bar = 0.0;
    for (j, (x, k)) in values.iter().enumerate() {
        if j != i {
            x_bar.axpy(weight, x, 1.0);
            k_bar += weight * k;
        }
    }
    Some((x_bar, k_bar))
}

/// The transcribed least-squares problem of one local estimator at one
/// sampling instant: decision variables are the window states (one block per
/// instant) followed by `k_sat`.
pub struct MheProblem<'a> {
    grid: &'a ColumnGrid,
    forcing: &'a ForcingSchedule,
    /// Retention parameters from the filter; `k_sat` is replaced per
    /// evaluation by the trailing decision variable.
    params: SoilParams,
    /// 0-based state index of this estimator's sensor.
    sensor_idx: usize,
    /// Window measurements, oldest first.
    meas: Vec<f64>,
    /// Absolute time of the window start (s).
    t_lo: f64,
    /// Sampling period between window instants (s).
    period: f64,
    mode: MheMode,
    prior: Option<(DVector<f64>, f64)>,
    consensus: Option<(DVector<f64>, f64)>,
    tuning: &'a MheTuning,
    step_opts: StepOptions,
    /// Internal scaling of the k_sat decision variable; heads are O(0.1-1)
    /// while k_sat is O(1e-6), so the solver sees k_sat / k_scale.
    k_scale: f64,
}

impl<'a> MheProblem<'a> {
    pub fn window_len(&self) -> usize {
        self.meas.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n_nodes
    }

    fn has_arrival(&self) -> bool {
        self.mode == MheMode::Moving && self.prior.is_some()
    }

    /// Splits a decision vector into window states and k_sat.
    pub fn unpack(&self, z: &DVector<f64>) -> (Vec<DVector<f64>>, f64) {
        let n = self.n_nodes();
        let w = self.window_len();
        let seq = (0..w).map(|d| z.rows(d * n, n).into_owned()).collect();
        (seq, z[w * n] * self.k_scale)
    }

    pub fn pack(&self, seq: &[DVector<f64>], k_sat: f64) -> DVector<f64> {
        let n = self.n_nodes();
        let mut z = DVector::zeros(seq.len() * n + 1);
        for (d, x) in seq.iter().enumerate() {
            z.rows_mut(d * n, n).copy_from(x);
        }
        z[seq.len() * n] = k_sat / self.k_scale;
        z
    }

    /// The cost with the estimator's weighting, `J = sum of weighted squared
    /// residual blocks` (twice the solver's internal `1/2 ||r||^2`).
    pub fn cost_at(&self, z: &DVector<f64>) -> Result<f64> {
        let mut r = DVector::zeros(self.residual_len());
        if !self.residuals(z, &mut r) {
            return Err(Error::Solver(
                "model not evaluable at the requested point".into(),
            ));
        }
        Ok(r.norm_squared())
    }
}

impl<'a> LeastSquaresProblem for MheProblem<'a> {
    fn residual_len(&self) -> usize {
        let n = self.n_nodes();
        let w = self.window_len();
        let mut m = (w - 1) * n + w;
        if self.has_arrival() {
            m += n + 1;
        }
        if self.consensus.is_some() {
            m += n + 1;
        }
        m
    }

    fn var_len(&self) -> usize {
        self.window_len() * self.n_nodes() + 1
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let nv = self.var_len();
        let mut lo = DVector::from_element(nv, self.tuning.state_lo);
        let mut hi = DVector::from_element(nv, self.tuning.state_hi);
        lo[nv - 1] = self.tuning.k_sat_lo / self.k_scale;
        hi[nv - 1] = self.tuning.k_sat_hi / self.k_scale;
        (lo, hi)
    }

    fn residuals(&self, z: &DVector<f64>, out: &mut DVector<f64>) -> bool {
        let n = self.n_nodes();
        let w = self.window_len();
        let k_sat = z[w * n] * self.k_scale;
        let params = self.params.with_k_sat(k_sat);
        let sw = self.tuning.scale_w();
        let sv = self.tuning.scale_v();
        let mut row = 0;

        for d in 0..w - 1 {
            let x_d = PressureState::new(z.rows(d * n, n).into_owned());
            let pred = match transition(
                &x_d,
                self.grid,
                &params,
                self.forcing,
                self.t_lo + d as f64 * self.period,
                self.period,
                self.tuning.model_substep,
                &self.step_opts,
            ) {
                Ok(x) => x,
                Err(_) => return false,
            };
            for i in 0..n {
                out[row] = sw * (z[(d + 1) * n + i] - pred.h[i]);
                row += 1;
            }
        }
        for (d, &y) in self.meas.iter().enumerate() {
            let h_sensor = z[d * n + self.sensor_idx];
            out[row] = sv * (y - water_content(h_sensor, &self.params));
            row += 1;
        }
        if self.has_arrival() {
            let (prior_x, prior_k) = self.prior.as_ref().unwrap();
            let sl = self.tuning.scale_l();
            for i in 0..n {
                out[row] = sl * (z[i] - prior_x[i]);
                row += 1;
            }
            out[row] = self.tuning.mu_l.sqrt() * (k_sat - prior_k);
            row += 1;
        }
        if let Some((x_bar, k_bar)) = &self.consensus {
            let sc = self.tuning.scale_c();
            for i in 0..n {
                out[row] = sc * (z[i] - x_bar[i]);
                row += 1;
            }
            out[row] = self.tuning.mu_c.sqrt() * (k_sat - k_bar);
            row += 1;
        }
        debug_assert_eq!(row, self.residual_len());
        out.iter().all(|v| v.is_finite())
    }

    fn jacobian(&self, z: &DVector<f64>, out: &mut DMatrix<f64>) -> bool {
        let n = self.n_nodes();
        let w = self.window_len();
        let k_col = w * n;
        let k_sat = z[k_col] * self.k_scale;
        let params = self.params.with_k_sat(k_sat);
        let sw = self.tuning.scale_w();
        let sv = self.tuning.scale_v();
        out.fill(0.0);
        let mut row = 0;

        for d in 0..w - 1 {
            let x_d = PressureState::new(z.rows(d * n, n).into_owned());
            let (_, jac_x, jac_k) = match transition_with_jacobian(
                &x_d,
                self.grid,
                &params,
                self.forcing,
                self.t_lo + d as f64 * self.period,
                self.period,
                self.tuning.model_substep,
                &self.step_opts,
            ) {
                Ok(v) => v,
                Err(_) => return false,
            };
            for i in 0..n {
                out[(row + i, (d + 1) * n + i)] = sw;
                for j in 0..n {
                    out[(row + i, d * n + j)] = -sw * jac_x[(i, j)];
                }
                out[(row + i, k_col)] = -sw * jac_k[i] * self.k_scale;
            }
            row += n;
        }
        for d in 0..w {
            let h_sensor = z[d * n + self.sensor_idx];
            out[(row, d * n + self.sensor_idx)] =
                -sv * capillary_capacity(h_sensor, &self.params);
            row += 1;
        }
        if self.has_arrival() {
            let sl = self.tuning.scale_l();
            for i in 0..n {
                out[(row, i)] = sl;
                row += 1;
            }
            out[(row, k_col)] = self.tuning.mu_l.sqrt() * self.k_scale;
            row += 1;
        }
        if self.consensus.is_some() {
            let sc = self.tuning.scale_c();
            for i in 0..n {
                out[(row, i)] = sc;
                row += 1;
            }
            out[(row, k_col)] = self.tuning.mu_c.sqrt() * self.k_scale;
            row += 1;
        }
        debug_assert_eq!(row, self.residual_len());
        out.iter().all(|v| v.is_finite())
    }

    fn structure(&self) -> NormalStructure {
        NormalStructure::BlockedChain {
            block_len: self.n_nodes(),
            num_blocks: self.window_len(),
            tail_len: 1,
        }
    }
}

/// State of one local estimator between sampling instants.
#[derive(Debug, Clone)]
pub struct MheEstimatorState {
    /// Index of this estimator's sensor in `grid.sensor_nodes`.
    pub sensor: usize,
    /// Window measurements (time index, moisture), oldest first.
    pub meas: VecDeque<(usize, f64)>,
    /// Most recent optimal state sequence and the time index of its first
    /// entry.
    pub opt_seq: Vec<DVector<f64>>,
    pub opt_lo: usize,
    pub k_sat_hat: f64,
    /// Latest retention estimate received from the paired filter.
    pub beta_hat: Vector4<f64>,
}

impl MheEstimatorState {
    pub fn x_hat(&self) -> &DVector<f64> {
        self.opt_seq.last().expect("estimator holds a window")
    }
}

/// Diagnostics of one local solve.
#[derive(Debug, Clone)]
pub struct MheSolveRecord {
    /// DMHE sampling index.
    pub instant: usize,
    pub estimator: usize,
    /// Round p (1-based).
    pub iteration: usize,
    /// Cost J at the adopted point.
    pub cost: f64,
    pub solver_iterations: usize,
    /// True when the solve failed and the warm start was kept.
    pub fallback: bool,
    pub k_sat: f64,
    /// Adopted terminal state of the window.
    pub x_terminal: DVector<f64>,
}

/// The bank of local MHE estimators.
#[derive(Debug, Clone)]
pub struct DmheBank {
    pub estimators: Vec<MheEstimatorState>,
    pub tuning: MheTuning,
    /// DMHE sampling index at which the scheme was activated.
    pub activation: usize,
    step_opts: StepOptions,
}

impl DmheBank {
    /// Builds the bank at activation instant `activation`. Each estimator
    /// starts from an initial state-profile guess and a `k_sat` guess, both
    /// projected into the bounds.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_nodes: usize,
        n_estimators: usize,
        activation: usize,
        init_profiles: Vec<DVector<f64>>,
        init_k_sat: Vec<f64>,
        betas: Vec<Vector4<f64>>,
        tuning: MheTuning,
        step_opts: StepOptions,
    ) -> Result<Self> {
        tuning.validate()?;
        if init_profiles.len() != n_estimators
            || init_k_sat.len() != n_estimators
            || betas.len() != n_estimators
        {
            return Err(Error::InvalidConfig(format!(
                "need {n_estimators} initial profiles, k_sat guesses and betas"
            )));
        }
        let estimators = (0..n_estimators)
            .map(|i| {
                let mut profile = init_profiles[i].clone();
                if profile.len() != n_nodes {
                    return Err(Error::InvalidConfig(format!(
                        "initial profile {i} has {} nodes, expected {n_nodes}",
                        profile.len()
                    )));
                }
                for v in profile.iter_mut() {
                    *v = v.clamp(tuning.state_lo, tuning.state_hi);
                }
                Ok(MheEstimatorState {
                    sensor: i,
                    meas: VecDeque::new(),
                    opt_seq: vec![profile],
                    opt_lo: activation,
                    k_sat_hat: init_k_sat[i].clamp(tuning.k_sat_lo, tuning.k_sat_hi),
                    beta_hat: betas[i],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DmheBank {
            estimators,
            tuning,
            activation,
            step_opts,
        })
    }

    pub fn n_estimators(&self) -> usize {
        self.estimators.len()
    }

    /// Mode at DMHE sampling index `d`.
    pub fn mode_at(&self, d: usize) -> MheMode {
        if d < self.activation + self.tuning.horizon {
            MheMode::FullInformation
        } else {
            MheMode::Moving
        }
    }
}

/// Assembles the local problem of estimator `state` over its current window.
#[allow(clippy::too_many_arguments)]
pub fn assemble_problem<'a>(
    state: &MheEstimatorState,
    targets: Option<(DVector<f64>, f64)>,
    prior: Option<(DVector<f64>, f64)>,
    mode: MheMode,
    grid: &'a ColumnGrid,
    forcing: &'a ForcingSchedule,
    period: f64,
    tuning: &'a MheTuning,
    step_opts: StepOptions,
) -> Result<MheProblem<'a>> {
    if state.meas.is_empty() {
        return Err(Error::InvalidConfig("estimator window is empty".into()));
    }
    let lo = state.meas.front().unwrap().0;
    let params = SoilParams {
        k_sat: state.k_sat_hat,
        theta_s: state.beta_hat[0],
        theta_r: state.beta_hat[1],
        alpha: state.beta_hat[2],
        n: state.beta_hat[3],
        tortuosity: tuning.tortuosity,
    };
    params.validate().map_err(|e| {
        Error::InvalidConfig(format!(
            "estimator {} received invalid beta: {e}",
            state.sensor
        ))
    })?;
    Ok(MheProblem {
        grid,
        forcing,
        params,
        sensor_idx: grid.sensor_index0(state.sensor),
        meas: state.meas.iter().map(|&(_, y)| y).collect(),
        t_lo: lo as f64 * period,
        period,
        mode,
        prior,
        consensus: targets,
        tuning,
        step_opts,
        k_scale: tuning.k_sat_hi,
    })
}

/// Output of one local solve.
pub struct MheSolveOutput {
    pub seq: Vec<DVector<f64>>,
    pub k_sat: f64,
    /// Cost J at the solution.
    pub cost: f64,
    pub report: SolveReport,
}

/// Minimizes the assembled problem from a feasible warm start.
pub fn solve_problem(
    problem: &MheProblem<'_>,
    warm_seq: &[DVector<f64>],
    warm_k_sat: f64,
    opts: &SolverOptions,
) -> Result<MheSolveOutput> {
    let z0 = problem.pack(warm_seq, warm_k_sat);
    let report = nlsq::minimize(problem, &z0, opts)?;
    let (seq, k_sat) = problem.unpack(&report.x);
    Ok(MheSolveOutput {
        seq,
        k_sat,
        cost: 2.0 * report.cost,
        report,
    })
}

/// Per-estimator warm start: the previous optimal sequence aligned to the
/// current window, with the newest slot filled by propagating the last
/// state through the model.
#[allow(clippy::too_many_arguments)]
fn warm_start(
    state: &MheEstimatorState,
    lo: usize,
    window: usize,
    grid: &ColumnGrid,
    forcing: &ForcingSchedule,
    period: f64,
    tuning: &MheTuning,
    step_opts: &StepOptions,
) -> (Vec<DVector<f64>>, f64) {
    let params = SoilParams {
        k_sat: state.k_sat_hat,
        theta_s: state.beta_hat[0],
        theta_r: state.beta_hat[1],
        alpha: state.beta_hat[2],
        n: state.beta_hat[3],
        tortuosity: tuning.tortuosity,
    };
    let mut seq: Vec<DVector<f64>> = Vec::with_capacity(window);
    for j in 0..window {
        let t_idx = lo + j;
        let offset = t_idx as isize - state.opt_lo as isize;
        if offset >= 0 && (offset as usize) < state.opt_seq.len() {
            seq.push(state.opt_seq[offset as usize].clone());
        } else {
            // propagate the previous estimate one period forward
            let last = seq
                .last()
                .cloned()
                .unwrap_or_else(|| state.opt_seq.last().unwrap().clone());
            let prop = transition(
                &PressureState::new(last.clone()),
                grid,
                &params,
                forcing,
                (t_idx.max(1) - 1) as f64 * period,
                period,
                tuning.model_substep,
                step_opts,
            )
            .map(|s| s.h)
            .unwrap_or(last);
            seq.push(prop);
        }
    }
    for x in seq.iter_mut() {
        for v in x.iter_mut() {
            *v = v.clamp(tuning.state_lo, tuning.state_hi);
        }
    }
    (seq, state.k_sat_hat)
}

/// Runs one DMHE sampling instant: ingests each estimator's measurement and
/// current filter estimate, then performs `p_max` synchronous solve rounds
/// with consensus exchange. Returns the per-estimator terminal estimates
/// `(x_hat, k_sat_hat)` and the solve diagnostics.
pub fn dmhe_sampling_instant(
    bank: &mut DmheBank,
    d: usize,
    measurements: &[f64],
    betas: &[Vector4<f64>],
    grid: &ColumnGrid,
    forcing: &ForcingSchedule,
    period: f64,
) -> Result<(Vec<(DVector<f64>, f64)>, Vec<MheSolveRecord>)> {
    let n_est = bank.n_estimators();
    if measurements.len() != n_est || betas.len() != n_est {
        return Err(Error::InvalidConfig(format!(
            "expected {n_est} measurements and betas, got {} and {}",
            measurements.len(),
            betas.len()
        )));
    }
    if d < bank.activation {
        return Err(Error::OutOfRange(format!(
            "instant {d} precedes activation {}",
            bank.activation
        )));
    }

    let horizon = bank.tuning.horizon;
    let lo = d.saturating_sub(horizon).max(bank.activation);
    let mode = bank.mode_at(d);
    let tuning = bank.tuning.clone();
    let step_opts = bank.step_opts;

    // Step 1: receive the measurement and the updated retention estimate.
    for (i, est) in bank.estimators.iter_mut().enumerate() {
        est.beta_hat = betas[i];
        est.meas.push_back((d, measurements[i]));
        while est.meas.front().map(|&(t, _)| t < lo).unwrap_or(false) {
            est.meas.pop_front();
        }
    }

    // Warm starts and the previous-instant values used by round p = 1.
    let mut current: Vec<(Vec<DVector<f64>>, f64)> = Vec::with_capacity(n_est);
    let mut prev_values: Vec<(DVector<f64>, f64)> = Vec::with_capacity(n_est);
    let mut priors: Vec<Option<(DVector<f64>, f64)>> = Vec::with_capacity(n_est);
    for est in &bank.estimators {
        let window = d - lo + 1;
        current.push(warm_start(
            est, lo, window, grid, forcing, period, &tuning, &step_opts,
        ));
        let offset = lo - est.opt_lo.min(lo);
        let anchor = est
            .opt_seq
            .get(offset)
            .unwrap_or_else(|| est.opt_seq.last().unwrap())
            .clone();
        prev_values.push((anchor.clone(), est.k_sat_hat));
        priors.push(match mode {
            MheMode::Moving => Some((anchor, est.k_sat_hat)),
            MheMode::FullInformation => None,
        });
    }

    let mut records = Vec::with_capacity(n_est * tuning.p_max);

    for p in 1..=tuning.p_max {
        // Snapshot for consensus: previous instant at p = 1, previous round
        // afterwards.
        let snapshot: Vec<(DVector<f64>, f64)> = if p == 1 {
            prev_values.clone()
        } else {
            current
                .iter()
                .map(|(seq, k)| (seq[0].clone(), *k))
                .collect()
        };

        for i in 0..n_est {
            let targets = consensus_targets(i, &snapshot);
            let problem = assemble_problem(
                &bank.estimators[i],
                targets,
                priors[i].clone(),
                mode,
                grid,
                forcing,
                period,
                &tuning,
                step_opts,
            )
            .map_err(|e| e.in_phase("dmhe", d, i))?;
            let (warm_seq, warm_k) = &current[i];
            match solve_problem(&problem, warm_seq, *warm_k, &tuning.solver) {
                Ok(out) => {
                    records.push(MheSolveRecord {
                        instant: d,
                        estimator: i,
                        iteration: p,
                        cost: out.cost,
                        solver_iterations: out.report.iterations,
                        fallback: false,
                        k_sat: out.k_sat,
                        x_terminal: out.seq.last().unwrap().clone(),
                    });
                    current[i] = (out.seq, out.k_sat);
                }
                Err(_) => {
                    // keep the warm start for this round
                    let cost = problem
                        .cost_at(&problem.pack(warm_seq, *warm_k))
                        .unwrap_or(f64::NAN);
                    records.push(MheSolveRecord {
                        instant: d,
                        estimator: i,
                        iteration: p,
                        cost,
                        solver_iterations: 0,
                        fallback: true,
                        k_sat: *warm_k,
                        x_terminal: warm_seq.last().unwrap().clone(),
                    });
                }
            }
        }
    }

    // Adopt the final round as the instant's optimum.
    let mut outputs = Vec::with_capacity(n_est);
    for (est, (seq, k_sat)) in bank.estimators.iter_mut().zip(current) {
        est.opt_seq = seq;
        est.opt_lo = lo;
        est.k_sat_hat = k_sat;
        outputs.push((est.x_hat().clone(), k_sat));
    }
    Ok((outputs, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::richards::BottomBc;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const PERIOD: f64 = 1200.0;

    fn toy_grid() -> ColumnGrid {
        ColumnGrid::new(0.67, 2, vec![1]).unwrap()
    }

    fn toy_tuning() -> MheTuning {
        MheTuning {
            horizon: 1,
            model_substep: 60.0,
            ..Default::default()
        }
    }

    fn loam() -> SoilParams {
        SoilParams::loam()
    }

    /// Noiseless truth states over `count` instants on the toy grid,
    /// generated with the same model the estimator uses.
    fn toy_truth(count: usize, u: &ForcingSchedule, tuning: &MheTuning) -> Vec<DVector<f64>> {
        let grid = toy_grid();
        let p = loam();
        let mut states = vec![DVector::from_vec(vec![-0.45, -0.52])];
        for d in 0..count - 1 {
            let next = transition(
                &PressureState::new(states[d].clone()),
                &grid,
                &p,
                u,
                d as f64 * PERIOD,
                PERIOD,
                tuning.model_substep,
                &StepOptions::default(),
            )
            .unwrap();
            states.push(next.h);
        }
        states
    }

    fn estimator_with_window(
        truth: &[DVector<f64>],
        beta: Vector4<f64>,
        k_sat: f64,
    ) -> MheEstimatorState {
        let grid = toy_grid();
        let sensor_idx = grid.sensor_index0(0);
        let p = loam();
        MheEstimatorState {
            sensor: 0,
            meas: truth
                .iter()
                .enumerate()
                .map(|(d, x)| (d, water_content(x[sensor_idx], &p)))
                .collect(),
            opt_seq: truth.to_vec(),
            opt_lo: 0,
            k_sat_hat: k_sat,
            beta_hat: beta,
        }
    }

    #[test]
    fn consensus_targets_average_peers() {
        let v = |k: f64| (DVector::from_element(2, k), k * 1e-6);
        let values = vec![v(9.0), v(1.0), v(2.0), v(3.0)];
        // estimator 0 averages {1, 2, 3}
        let (x_bar, k_bar) = consensus_targets(0, &values).unwrap();
        assert!((x_bar[0] - 2.0).abs() < 1e-15);
        assert!((k_bar - 2e-6).abs() < 1e-21);

        // two estimators: the single peer's value
        let paired = vec![v(5.0), v(7.0)];
        let (x_bar, k_bar) = consensus_targets(0, &paired).unwrap();
        assert_eq!(x_bar[0], 7.0);
        assert_eq!(k_bar, 7e-6);

        // identical peers reproduce the common value
        let same = vec![v(4.0); 5];
        let (x_bar, _) = consensus_targets(2, &same).unwrap();
        assert!((x_bar[0] - 4.0).abs() < 1e-15);

        assert!(consensus_targets(0, &values[..1]).is_none());
    }

    #[test]
    fn single_measurement_cost_reduces_to_measurement_residual() {
        // N = 0, no peers, full information: only the measurement term.
        let grid = toy_grid();
        let u = ForcingSchedule::constant(0.0);
        let tuning = MheTuning {
            horizon: 0,
            ..toy_tuning()
        };
        let p = loam();
        let y = 0.30;
        let est = MheEstimatorState {
            sensor: 0,
            meas: [(0usize, y)].into_iter().collect(),
            opt_seq: vec![DVector::from_vec(vec![-0.5, -0.5])],
            opt_lo: 0,
            k_sat_hat: p.k_sat,
            beta_hat: p.beta(),
        };
        let problem = assemble_problem(
            &est,
            None,
            None,
            MheMode::FullInformation,
            &grid,
            &u,
            PERIOD,
            &tuning,
            StepOptions::default(),
        )
        .unwrap();
        assert_eq!(problem.var_len(), 3);
        assert_eq!(problem.residual_len(), 1);
        let z = problem.pack(&[DVector::from_vec(vec![-0.4, -0.6])], p.k_sat);
        let expect = (y - water_content(-0.4, &p)).powi(2) / tuning.r_v;
        assert!((problem.cost_at(&z).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn cost_is_zero_at_truth_and_matches_hand_assembly() {
        let grid = toy_grid();
        let u = ForcingSchedule::constant(5.4e-7);
        let tuning = toy_tuning();
        let p = loam();
        let truth = toy_truth(2, &u, &tuning);
        let est = estimator_with_window(&truth, p.beta(), p.k_sat);
        let prior = Some((truth[0].clone(), p.k_sat));
        let targets = Some((truth[0].clone(), p.k_sat));
        let problem = assemble_problem(
            &est,
            targets.clone(),
            prior.clone(),
            MheMode::Moving,
            &grid,
            &u,
            PERIOD,
            &tuning,
            StepOptions::default(),
        )
        .unwrap();

        // zero cost at the generating trajectory
        let z_truth = problem.pack(&truth, p.k_sat);
        assert!(problem.cost_at(&z_truth).unwrap() < 1e-22);

        // hand-assembled cost at a perturbed point
        let perturbed = vec![
            &truth[0] + DVector::from_vec(vec![0.02, -0.01]),
            &truth[1] + DVector::from_vec(vec![-0.015, 0.03]),
        ];
        let k_pert = p.k_sat * 1.2;
        let z = problem.pack(&perturbed, k_pert);

        let sensor_idx = grid.sensor_index0(0);
        let pred = transition(
            &PressureState::new(perturbed[0].clone()),
            &grid,
            &p.with_k_sat(k_pert),
            &u,
            0.0,
            PERIOD,
            tuning.model_substep,
            &StepOptions::default(),
        )
        .unwrap();
        let w_res = &perturbed[1] - &pred.h;
        let mut expect = w_res.norm_squared() / tuning.q_w;
        for (d, x) in perturbed.iter().enumerate() {
            let y = est.meas[d].1;
            expect += (y - water_content(x[sensor_idx], &p)).powi(2) / tuning.r_v;
        }
        let (prior_x, prior_k) = prior.unwrap();
        expect += (&perturbed[0] - &prior_x).norm_squared() / tuning.pi_l;
        expect += tuning.mu_l * (k_pert - prior_k).powi(2);
        let (bar_x, bar_k) = targets.unwrap();
        expect += (&perturbed[0] - &bar_x).norm_squared() / tuning.pi_c;
        expect += tuning.mu_c * (k_pert - bar_k).powi(2);

        let got = problem.cost_at(&z).unwrap();
        assert!(((got - expect) / expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let grid = toy_grid();
        let u = ForcingSchedule::constant(5.4e-7);
        let tuning = MheTuning {
            horizon: 2,
            mu_l: 1e5, // keep the k_sat column finite-difference friendly
            mu_c: 1e5,
            ..toy_tuning()
        };
        let p = loam();
        let truth = toy_truth(3, &u, &tuning);
        let est = estimator_with_window(&truth, p.beta(), p.k_sat);
        let problem = assemble_problem(
            &est,
            Some((truth[0].clone(), p.k_sat)),
            Some((truth[0].clone(), p.k_sat)),
            MheMode::Moving,
            &grid,
            &u,
            PERIOD,
            &tuning,
            StepOptions::default(),
        )
        .unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let nv = problem.var_len();
        let m = problem.residual_len();
        for trial in 0..20 {
            let mut seq = truth.clone();
            for x in seq.iter_mut() {
                for v in x.iter_mut() {
                    *v = (*v + rng.gen_range(-0.05..0.05))
                        .clamp(tuning.state_lo + 0.01, tuning.state_hi - 0.01);
                }
            }
            let z = problem.pack(&seq, rng.gen_range(5e-7..8e-6));

            let mut r = DVector::zeros(m);
            assert!(problem.residuals(&z, &mut r));
            let mut jac = DMatrix::zeros(m, nv);
            assert!(problem.jacobian(&z, &mut jac));
            let grad = jac.tr_mul(&r);

            let grad_scale = grad.amax();
            for i in 0..nv {
                let h = if i == nv - 1 { 1e-6 * z[i].abs().max(1e-3) } else { 1e-7 };
                let mut zp = z.clone();
                zp[i] += h;
                let mut zm = z.clone();
                zm[i] -= h;
                let fd =
                    (problem.cost_at(&zp).unwrap() - problem.cost_at(&zm).unwrap()) / (4.0 * h);
                assert!(
                    (grad[i] - fd).abs() <= 1e-5 * fd.abs().max(grad_scale * 1e-3),
                    "trial {trial}, var {i}: analytic {} vs fd {fd}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn solver_recovers_truth_from_perturbed_start() {
        // Zero-noise identifiability on the toy grid: the generating
        // trajectory is the global optimum with zero cost.
        let grid = toy_grid();
        let u = ForcingSchedule::constant(5.4e-7);
        let tuning = toy_tuning();
        let p = loam();
        let truth = toy_truth(2, &u, &tuning);
        let est = estimator_with_window(&truth, p.beta(), p.k_sat);
        let problem = assemble_problem(
            &est,
            Some((truth[0].clone(), p.k_sat)),
            Some((truth[0].clone(), p.k_sat)),
            MheMode::Moving,
            &grid,
            &u,
            PERIOD,
            &tuning,
            StepOptions::default(),
        )
        .unwrap();

        let warm: Vec<DVector<f64>> = truth.iter().map(|x| x * 1.1).collect();
        let out = solve_problem(&problem, &warm, p.k_sat * 1.1, &tuning.solver).unwrap();
        assert!(out.cost < 1e-10, "cost {}", out.cost);
        for (a, b) in out.seq.iter().zip(&truth) {
            assert!((a - b).amax() < 1e-6);
        }

        // infeasible warm start is a precondition violation
        let bad: Vec<DVector<f64>> = truth.iter().map(|x| x * 0.0).collect();
        assert!(solve_problem(&problem, &bad, p.k_sat, &tuning.solver).is_err());
    }

    #[test]
    fn consensus_pull_returns_projected_targets() {
        // With measurement and process terms disabled and no prior, the
        // optimum is exactly the consensus target projected onto the box.
        let grid = toy_grid();
        let u = ForcingSchedule::constant(0.0);
        let tuning = MheTuning {
            horizon: 0,
            q_w: f64::INFINITY,
            r_v: f64::INFINITY,
            ..toy_tuning()
        };
        let p = loam();
        let est = MheEstimatorState {
            sensor: 0,
            meas: [(0usize, 0.3)].into_iter().collect(),
            opt_seq: vec![DVector::from_vec(vec![-0.5, -0.5])],
            opt_lo: 0,
            k_sat_hat: p.k_sat,
            beta_hat: p.beta(),
        };
        // targets outside the box must be clipped to the bounds
        let targets = (DVector::from_vec(vec![-1.5, -0.25]), 2e-5);
        let problem = assemble_problem(
            &est,
            Some(targets),
            None,
            MheMode::FullInformation,
            &grid,
            &u,
            PERIOD,
            &tuning,
            StepOptions::default(),
        )
        .unwrap();
        let out = solve_problem(
            &problem,
            &[DVector::from_vec(vec![-0.5, -0.5])],
            p.k_sat,
            &tuning.solver,
        )
        .unwrap();
        assert!((out.seq[0][0] - tuning.state_lo).abs() < 1e-12);
        assert!((out.seq[0][1] - (-0.25)).abs() < 1e-10);
        assert!((out.k_sat - tuning.k_sat_hi).abs() < 1e-18);
    }

    #[test]
    fn bank_stays_at_truth_with_zero_noise() {
        let grid = toy_grid();
        let u = ForcingSchedule::constant(5.4e-7);
        let tuning = MheTuning {
            horizon: 3,
            p_max: 2,
            ..toy_tuning()
        };
        let p = loam();
        let truth = toy_truth(10, &u, &tuning);
        let sensor_idx = grid.sensor_index0(0);

        let n_est = 3;
        let mut bank = DmheBank::new(
            grid.n_nodes,
            n_est,
            0,
            vec![truth[0].clone(); n_est],
            vec![p.k_sat; n_est],
            vec![p.beta(); n_est],
            tuning,
            StepOptions::default(),
        )
        .unwrap();
        // all estimators read the same sensor on the toy grid
        for est in bank.estimators.iter_mut() {
            est.sensor = 0;
        }

        for (d, x) in truth.iter().enumerate() {
            let y = water_content(x[sensor_idx], &p);
            let (outputs, records) = dmhe_sampling_instant(
                &mut bank,
                d,
                &vec![y; n_est],
                &vec![p.beta(); n_est],
                &grid,
                &u,
                PERIOD,
            )
            .unwrap();
            assert_eq!(records.len(), n_est * bank.tuning.p_max);
            assert!(records.iter().all(|r| !r.fallback));
            for (x_hat, k_hat) in &outputs {
                assert!(
                    (x_hat - x).amax() < 1e-7,
                    "instant {d}: {:?} vs {:?}",
                    x_hat.as_slice(),
                    x.as_slice()
                );
                assert!((k_hat - p.k_sat).abs() < 1e-10 * p.k_sat);
            }
        }
    }

    #[test]
    fn p_max_one_gives_one_solve_per_estimator() {
        let grid = toy_grid();
        let u = ForcingSchedule::constant(0.0);
        let tuning = MheTuning {
            horizon: 2,
            p_max: 1,
            ..toy_tuning()
        };
        let p = loam();
        let truth = toy_truth(1, &u, &tuning);
        let mut bank = DmheBank::new(
            grid.n_nodes,
            2,
            0,
            vec![truth[0].clone(); 2],
            vec![p.k_sat; 2],
            vec![p.beta(); 2],
            tuning,
            StepOptions::default(),
        )
        .unwrap();
        for est in bank.estimators.iter_mut() {
            est.sensor = 0;
        }
        let y = water_content(truth[0][grid.sensor_index0(0)], &p);
        let (_, records) =
            dmhe_sampling_instant(&mut bank, 0, &[y, y], &[p.beta(); 2], &grid, &u, PERIOD)
                .unwrap();
        assert_eq!(records.len(), 2);
    }

    #[test]
    fn estimates_respect_bounds_under_noise() {
        let grid = toy_grid();
        let u = ForcingSchedule::constant(5.4e-7);
        let tuning = MheTuning {
            horizon: 2,
            ..toy_tuning()
        };
        let p = loam();
        let truth = toy_truth(8, &u, &tuning);
        let sensor_idx = grid.sensor_index0(0);
        let mut bank = DmheBank::new(
            grid.n_nodes,
            2,
            0,
            vec![
                DVector::from_vec(vec![-0.9, -0.9]),
                DVector::from_vec(vec![-0.1, -0.1]),
            ],
            vec![1e-7, 1e-5],
            vec![p.beta(); 2],
            tuning,
            StepOptions {
                bottom: BottomBc::FreeDrainage,
                ..Default::default()
            },
        )
        .unwrap();
        for est in bank.estimators.iter_mut() {
            est.sensor = 0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (d, x) in truth.iter().enumerate() {
            let y = water_content(x[sensor_idx], &p) + rng.gen_range(-0.01..0.01);
            let (outputs, _) =
                dmhe_sampling_instant(&mut bank, d, &[y, y], &[p.beta(); 2], &grid, &u, PERIOD)
                    .unwrap();
            for (x_hat, k_hat) in &outputs {
                for &v in x_hat.iter() {
                    assert!(v >= bank.tuning.state_lo && v <= bank.tuning.state_hi);
                }
                assert!(*k_hat >= bank.tuning.k_sat_lo && *k_hat <= bank.tuning.k_sat_hi);
            }
        }
    }
}
