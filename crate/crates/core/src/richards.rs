//! Finite-difference discretization of the Richards equation.
//!
//! The column is split into `n_nodes` equal compartments, node 1 at the
//! surface. Interface fluxes are counted positive downward, so the change of
//! stored water in a compartment is `(flux_above - flux_below) / dz`. The top
//! interface flux is set directly to the surface inflow `q_top` (ghost-node
//! elimination of the Neumann condition); the bottom boundary is free
//! drainage (`dh/dz = 0`, outflow `K(h_bottom)`) unless sealed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::soil::{
    capacity_with_dh, capillary_capacity, conductivity_with_dh, hydraulic_conductivity,
    SoilParams, H_SATURATION_CLAMP,
};
use crate::{Error, Result};

/// Spatial discretization of the soil profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnGrid {
    /// Column depth (m).
    pub depth_total: f64,
    /// Number of compartments.
    pub n_nodes: usize,
    /// Compartment thickness (m), uniform.
    pub dz: f64,
    /// 1-based indices of compartments carrying a sensor, strictly increasing.
    pub sensor_nodes: Vec<usize>,
}

impl ColumnGrid {
    pub fn new(depth_total: f64, n_nodes: usize, sensor_nodes: Vec<usize>) -> Result<Self> {
        if !(depth_total > 0.0 && depth_total.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "depth must be positive, got {depth_total}"
            )));
        }
        if n_nodes < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 nodes, got {n_nodes}"
            )));
        }
        if sensor_nodes.is_empty() {
            return Err(Error::InvalidGrid("no sensor nodes".into()));
        }
        for w in sensor_nodes.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidGrid(format!(
                    "sensor nodes must be strictly increasing, got {sensor_nodes:?}"
                )));
            }
        }
        if sensor_nodes[0] < 1 || *sensor_nodes.last().unwrap() > n_nodes {
            return Err(Error::InvalidGrid(format!(
                "sensor nodes out of [1, {n_nodes}]: {sensor_nodes:?}"
            )));
        }
        Ok(ColumnGrid {
            depth_total,
            n_nodes,
            dz: depth_total / n_nodes as f64,
            sensor_nodes,
        })
    }

    /// The 67 cm, 32-node profile with sensors in compartments 4/12/20/28.
    pub fn standard() -> Self {
        ColumnGrid::new(0.67, 32, vec![4, 12, 20, 28]).unwrap()
    }

    /// Depth of a compartment center below the surface (m), 1-based index.
    pub fn node_center_depth(&self, node: usize) -> f64 {
        (node as f64 - 0.5) * self.dz
    }

    pub fn n_sensors(&self) -> usize {
        self.sensor_nodes.len()
    }

    /// 0-based sensor indices into the state vector.
    pub fn sensor_index0(&self, sensor: usize) -> usize {
        self.sensor_nodes[sensor] - 1
    }
}

/// Capillary pressure head at every node (m), all entries negative.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureState {
    pub h: DVector<f64>,
}

impl PressureState {
    pub fn new(h: DVector<f64>) -> Self {
        PressureState { h }
    }

    pub fn uniform(n_nodes: usize, head: f64) -> Self {
        PressureState {
            h: DVector::from_element(n_nodes, head),
        }
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &v) in self.h.iter().enumerate() {
            if !(v < 0.0 && v.is_finite()) {
                return Err(Error::OutOfRange(format!(
                    "head at node {} must be negative and finite, got {v}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Piecewise-constant surface flux (m/s) as (start time s, value) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcingSchedule {
    steps: Vec<(f64, f64)>,
}

impl ForcingSchedule {
    pub fn new(steps: Vec<(f64, f64)>) -> Result<Self> {
        for w in steps.windows(2) {
            if w[1].0 < w[0].0 {
                return Err(Error::OutOfRange(format!(
                    "forcing times must be nondecreasing: {} after {}",
                    w[1].0, w[0].0
                )));
            }
        }
        if steps.iter().any(|s| !s.1.is_finite()) {
            return Err(Error::OutOfRange("non-finite forcing value".into()));
        }
        Ok(ForcingSchedule { steps })
    }

    pub fn constant(q: f64) -> Self {
        ForcingSchedule {
            steps: vec![(0.0, q)],
        }
    }

    /// Daily irrigation: `rate` m/s for the first `on_s` seconds of every
    /// `cycle_s`-second cycle, zero otherwise, covering `total_s`.
    pub fn daily_cycle(rate: f64, on_s: f64, cycle_s: f64, total_s: f64) -> Self {
        let mut steps = Vec::new();
        let mut t = 0.0;
        while t < total_s {
            steps.push((t, rate));
            steps.push((t + on_s, 0.0));
            t += cycle_s;
        }
        ForcingSchedule { steps }
    }

    /// Flux at time `t` (zero before the first step).
    pub fn value_at(&self, t: f64) -> f64 {
        let idx = self.steps.partition_point(|s| s.0 <= t);
        if idx == 0 {
            0.0
        } else {
            self.steps[idx - 1].1
        }
    }

    pub fn steps(&self) -> &[(f64, f64)] {
        &self.steps
    }
}

/// Bottom boundary condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BottomBc {
    /// Gravity drainage: `dh/dz = 0`, outflow `K(h_bottom)`.
    FreeDrainage,
    /// No flow through the bottom interface.
    Sealed,
}

/// Integration options shared by the stepping routines.
#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    /// Per-substep |dh| guard (m); exceeding it signals the substep is too
    /// large for the current stiffness.
    pub dh_guard: f64,
    pub bottom: BottomBc,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            dh_guard: 0.1,
            bottom: BottomBc::FreeDrainage,
        }
    }
}

/// Boundary water volumes (m of water column) accumulated over a call.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FluxTotals {
    /// Integrated surface inflow.
    pub top: f64,
    /// Integrated bottom drainage outflow.
    pub bottom: f64,
}

/// Conductivity at the interface between two nodes, evaluated at the
/// arithmetic mean head.
pub fn interface_conductivity(h_a: f64, h_b: f64, p: &SoilParams) -> f64 {
    hydraulic_conductivity(0.5 * (h_a + h_b), p)
}

fn check_dims(x: &PressureState, grid: &ColumnGrid) -> Result<()> {
    if x.len() != grid.n_nodes {
        return Err(Error::OutOfRange(format!(
            "state has {} nodes, grid has {}",
            x.len(),
            grid.n_nodes
        )));
    }
    Ok(())
}

/// One forward-Euler substep; `flux` is scratch of length `n + 1` and holds
/// the downward interface fluxes on return.
fn step_kernel(
    h: &[f64],
    out: &mut [f64],
    flux: &mut [f64],
    p: &SoilParams,
    q_top: f64,
    dt: f64,
    dz: f64,
    opts: &StepOptions,
) -> Result<()> {
    let n = h.len();
    flux[0] = q_top;
    for i in 0..n - 1 {
        let k = hydraulic_conductivity(0.5 * (h[i] + h[i + 1]), p);
        flux[i + 1] = k * ((h[i] - h[i + 1]) / dz + 1.0);
    }
    flux[n] = match opts.bottom {
        BottomBc::FreeDrainage => hydraulic_conductivity(h[n - 1], p),
        BottomBc::Sealed => 0.0,
    };
    for i in 0..n {
        let c = capillary_capacity(h[i], p);
        let dh = dt * (flux[i] - flux[i + 1]) / (dz * c);
        if !dh.is_finite() || dh.abs() > opts.dh_guard {
            return Err(Error::Instability {
                node: i + 1,
                dh,
                guard: opts.dh_guard,
            });
        }
        out[i] = (h[i] + dh).min(H_SATURATION_CLAMP);
    }
    Ok(())
}

/// Advances the state by one explicit-Euler step of length `dt` under a
/// constant surface flux `q_top`.
pub fn euler_step(
    x: &PressureState,
    grid: &ColumnGrid,
    p: &SoilParams,
    q_top: f64,
    dt: f64,
    opts: &StepOptions,
) -> Result<PressureState> {
    check_dims(x, grid)?;
    if !(dt > 0.0) {
        return Err(Error::OutOfRange(format!("dt must be positive, got {dt}")));
    }
    let mut out = DVector::zeros(x.len());
    let mut flux = vec![0.0; x.len() + 1];
    step_kernel(
        x.h.as_slice(),
        out.as_mut_slice(),
        &mut flux,
        p,
        q_top,
        dt,
        grid.dz,
        opts,
    )?;
    Ok(PressureState::new(out))
}

fn substep_count(horizon: f64, substep: f64) -> Result<usize> {
    if !(substep > 0.0 && horizon > 0.0) {
        return Err(Error::OutOfRange(format!(
            "horizon ({horizon}) and substep ({substep}) must be positive"
        )));
    }
    let ratio = horizon / substep;
    let count = ratio.round();
    if (ratio - count).abs() > 1e-9 {
        return Err(Error::OutOfRange(format!(
            "horizon {horizon} s is not an integer multiple of substep {substep} s"
        )));
    }
    Ok(count as usize)
}

/// The state-transition map: composition of Euler substeps over one sampling
/// period, reading the surface flux from the schedule at each substep.
pub fn transition(
    x: &PressureState,
    grid: &ColumnGrid,
    p: &SoilParams,
    u: &ForcingSchedule,
    t0: f64,
    horizon: f64,
    substep: f64,
    opts: &StepOptions,
) -> Result<PressureState> {
    Ok(transition_with_fluxes(x, grid, p, u, t0, horizon, substep, opts)?.0)
}

/// As [`transition`], also accumulating the boundary water volumes.
#[allow(clippy::too_many_arguments)]
pub fn transition_with_fluxes(
    x: &PressureState,
    grid: &ColumnGrid,
    p: &SoilParams,
    u: &ForcingSchedule,
    t0: f64,
    horizon: f64,
    substep: f64,
    opts: &StepOptions,
) -> Result<(PressureState, FluxTotals)> {
    check_dims(x, grid)?;
    let steps = substep_count(horizon, substep)?;
    let n = x.len();
    let mut cur = x.h.clone();
    let mut next = DVector::zeros(n);
    let mut flux = vec![0.0; n + 1];
    let mut totals = FluxTotals::default();
    for s in 0..steps {
        let t = t0 + s as f64 * substep;
        let q_top = u.value_at(t);
        step_kernel(
            cur.as_slice(),
            next.as_mut_slice(),
            &mut flux,
            p,
            q_top,
            substep,
            grid.dz,
            opts,
        )?;
        totals.top += q_top * substep;
        totals.bottom += flux[n] * substep;
        std::mem::swap(&mut cur, &mut next);
    }
    Ok((PressureState::new(cur), totals))
}

/// The transition map together with its sensitivities `d x' / d x`
/// (`n x n`) and `d x' / d k_sat` (`n`), propagated through the substeps by
/// the chain rule on the tridiagonal per-step Jacobian.
#[allow(clippy::too_many_arguments)]
pub fn transition_with_jacobian(
    x: &PressureState,
    grid: &ColumnGrid,
    p: &SoilParams,
    u: &ForcingSchedule,
    t0: f64,
    horizon: f64,
    substep: f64,
    opts: &StepOptions,
) -> Result<(PressureState, DMatrix<f64>, DVector<f64>)> {
    check_dims(x, grid)?;
    let steps = substep_count(horizon, substep)?;
    let n = x.len();
    let dz = grid.dz;

    let mut cur = x.h.clone();
    let mut next = DVector::zeros(n);
    let mut jac = DMatrix::<f64>::identity(n, n);
    let mut jac_next = DMatrix::<f64>::zeros(n, n);
    let mut jk = DVector::<f64>::zeros(n);
    let mut jk_next = DVector::<f64>::zeros(n);

    // Per-interface flux and partials: `da` w.r.t. the node above, `db`
    // w.r.t. the node below, `dk` w.r.t. k_sat.
    let mut flux = vec![0.0; n + 1];
    let mut df_da = vec![0.0; n + 1];
    let mut df_db = vec![0.0; n + 1];
    let mut df_dk = vec![0.0; n + 1];
    // Tridiagonal step Jacobian rows (lower, diagonal, upper).
    let mut lo = vec![0.0; n];
    let mut di = vec![0.0; n];
    let mut up = vec![0.0; n];
    let mut sk = vec![0.0; n];

    for s in 0..steps {
        let t = t0 + s as f64 * substep;
        let q_top = u.value_at(t);
        let h = cur.as_slice();

        flux[0] = q_top;
        df_da[0] = 0.0;
        df_db[0] = 0.0;
        df_dk[0] = 0.0;
        for i in 0..n - 1 {
            let (k, dk) = conductivity_with_dh(0.5 * (h[i] + h[i + 1]), p);
            let grad = (h[i] - h[i + 1]) / dz + 1.0;
            flux[i + 1] = k * grad;
            df_da[i + 1] = 0.5 * dk * grad + k / dz;
            df_db[i + 1] = 0.5 * dk * grad - k / dz;
            df_dk[i + 1] = flux[i + 1] / p.k_sat;
        }
        match opts.bottom {
            BottomBc::FreeDrainage => {
                let (k, dk) = conductivity_with_dh(h[n - 1], p);
                flux[n] = k;
                df_da[n] = dk;
                df_db[n] = 0.0;
                df_dk[n] = k / p.k_sat;
            }
            BottomBc::Sealed => {
                flux[n] = 0.0;
                df_da[n] = 0.0;
                df_db[n] = 0.0;
                df_dk[n] = 0.0;
            }
        }

        for i in 0..n {
            let (c, dc) = capacity_with_dh(h[i], p);
            let denom = dz * c;
            let g = (flux[i] - flux[i + 1]) / denom;
            let dh = substep * g;
            if !dh.is_finite() || dh.abs() > opts.dh_guard {
                return Err(Error::Instability {
                    node: i + 1,
                    dh,
                    guard: opts.dh_guard,
                });
            }
            let clamped = h[i] + dh > H_SATURATION_CLAMP;
            next[i] = (h[i] + dh).min(H_SATURATION_CLAMP);
            if clamped {
                lo[i] = 0.0;
                di[i] = 0.0;
                up[i] = 0.0;
                sk[i] = 0.0;
            } else {
                lo[i] = substep * df_da[i] / denom;
                di[i] = 1.0
                    + substep * ((df_db[i] - df_da[i + 1]) / denom)
                    - substep * g * dc / c;
                up[i] = -substep * df_db[i + 1] / denom;
                sk[i] = substep * (df_dk[i] - df_dk[i + 1]) / denom;
            }
        }

        // jac_next = A * jac, column by column (column-major storage).
        for col in 0..n {
            let src = jac.column(col);
            let mut dst = jac_next.column_mut(col);
            for i in 0..n {
                let mut v = di[i] * src[i];
                if i > 0 {
                    v += lo[i] * src[i - 1];
                }
                if i + 1 < n {
                    v += up[i] * src[i + 1];
                }
                dst[i] = v;
            }
        }
        for i in 0..n {
            let mut v = di[i] * jk[i] + sk[i];
            if i > 0 {
                v += lo[i] * jk[i - 1];
            }
            if i + 1 < n {
                v += up[i] * jk[i + 1];
            }
            jk_next[i] = v;
        }

        std::mem::swap(&mut cur, &mut next);
        std::mem::swap(&mut jac, &mut jac_next);
        std::mem::swap(&mut jk, &mut jk_next);
    }
    Ok((PressureState::new(cur), jac, jk))
}

/// Total stored water `sum(theta_i * dz)` (m of water column).
pub fn stored_water(x: &PressureState, grid: &ColumnGrid, p: &SoilParams) -> f64 {
    x.h.iter()
        .map(|&h| crate::soil::water_content(h, p) * grid.dz)
        .sum()
}
