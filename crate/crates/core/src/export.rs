//! File export of runs and offline metrics recomputation.
//!
//! All numeric fields are written with Rust's shortest round-trip float
//! formatting, so re-exporting the same results is byte-identical and
//! re-parsing recovers the exact values.
//!
//! Files written by a full run:
//! * `truth.csv` — `time_s,node,h,theta` per sampling instant per node.
//! * `measurements.csv` — `time_s,node,y_moist,y_head` per instant per
//!   sensor node.
//! * `dekf.csv` — `k,filter,theta_s,theta_r,alpha,n,trace_p,spread`.
//! * `dmhe.csv` — `k,estimator,p,cost,iters,fallback,k_sat`, the head
//!   estimate at each sensor node, then the full profile `x_1..x_n`.
//! * `moisture.csv` — `time_s,theta_1..theta_n` recovered per estimator
//!   instant.
//! * `metrics.json` — [`RunMetrics`].
//! * `convergence.json` — [`ConvergenceRecord`] when the filters converged.
//! * `summary.txt` — human-readable recap including wall-clock timings.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector4};

use crate::config::ExperimentConfig;
use crate::experiment::{
    compute_metrics, BaselineRun, DmheInstantEstimates, MoistureRow, RunArtifacts, RunMetrics,
};
use crate::dmhe::MheSolveRecord;
use crate::sim::TruthRun;
use crate::soil::water_content;
use crate::{Error, Result};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn flush(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(io_err(path))
}

/// Writes the combined simulator stream (one line per instant per node,
/// sensor columns empty at non-sensor nodes).
pub fn write_simulation_csv(dir: &Path, config: &ExperimentConfig, truth: &TruthRun) -> Result<PathBuf> {
    let path = dir.join("truth_measurements.csv");
    let mut w = create(&path)?;
    let params = config.soil_params()?;
    let grid = config.grid()?;
    writeln!(w, "time_s,node,h,theta,y_moist,y_head").map_err(io_err(&path))?;
    for (k, state) in truth.states.iter().enumerate() {
        let time_s = k as f64 * truth.period_s;
        let pairs = &truth.pairs[k];
        for node in 1..=grid.n_nodes {
            let h = state.h[node - 1];
            let theta = water_content(h, &params);
            match pairs.iter().find(|p| p.node == node) {
                Some(p) => writeln!(
                    w,
                    "{time_s},{node},{h},{theta},{},{}",
                    p.moisture, p.head
                ),
                None => writeln!(w, "{time_s},{node},{h},{theta},,"),
            }
            .map_err(io_err(&path))?;
        }
    }
    flush(w, &path)?;
    Ok(path)
}

fn write_truth_csv(dir: &Path, config: &ExperimentConfig, truth: &TruthRun) -> Result<()> {
    let path = dir.join("truth.csv");
    let mut w = create(&path)?;
    let params = config.soil_params()?;
    writeln!(w, "time_s,node,h,theta").map_err(io_err(&path))?;
    for (k, state) in truth.states.iter().enumerate() {
        let time_s = k as f64 * truth.period_s;
        for node in 1..=state.len() {
            let h = state.h[node - 1];
            writeln!(w, "{time_s},{node},{h},{}", water_content(h, &params))
                .map_err(io_err(&path))?;
        }
    }
    flush(w, &path)
}

fn write_measurements_csv(dir: &Path, truth: &TruthRun) -> Result<()> {
    let path = dir.join("measurements.csv");
    let mut w = create(&path)?;
    writeln!(w, "time_s,node,y_moist,y_head").map_err(io_err(&path))?;
    for (k, pairs) in truth.pairs.iter().enumerate() {
        let time_s = k as f64 * truth.period_s;
        for p in pairs {
            writeln!(w, "{time_s},{},{},{}", p.node, p.moisture, p.head)
                .map_err(io_err(&path))?;
        }
    }
    flush(w, &path)
}

fn write_dekf_csv(dir: &Path, artifacts: &RunArtifacts) -> Result<()> {
    let path = dir.join("dekf.csv");
    let mut w = create(&path)?;
    writeln!(w, "k,filter,theta_s,theta_r,alpha,n,trace_p,spread").map_err(io_err(&path))?;
    for row in &artifacts.dekf_rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            row.k,
            row.filter + 1,
            row.beta[0],
            row.beta[1],
            row.beta[2],
            row.beta[3],
            row.trace_p,
            row.spread
        )
        .map_err(io_err(&path))?;
    }
    flush(w, &path)
}

fn write_dmhe_csv(dir: &Path, config: &ExperimentConfig, artifacts: &RunArtifacts) -> Result<()> {
    let path = dir.join("dmhe.csv");
    let mut w = create(&path)?;
    let grid = config.grid()?;
    let mut header = String::from("k,estimator,p,cost,iters,fallback,k_sat");
    for node in &grid.sensor_nodes {
        header.push_str(&format!(",x_n{node}"));
    }
    for i in 1..=grid.n_nodes {
        header.push_str(&format!(",x_{i}"));
    }
    writeln!(w, "{header}").map_err(io_err(&path))?;
    let ratio = config.clock_ratio();
    for rec in &artifacts.dmhe_records {
        let mut line = format!(
            "{},{},{},{},{},{},{}",
            rec.instant * ratio,
            rec.estimator + 1,
            rec.iteration,
            rec.cost,
            rec.solver_iterations,
            rec.fallback as u8,
            rec.k_sat
        );
        for s in 0..grid.n_sensors() {
            line.push_str(&format!(",{}", rec.x_terminal[grid.sensor_index0(s)]));
        }
        for i in 0..grid.n_nodes {
            line.push_str(&format!(",{}", rec.x_terminal[i]));
        }
        writeln!(w, "{line}").map_err(io_err(&path))?;
    }
    flush(w, &path)
}

fn write_moisture_csv(dir: &Path, config: &ExperimentConfig, rows: &[MoistureRow]) -> Result<()> {
    let path = dir.join("moisture.csv");
    let mut w = create(&path)?;
    let mut header = String::from("time_s");
    for i in 1..=config.grid.n_nodes {
        header.push_str(&format!(",theta_{i}"));
    }
    writeln!(w, "{header}").map_err(io_err(&path))?;
    for row in rows {
        let mut line = format!("{}", row.k as f64 * config.clocks.dekf_period_s);
        for v in row.theta.iter() {
            line.push_str(&format!(",{v}"));
        }
        writeln!(w, "{line}").map_err(io_err(&path))?;
    }
    flush(w, &path)
}

fn write_metrics_json(dir: &Path, metrics: &RunMetrics) -> Result<()> {
    let path = dir.join("metrics.json");
    let text = serde_json::to_string_pretty(metrics)
        .map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

fn write_summary(dir: &Path, artifacts: &RunArtifacts) -> Result<()> {
    let path = dir.join("summary.txt");
    let mut w = create(&path)?;
    let m = &artifacts.metrics;
    writeln!(w, "run summary").map_err(io_err(&path))?;
    writeln!(
        w,
        "  duration: {} h, seed {}",
        artifacts.config.run.duration_hours, artifacts.config.run.seed
    )
    .map_err(io_err(&path))?;
    match (&m.tau0_instant, &m.tau0_hours) {
        (Some(k), Some(h)) => writeln!(w, "  converged: tau0 = instant {k} ({h:.2} h)"),
        _ => writeln!(w, "  converged: no (estimator phase never activated)"),
    }
    .map_err(io_err(&path))?;
    for (i, (b, e)) in m
        .dekf
        .beta_final
        .iter()
        .zip(&m.dekf.beta_rel_err_final)
        .enumerate()
    {
        writeln!(
            w,
            "  filter {}: beta = [{:.4}, {:.4}, {:.4}, {:.4}], rel err = [{:.3}, {:.3}, {:.3}, {:.3}]",
            i + 1,
            b[0],
            b[1],
            b[2],
            b[3],
            e[0],
            e[1],
            e[2],
            e[3]
        )
        .map_err(io_err(&path))?;
    }
    if let Some(d) = &m.dmhe {
        writeln!(
            w,
            "  estimator phase: {} instants, {} solver fallbacks",
            d.head_rmse_per_instant.len(),
            d.solver_fallbacks
        )
        .map_err(io_err(&path))?;
        writeln!(
            w,
            "  head RMSE final 24 h: max over nodes {:.4} m",
            d.head_rmse_final_24h_per_node
                .iter()
                .cloned()
                .fold(0.0f64, f64::max)
        )
        .map_err(io_err(&path))?;
        writeln!(
            w,
            "  k_sat: avg final 24 h {:.3e} m/s (truth {:.3e})",
            d.k_sat_avg_final_24h, d.k_sat_true
        )
        .map_err(io_err(&path))?;
    } else {
        writeln!(w, "  estimator phase: absent (run ended before convergence)")
            .map_err(io_err(&path))?;
    }
    if let Some(mo) = &m.moisture {
        writeln!(
            w,
            "  moisture RMSE final 24 h: max over nodes {:.4} m/m",
            mo.rmse_final_24h_per_node
                .iter()
                .cloned()
                .fold(0.0f64, f64::max)
        )
        .map_err(io_err(&path))?;
    }
    let t = &artifacts.timings;
    writeln!(
        w,
        "  wall clock: total {:.1} s (simulate {:.1} s, filters {:.1} s, estimators {:.1} s)",
        t.total_s, t.simulate_s, t.dekf_s, t.dmhe_s
    )
    .map_err(io_err(&path))?;
    flush(w, &path)
}

/// Writes every stream of a completed run into `dir` (created if missing).
/// Estimator-phase files are only written when the phase ran; the summary
/// records their absence.
pub fn export_run(dir: &Path, artifacts: &RunArtifacts) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let config_path = dir.join("config.toml");
    fs::write(&config_path, artifacts.config.to_toml_string()?).map_err(io_err(&config_path))?;
    write_truth_csv(dir, &artifacts.config, &artifacts.truth)?;
    write_measurements_csv(dir, &artifacts.truth)?;
    write_dekf_csv(dir, artifacts)?;
    if !artifacts.dmhe_records.is_empty() {
        write_dmhe_csv(dir, &artifacts.config, artifacts)?;
        write_moisture_csv(dir, &artifacts.config, &artifacts.moisture)?;
    }
    write_metrics_json(dir, &artifacts.metrics)?;
    if let Some(conv) = &artifacts.convergence {
        let path = dir.join("convergence.json");
        let text = serde_json::to_string_pretty(conv).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        fs::write(&path, text + "\n").map_err(io_err(&path))?;
    }
    write_summary(dir, artifacts)
}

/// Writes one baseline trajectory as `baseline_ekf_guess<i>.csv`.
pub fn export_baseline(dir: &Path, run: &BaselineRun) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(format!("baseline_ekf_guess{}.csv", run.guess_index));
    let mut w = create(&path)?;
    writeln!(w, "k,theta_s,theta_r,alpha,n").map_err(io_err(&path))?;
    for (k, b) in run.trajectory.iter().enumerate() {
        writeln!(w, "{k},{},{},{},{}", b[0], b[1], b[2], b[3]).map_err(io_err(&path))?;
    }
    flush(w, &path)?;
    Ok(path)
}

fn parse_f64(path: &Path, field: &str, s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Malformed {
        path: path.display().to_string(),
        detail: format!("bad {field}: '{s}'"),
    })
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(File::open(path).map_err(io_err(path))?))
}

/// Recomputes the deterministic metrics of a stored run directory from its
/// CSV streams and configuration, without re-running the estimators.
pub fn recompute_metrics(dir: &Path) -> Result<RunMetrics> {
    let config = ExperimentConfig::load(&dir.join("config.toml"))?;
    let grid = config.grid()?;
    let n_nodes = grid.n_nodes;
    let period = config.clocks.dekf_period_s;

    // truth heads per instant
    let truth_path = dir.join("truth.csv");
    let mut heads: Vec<DVector<f64>> = Vec::new();
    {
        let mut rdr = csv_reader(&truth_path)?;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Malformed {
                path: truth_path.display().to_string(),
                detail: e.to_string(),
            })?;
            let time_s = parse_f64(&truth_path, "time_s", &rec[0])?;
            let node: usize = rec[1].parse().map_err(|_| Error::Malformed {
                path: truth_path.display().to_string(),
                detail: format!("bad node '{}'", &rec[1]),
            })?;
            let k = (time_s / period).round() as usize;
            if heads.len() <= k {
                heads.resize(k + 1, DVector::zeros(n_nodes));
            }
            heads[k][node - 1] = parse_f64(&truth_path, "h", &rec[2])?;
        }
    }
    let truth_states: Vec<crate::PressureState> =
        heads.into_iter().map(crate::PressureState::new).collect();

    // filter trajectories
    let dekf_path = dir.join("dekf.csv");
    let mut beta_history: Vec<Vec<Vector4<f64>>> = Vec::new();
    {
        let mut rdr = csv_reader(&dekf_path)?;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Malformed {
                path: dekf_path.display().to_string(),
                detail: e.to_string(),
            })?;
            let k: usize = rec[0].parse().map_err(|_| Error::Malformed {
                path: dekf_path.display().to_string(),
                detail: format!("bad k '{}'", &rec[0]),
            })?;
            if beta_history.len() <= k {
                beta_history.resize(k + 1, Vec::new());
            }
            beta_history[k].push(Vector4::new(
                parse_f64(&dekf_path, "theta_s", &rec[2])?,
                parse_f64(&dekf_path, "theta_r", &rec[3])?,
                parse_f64(&dekf_path, "alpha", &rec[4])?,
                parse_f64(&dekf_path, "n", &rec[5])?,
            ));
        }
    }

    // estimator terminal states: keep the last round per (k, estimator)
    let dmhe_path = dir.join("dmhe.csv");
    let mut dmhe_estimates: Vec<DmheInstantEstimates> = Vec::new();
    let mut records: Vec<MheSolveRecord> = Vec::new();
    if dmhe_path.exists() {
        let ratio = config.clock_ratio();
        let n_sensors = grid.n_sensors();
        let mut rdr = csv_reader(&dmhe_path)?;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Malformed {
                path: dmhe_path.display().to_string(),
                detail: e.to_string(),
            })?;
            let k: usize = rec[0].parse().map_err(|_| Error::Malformed {
                path: dmhe_path.display().to_string(),
                detail: format!("bad k '{}'", &rec[0]),
            })?;
            let estimator: usize = rec[1].parse::<usize>().map_err(|_| Error::Malformed {
                path: dmhe_path.display().to_string(),
                detail: format!("bad estimator '{}'", &rec[1]),
            })? - 1;
            let mut x = DVector::zeros(n_nodes);
            for i in 0..n_nodes {
                x[i] = parse_f64(&dmhe_path, "x", &rec[7 + n_sensors + i])?;
            }
            let solve = MheSolveRecord {
                instant: k / ratio,
                estimator,
                iteration: rec[2].parse().unwrap_or(0),
                cost: parse_f64(&dmhe_path, "cost", &rec[3])?,
                solver_iterations: rec[4].parse().unwrap_or(0),
                fallback: &rec[5] == "1",
                k_sat: parse_f64(&dmhe_path, "k_sat", &rec[6])?,
                x_terminal: x,
            };
            match dmhe_estimates.last_mut() {
                Some(last) if last.k == k => {
                    if estimator < last.estimates.len() {
                        last.estimates[estimator] =
                            (solve.x_terminal.clone(), solve.k_sat);
                    } else {
                        last.estimates
                            .push((solve.x_terminal.clone(), solve.k_sat));
                    }
                }
                _ => dmhe_estimates.push(DmheInstantEstimates {
                    k,
                    d: k / ratio,
                    estimates: vec![(solve.x_terminal.clone(), solve.k_sat)],
                }),
            }
            records.push(solve);
        }
    }

    // recovered moisture
    let moisture_path = dir.join("moisture.csv");
    let mut moisture_rows: Vec<MoistureRow> = Vec::new();
    if moisture_path.exists() {
        let mut rdr = csv_reader(&moisture_path)?;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Malformed {
                path: moisture_path.display().to_string(),
                detail: e.to_string(),
            })?;
            let time_s = parse_f64(&moisture_path, "time_s", &rec[0])?;
            let mut theta = DVector::zeros(n_nodes);
            for i in 0..n_nodes {
                theta[i] = parse_f64(&moisture_path, "theta", &rec[1 + i])?;
            }
            moisture_rows.push(MoistureRow {
                k: (time_s / period).round() as usize,
                theta,
            });
        }
    }

    Ok(compute_metrics(
        &config,
        &beta_history,
        &truth_states,
        &dmhe_estimates,
        &records,
        &moisture_rows,
    ))
}
