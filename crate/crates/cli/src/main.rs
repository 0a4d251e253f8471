//! Experiment runner: simulate the soil column, run the distributed
//! estimation pipeline, and export CSV/JSON result streams.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agrohydro::config::{preset, ExperimentConfig};
use agrohydro::experiment::{
    run_baseline_centralized_ekf, run_experiment, run_experiment_opts, RunOptions,
};
use agrohydro::export::{
    export_baseline, export_run, recompute_metrics, write_simulation_csv,
};
use agrohydro::sim::simulate_truth;
use agrohydro::Error;

#[derive(Parser)]
#[command(
    name = "agrohydro",
    about = "Richards-equation soil column simulation and consensus-based distributed estimation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    /// Scenario file (TOML). Mutually exclusive with --preset.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Bundled scenario name (currently: paper-loam).
    #[arg(long, default_value = "paper-loam")]
    preset: String,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the run duration (hours).
    #[arg(long)]
    duration: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl ScenarioArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => preset(&self.preset)?,
        };
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(hours) = self.duration {
            cfg.run.duration_hours = hours;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the ground truth and write the combined
    /// truth/measurement stream.
    Simulate(ScenarioArgs),
    /// Run the filter phase only (no moving-horizon estimation).
    Dekf(ScenarioArgs),
    /// Run the full pipeline and export the estimator-phase streams.
    Dmhe(ScenarioArgs),
    /// Run the full pipeline: simulation, filters, hand-off, estimators,
    /// moisture recovery, metrics.
    FullRun(ScenarioArgs),
    /// Run the centralized single-filter baseline for one or all initial
    /// guesses.
    BaselineEkf {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// 1-based guess row; omit to run all.
        #[arg(long)]
        guess: Option<usize>,
    },
    /// Recompute metrics.json from a stored run directory.
    Metrics {
        /// Directory produced by full-run.
        #[arg(long, default_value = "out")]
        dir: PathBuf,
    },
    /// Print a scenario as TOML (preset or normalized file).
    ShowConfig(ScenarioArgs),
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate(args) => {
            let cfg = args.load()?;
            let truth = simulate_truth(
                &cfg.grid()?,
                &cfg.soil_params()?,
                &cfg.forcing_schedule(),
                &cfg.initial_state(),
                cfg.duration_s(),
                cfg.clocks.dekf_period_s,
                cfg.clocks.truth_substep_s,
                &cfg.noise_config(),
                cfg.run.seed,
                &cfg.step_options(),
            )?;
            std::fs::create_dir_all(&args.out).map_err(|e| Error::Io {
                path: args.out.display().to_string(),
                source: e,
            })?;
            let path = write_simulation_csv(&args.out, &cfg, &truth)?;
            println!(
                "simulated {} instants ({} h) -> {}",
                truth.n_instants(),
                cfg.run.duration_hours,
                path.display()
            );
        }
        Command::Dekf(args) => {
            let cfg = args.load()?;
            let artifacts = run_experiment_opts(&cfg, RunOptions { enable_dmhe: false })?;
            export_run(&args.out, &artifacts)?;
            match &artifacts.convergence {
                Some(c) => println!(
                    "filters converged at instant {} ({:.2} h); streams in {}",
                    c.tau0_instant,
                    c.tau0_hours,
                    args.out.display()
                ),
                None => println!(
                    "filters did not converge within {} h; streams in {}",
                    cfg.run.duration_hours,
                    args.out.display()
                ),
            }
        }
        Command::Dmhe(args) | Command::FullRun(args) => {
            let cfg = args.load()?;
            let artifacts = run_experiment(&cfg)?;
            export_run(&args.out, &artifacts)?;
            println!("run complete; streams and metrics.json in {}", args.out.display());
            if let Some(d) = &artifacts.metrics.dmhe {
                println!(
                    "  tau0 {:.2} h, {} estimator instants, k_sat avg {:.3e} m/s",
                    artifacts.metrics.tau0_hours.unwrap_or(f64::NAN),
                    d.head_rmse_per_instant.len(),
                    d.k_sat_avg_final_24h
                );
            } else {
                println!("  estimator phase absent (no convergence within the run)");
            }
        }
        Command::BaselineEkf { scenario, guess } => {
            let cfg = scenario.load()?;
            let indices: Vec<usize> = match guess {
                Some(i) => vec![i],
                None => (1..=cfg.dekf.guesses.len()).collect(),
            };
            for i in indices {
                let run = run_baseline_centralized_ekf(&cfg, i)?;
                let path = export_baseline(&scenario.out, &run)?;
                println!(
                    "guess {i}: final beta [{:.4}, {:.4}, {:.4}, {:.4}], rel err [{:.3}, {:.3}, {:.3}, {:.3}] -> {}",
                    run.final_beta[0],
                    run.final_beta[1],
                    run.final_beta[2],
                    run.final_beta[3],
                    run.final_rel_err[0],
                    run.final_rel_err[1],
                    run.final_rel_err[2],
                    run.final_rel_err[3],
                    path.display()
                );
            }
        }
        Command::Metrics { dir } => {
            let metrics = recompute_metrics(&dir)?;
            let text = serde_json::to_string_pretty(&metrics).map_err(|e| Error::Malformed {
                path: dir.join("metrics.json").display().to_string(),
                detail: e.to_string(),
            })?;
            let path = dir.join("metrics.json");
            std::fs::write(&path, text + "\n").map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            println!("recomputed {}", path.display());
        }
        Command::ShowConfig(args) => {
            let cfg = args.load()?;
            print!("{}", cfg.to_toml_string()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            match err {
                Error::InvalidConfig(_)
                | Error::InvalidParams(_)
                | Error::InvalidGrid(_)
                | Error::Io { .. }
                | Error::Malformed { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
