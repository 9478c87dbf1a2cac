use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use massive_access::cloud;
use massive_access::error::{Error, Result};
use massive_access::fog::{associate_faps, run_fog, FogOptions};
use massive_access::harness::{
    self, emit_results, run_experiment, Deployment, ExperimentConfig,
};
use massive_access::scenario::Scenario;
use massive_access::seed;

#[derive(Parser)]
#[command(
    name = "massive-access",
    about = "Grant-free massive access simulator: activity detection and channel estimation \
             under cloud, fog, and per-cell processing",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte-Carlo experiment and write results.csv / results.json.
    Run {
        /// Experiment configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the result files.
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Configuration overrides, e.g. `experiment.trials=50`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write a built-in configuration preset.
    Preset {
        /// Which preset to emit.
        #[arg(long, value_enum, default_value_t = PresetName::Desk)]
        name: PresetName,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump per-iteration diagnostics for a single trial.
    Trace {
        /// Experiment configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Deployment to trace: cloud, baseline, or fog:N.
        #[arg(long, default_value = "cloud")]
        deployment: String,
        /// Trial index (selects the scenario seed).
        #[arg(long, default_value_t = 0)]
        trial: usize,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Configuration overrides, e.g. `scenario.pilot_length=40`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetName {
    /// Full-scale profile (3500 users, 3000 runs); cluster-sized.
    Paper,
    /// Desk-scale profile (350 users, 200 runs).
    Desk,
}

fn load_config(path: &PathBuf, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    for item in overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override '{item}' is not KEY=VALUE")))?;
        cfg.apply_override(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(config: PathBuf, out: PathBuf, workers: usize, overrides: Vec<String>) -> Result<()> {
    let cfg = load_config(&config, &overrides)?;
    let output = if workers == 0 {
        run_experiment(&cfg)?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))?;
        pool.install(|| run_experiment(&cfg))?
    };
    let (csv_path, json_path) = emit_results(&output, &out)?;
    if !output.failures.is_empty() {
        eprintln!("{} trial(s) failed and were skipped", output.failures.len());
    }
    print!("{}", harness::csv_string(&output)?);
    eprintln!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

fn cmd_preset(name: PresetName, out: Option<PathBuf>) -> Result<()> {
    let cfg = match name {
        PresetName::Paper => ExperimentConfig::paper_preset(),
        PresetName::Desk => ExperimentConfig::desk_preset(),
    };
    let text = cfg.to_toml_string()?;
    match out {
        Some(path) => {
            std::fs::write(&path, text)?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_trace(
    config: PathBuf,
    deployment: String,
    trial: usize,
    out: Option<PathBuf>,
    overrides: Vec<String>,
) -> Result<()> {
    let cfg = load_config(&config, &overrides)?;
    let deployment: Deployment = deployment.parse()?;
    let scenario_seed = seed::trial_seed(cfg.experiment.base_seed, trial);
    let scenario = Scenario::generate(&cfg.scenario, scenario_seed)?;
    let solver = cfg.solver.settings();
    let mut text = String::new();
    match deployment {
        Deployment::Cloud => {
            let problem = cloud::concatenate(&scenario.observation)?;
            let (result, trace) =
                cloud::cloud_detect_traced(&problem, &scenario.pilots, &solver, &cfg.detector)?;
            text.push_str("iter,residual,mean_pi,sigma_est\n");
            for row in &trace {
                text.push_str(&format!(
                    "{},{},{},{}\n",
                    row.iter, row.residual, row.mean_belief, row.sigma_est
                ));
            }
            eprintln!(
                "cloud: {} iterations, {} users declared active",
                result.iterations,
                result.active.iter().filter(|&&a| a).count()
            );
        }
        Deployment::Baseline => {
            use massive_access::amp::{run_mmv_amp, Prior, RefineRule};
            use ndarray::s;
            text.push_str("cell,iter,residual,mean_pi,sigma_est\n");
            let users_per_cell = cfg.scenario.users_per_cell;
            for (b, block) in scenario.observation.per_ap.iter().enumerate() {
                let own = scenario
                    .pilots
                    .slice(s![.., b * users_per_cell..(b + 1) * users_per_cell])
                    .to_owned();
                let (prior, sigma0) = Prior::from_measurements(block, &own, solver.gamma_init)?;
                let run = run_mmv_amp(
                    block,
                    &own,
                    &prior,
                    sigma0,
                    &solver.options,
                    &solver.stopping,
                    RefineRule::RowCommon,
                )?;
                for row in &run.trace {
                    text.push_str(&format!(
                        "{},{},{},{},{}\n",
                        b, row.iter, row.residual, row.mean_belief, row.sigma_est
                    ));
                }
            }
        }
        Deployment::Fog { n_co } => {
            let assoc = associate_faps(&scenario.users, &scenario.layout, n_co)?;
            let outcome = run_fog(
                &scenario.observation,
                &scenario.pilots,
                &assoc,
                &solver,
                &cfg.detector,
                &FogOptions {
                    parallel_faps: false,
                    collect_messages: true,
                },
            )?;
            text.push_str("iter,fap,user,pi_tilde\n");
            for m in &outcome.messages {
                text.push_str(&format!("{},{},{},{}\n", m.iter, m.fap, m.user, m.belief));
            }
            eprintln!(
                "fog:{n_co}: {} uplink + {} downlink scalars over {} rounds",
                outcome.uplink_scalars, outcome.downlink_scalars, outcome.detection.iterations
            );
        }
    }
    match out {
        Some(path) => {
            std::fs::write(&path, text)?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            workers,
            overrides,
        } => cmd_run(config, out, workers, overrides),
        Command::Preset { name, out } => cmd_preset(name, out),
        Command::Trace {
            config,
            deployment,
            trial,
            out,
            overrides,
        } => cmd_trace(config, deployment, trial, out, overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
