//! Seeded Monte-Carlo orchestration across deployments.
//!
//! Every trial builds one scenario and runs every requested deployment on it,
//! so comparisons are paired. Trials are independent and may run on any
//! number of workers; per-trial seeds derive from `(base_seed, trial index)`
//! and aggregation reduces in trial order, so output is identical for any
//! worker count.

use ndarray::{s, Array2};
use num_complex::Complex64;
use rayon::prelude::*;

use super::config::{Deployment, ExperimentConfig, FailPolicy};
use crate::cloud::{self, SolverSettings};
use crate::detect::{
    decide_active, error_probability, nmse_db, zero_inactive_rows, DetectionResult,
    DetectorConfig,
};
use crate::error::{Error, Result};
use crate::fog::{associate_faps, run_fog, FogOptions};
use crate::scenario::{Observation, Scenario};
use crate::seed;
use crate::amp::{run_mmv_amp, Prior, RefineRule};

/// Measurements for one (deployment, trial) pair.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TrialMetrics {
    pub deployment: String,
    pub sweep_value: f64,
    pub trial: usize,
    pub seed: u64,
    pub scenario_digest: u64,
    pub error_probability: f64,
    pub missed: f64,
    pub false_alarm: f64,
    pub nmse_db: f64,
    pub iterations: usize,
    pub fronthaul_scalars: u64,
    /// Wall-clock seconds; diagnostic only, never written to result files.
    #[serde(skip)]
    pub wall_secs: f64,
}

/// One aggregated output row per (sweep value, deployment).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AggregateRow {
    pub sweep_var: String,
    pub value: f64,
    pub deployment: String,
    pub trials: usize,
    pub pe_mean: f64,
    pub pe_stderr: f64,
    pub nmse_mean_db: f64,
    pub nmse_stderr_db: f64,
    pub iters_mean: f64,
    pub fronthaul_scalars: f64,
}

/// A failed trial kept for the record under `fail_policy = skip`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TrialFailure {
    pub sweep_value: f64,
    pub trial: usize,
    pub seed: u64,
    pub message: String,
}

/// Everything an experiment run produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub rows: Vec<AggregateRow>,
    pub per_trial: Vec<TrialMetrics>,
    pub failures: Vec<TrialFailure>,
}

/// Per-cell processing: each access point recovers only its own users from
/// its own observation, treating everything else as noise. Out-of-cell
/// channel blocks are reported as zero because this deployment never
/// estimates them.
pub fn run_baseline(
    observation: &Observation,
    pilots: &Array2<Complex64>,
    solver: &SolverSettings,
    detector: &DetectorConfig,
) -> Result<DetectionResult> {
    solver.validate()?;
    detector.validate()?;
    let cells = observation.per_ap.len();
    let users = pilots.ncols();
    if cells == 0 || users % cells != 0 {
        return Err(Error::dimension(format!(
            "{users} users cannot be split evenly over {cells} cells"
        )));
    }
    let users_per_cell = users / cells;
    let m_c = observation.antennas_per_ap();
    let mut x_hat = Array2::from_elem((users, cells * m_c), Complex64::new(0.0, 0.0));
    let mut active = vec![false; users];
    let mut belief_summary = vec![0.0; users];
    let mut iterations = 0usize;
    for (b, block) in observation.per_ap.iter().enumerate() {
        let own_pilots = pilots
            .slice(s![.., b * users_per_cell..(b + 1) * users_per_cell])
            .to_owned();
        let (prior, sigma0) = Prior::from_measurements(block, &own_pilots, solver.gamma_init)?;
        let run = run_mmv_amp(
            block,
            &own_pilots,
            &prior,
            sigma0,
            &solver.options,
            &solver.stopping,
            RefineRule::RowCommon,
        )?;
        iterations = iterations.max(run.iterations);
        x_hat
            .slice_mut(s![
                b * users_per_cell..(b + 1) * users_per_cell,
                b * m_c..(b + 1) * m_c
            ])
            .assign(&run.x_hat);
        for local in 0..users_per_cell {
            let k = b * users_per_cell + local;
            let block_beliefs: Vec<f64> = run.beliefs.row(local).iter().copied().collect();
            active[k] = decide_active(&block_beliefs, detector);
            belief_summary[k] = block_beliefs.iter().sum::<f64>() / m_c as f64;
        }
    }
    zero_inactive_rows(&mut x_hat, &active);
    Ok(DetectionResult {
        active,
        x_hat,
        iterations,
        belief_summary,
    })
}

fn run_deployment(
    deployment: Deployment,
    scenario: &Scenario,
    solver: &SolverSettings,
    detector: &DetectorConfig,
) -> Result<(DetectionResult, u64)> {
    match deployment {
        Deployment::Cloud => {
            let problem = cloud::concatenate(&scenario.observation)?;
            let fronthaul = cloud::fronthaul_scalars(&problem);
            let result = cloud::cloud_detect(&problem, &scenario.pilots, solver, detector)?;
            Ok((result, fronthaul))
        }
        Deployment::Fog { n_co } => {
            let assoc = associate_faps(&scenario.users, &scenario.layout, n_co)?;
            let outcome = run_fog(
                &scenario.observation,
                &scenario.pilots,
                &assoc,
                solver,
                detector,
                &FogOptions::default(),
            )?;
            Ok((
                outcome.detection,
                outcome.uplink_scalars + outcome.downlink_scalars,
            ))
        }
        Deployment::Baseline => {
            let result = run_baseline(&scenario.observation, &scenario.pilots, solver, detector)?;
            Ok((result, 0))
        }
    }
}

/// Run every requested deployment on one freshly generated scenario.
pub fn run_trial(
    point: &ExperimentConfig,
    sweep_value: f64,
    trial: usize,
    scenario_seed: u64,
) -> Result<Vec<TrialMetrics>> {
    let scenario = Scenario::generate(&point.scenario, scenario_seed)?;
    let digest = scenario.digest();
    let solver = point.solver.settings();
    let mut metrics = Vec::with_capacity(point.experiment.deployments.len());
    for &deployment in &point.experiment.deployments {
        let start = std::time::Instant::now();
        let (result, fronthaul) = run_deployment(deployment, &scenario, &solver, &point.detector)?;
        let wall = start.elapsed().as_secs_f64();
        let errors = error_probability(&result.active, &scenario.users.activity)?;
        let nmse = nmse_db(&result.x_hat, &scenario.channel)?;
        metrics.push(TrialMetrics {
            deployment: deployment.to_string(),
            sweep_value,
            trial,
            seed: scenario_seed,
            scenario_digest: digest,
            error_probability: errors.error_probability,
            missed: errors.missed,
            false_alarm: errors.false_alarm,
            nmse_db: nmse,
            iterations: result.iterations,
            fronthaul_scalars: fronthaul,
            wall_secs: wall,
        });
    }
    Ok(metrics)
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Run the full experiment: every sweep point, every trial, every deployment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let points = cfg.sweep_points()?;
    let trials = cfg.experiment.trials;
    let base_seed = cfg.experiment.base_seed;

    let mut per_trial: Vec<TrialMetrics> = Vec::new();
    let mut failures: Vec<TrialFailure> = Vec::new();
    let mut rows: Vec<AggregateRow> = Vec::new();

    for (sweep_name, sweep_value, point) in &points {
        // Trials are pure functions of their seed; the parallel map keeps
        // index order, so any worker count yields this exact vector.
        let results: Vec<(usize, u64, Result<Vec<TrialMetrics>>)> = (0..trials)
            .into_par_iter()
            .map(|trial| {
                let scenario_seed = seed::trial_seed(base_seed, trial);
                (
                    trial,
                    scenario_seed,
                    run_trial(point, *sweep_value, trial, scenario_seed),
                )
            })
            .collect();

        let mut point_metrics: Vec<TrialMetrics> = Vec::new();
        for (trial, scenario_seed, outcome) in results {
            match outcome {
                Ok(metrics) => {
                    debug_assert!(metrics
                        .windows(2)
                        .all(|w| w[0].scenario_digest == w[1].scenario_digest));
                    point_metrics.extend(metrics);
                }
                Err(err) => match cfg.experiment.fail_policy {
                    FailPolicy::Abort => {
                        return Err(Error::Trial {
                            trial,
                            seed: scenario_seed,
                            source: Box::new(err),
                        })
                    }
                    FailPolicy::Skip => failures.push(TrialFailure {
                        sweep_value: *sweep_value,
                        trial,
                        seed: scenario_seed,
                        message: err.to_string(),
                    }),
                },
            }
        }

        for &deployment in &point.experiment.deployments {
            let name = deployment.to_string();
            let selected: Vec<&TrialMetrics> = point_metrics
                .iter()
                .filter(|m| m.deployment == name)
                .collect();
            if selected.is_empty() {
                continue;
            }
            let pe: Vec<f64> = selected.iter().map(|m| m.error_probability).collect();
            let nmse: Vec<f64> = selected.iter().map(|m| m.nmse_db).collect();
            let iters: Vec<f64> = selected.iter().map(|m| m.iterations as f64).collect();
            let fronthaul: Vec<f64> = selected
                .iter()
                .map(|m| m.fronthaul_scalars as f64)
                .collect();
            let (pe_mean, pe_stderr) = mean_and_stderr(&pe);
            let (nmse_mean_db, nmse_stderr_db) = mean_and_stderr(&nmse);
            rows.push(AggregateRow {
                sweep_var: sweep_name.clone(),
                value: *sweep_value,
                deployment: name,
                trials: selected.len(),
                pe_mean,
                pe_stderr,
                nmse_mean_db,
                nmse_stderr_db,
                iters_mean: mean_and_stderr(&iters).0,
                fronthaul_scalars: mean_and_stderr(&fronthaul).0,
            });
        }
        per_trial.extend(point_metrics);
    }

    Ok(ExperimentOutput {
        config: cfg.clone(),
        rows,
        per_trial,
        failures,
    })
}
