//! Centralized deployment: all access-point observations are shipped to one
//! processing pool, concatenated into a single wide problem, and solved with
//! row-common sparsity refinement across every antenna in the network.

use ndarray::{s, Array2};
use num_complex::Complex64;

use crate::amp::{
    run_mmv_amp, AmpOptions, AmpRun, Prior, RefineRule, StoppingRule,
};
use crate::detect::{decide_active, zero_inactive_rows, DetectionResult, DetectorConfig};
use crate::error::{Error, Result};
use crate::scenario::Observation;

/// The concatenated recovery problem.
#[derive(Debug, Clone)]
pub struct CloudProblem {
    /// `G x (cells * antennas_per_ap)` stacked observation.
    pub y: Array2<Complex64>,
    pub cells: usize,
    pub antennas_per_ap: usize,
}

/// Stack the per-AP observations side by side, in access-point order.
pub fn concatenate(observation: &Observation) -> Result<CloudProblem> {
    if observation.per_ap.is_empty() {
        return Err(Error::dimension("observation has no access points"));
    }
    let g = observation.per_ap[0].nrows();
    let m_c = observation.per_ap[0].ncols();
    for (b, block) in observation.per_ap.iter().enumerate() {
        if block.nrows() != g || block.ncols() != m_c {
            return Err(Error::dimension(format!(
                "access point {b} contributes a {:?} block, expected ({g}, {m_c})",
                block.dim()
            )));
        }
    }
    let cells = observation.per_ap.len();
    let mut y = Array2::from_elem((g, cells * m_c), Complex64::new(0.0, 0.0));
    for (b, block) in observation.per_ap.iter().enumerate() {
        y.slice_mut(s![.., b * m_c..(b + 1) * m_c]).assign(block);
    }
    Ok(CloudProblem {
        y,
        cells,
        antennas_per_ap: m_c,
    })
}

/// Split a stacked observation back into its per-AP blocks.
pub fn split(problem: &CloudProblem) -> Vec<Array2<Complex64>> {
    let m_c = problem.antennas_per_ap;
    (0..problem.cells)
        .map(|b| problem.y.slice(s![.., b * m_c..(b + 1) * m_c]).to_owned())
        .collect()
}

/// Complex scalars every access point ships over fronthaul for this problem.
pub fn fronthaul_scalars(problem: &CloudProblem) -> u64 {
    (problem.cells * problem.y.nrows() * problem.antennas_per_ap) as u64
}

/// Solver parameters shared by the deployments.
#[derive(Debug, Clone, Copy)]
pub struct SolverSettings {
    pub options: AmpOptions,
    pub stopping: StoppingRule,
    /// Initial sparsity ratio for the energy-based prior.
    pub gamma_init: f64,
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        self.options.validate()?;
        self.stopping.validate()?;
        if !(0.0 < self.gamma_init && self.gamma_init < 1.0) {
            return Err(Error::config("gamma_init must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Solve the concatenated problem and detect activity per user from the
/// beliefs over its home access point's antennas.
///
/// The sparsity refinement averages per-AP block means (equal to the plain
/// row mean, with the same grouped reduction the fog deployment uses).
pub fn cloud_detect(
    problem: &CloudProblem,
    pilots: &Array2<Complex64>,
    solver: &SolverSettings,
    detector: &DetectorConfig,
) -> Result<DetectionResult> {
    Ok(cloud_detect_traced(problem, pilots, solver, detector)?.0)
}

/// Like [`cloud_detect`] but also returns the per-iteration solver trace.
pub fn cloud_detect_traced(
    problem: &CloudProblem,
    pilots: &Array2<Complex64>,
    solver: &SolverSettings,
    detector: &DetectorConfig,
) -> Result<(DetectionResult, Vec<crate::amp::TraceRow>)> {
    solver.validate()?;
    detector.validate()?;
    let users = pilots.ncols();
    if users % problem.cells != 0 {
        return Err(Error::dimension(format!(
            "{users} users cannot be split evenly over {} cells",
            problem.cells
        )));
    }
    let (prior, sigma0) = Prior::from_measurements(&problem.y, pilots, solver.gamma_init)?;
    let run: AmpRun = run_mmv_amp(
        &problem.y,
        pilots,
        &prior,
        sigma0,
        &solver.options,
        &solver.stopping,
        RefineRule::BlockedRowCommon {
            block_len: problem.antennas_per_ap,
        },
    )?;
    let users_per_cell = users / problem.cells;
    let m_c = problem.antennas_per_ap;
    let mut active = Vec::with_capacity(users);
    let mut belief_summary = Vec::with_capacity(users);
    for k in 0..users {
        let home = k / users_per_cell;
        let block: Vec<f64> = run
            .beliefs
            .slice(s![k, home * m_c..(home + 1) * m_c])
            .iter()
            .copied()
            .collect();
        active.push(decide_active(&block, detector));
        belief_summary.push(block.iter().sum::<f64>() / m_c as f64);
    }
    let mut x_hat = run.x_hat;
    zero_inactive_rows(&mut x_hat, &active);
    Ok((
        DetectionResult {
            active,
            x_hat,
            iterations: run.iterations,
            belief_summary,
        },
        run.trace,
    ))
}
