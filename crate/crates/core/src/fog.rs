//! Edge deployment: every access point runs the solver on its own
//! observation, and each user's sparsity ratio is refined jointly over the
//! beliefs reported by that user's `n_co` nearest access points.
//!
//! One round = every access point performs one solver iteration on its local
//! problem, averages its per-user beliefs over its own antennas, and the
//! per-user averages are reduced over the user's cooperation set and written
//! back to the cooperating access points before the next round may begin.
//! The loop runs for a fixed iteration budget. Access points may be stepped
//! sequentially or in parallel; their state is disjoint between rounds, so
//! both schedules produce identical output.

use std::sync::Arc;

use ndarray::{s, Array2};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amp::{diverged, AmpEngine, PilotOps, Prior, DIVERGENCE_FACTOR};
use crate::cloud::SolverSettings;
use crate::detect::{decide_active, zero_inactive_rows, DetectionResult, DetectorConfig};
use crate::error::{Error, Result};
use crate::scenario::{NetworkLayout, Observation, UserPopulation};

/// Per-user cooperation sets: the `n_co` access points that refine the user's
/// sparsity ratio, sorted by access-point index.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AssociationMap {
    pub sets: Vec<Vec<usize>>,
    pub n_co: usize,
}

impl AssociationMap {
    /// Every user associated with every access point.
    pub fn full(users: usize, cells: usize) -> AssociationMap {
        AssociationMap {
            sets: vec![(0..cells).collect(); users],
            n_co: cells,
        }
    }

    pub fn validate(&self, users: usize, cells: usize) -> Result<()> {
        if self.sets.len() != users {
            return Err(Error::dimension(format!(
                "{} cooperation sets for {users} users",
                self.sets.len()
            )));
        }
        for (k, set) in self.sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::config(format!("user {k} has an empty cooperation set")));
            }
            if set.len() != self.n_co {
                return Err(Error::config(format!(
                    "user {k} cooperates with {} access points, expected {}",
                    set.len(),
                    self.n_co
                )));
            }
            if set.iter().any(|&b| b >= cells) {
                return Err(Error::config(format!(
                    "user {k} references an access point outside the layout"
                )));
            }
        }
        Ok(())
    }
}

/// Select each user's `n_co` closest access points (Euclidean distance, ties
/// broken by the lower access-point index).
pub fn associate_faps(
    population: &UserPopulation,
    layout: &NetworkLayout,
    n_co: usize,
) -> Result<AssociationMap> {
    let cells = layout.cells();
    if n_co == 0 || n_co > cells {
        return Err(Error::config(format!(
            "cooperation size {n_co} must lie in 1..={cells}"
        )));
    }
    let sets = population
        .positions
        .iter()
        .map(|&p| {
            let mut by_distance: Vec<(f64, usize)> = (0..cells)
                .map(|b| (layout.distance(b, p), b))
                .collect();
            by_distance.sort_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
            });
            let mut chosen: Vec<usize> =
                by_distance.iter().take(n_co).map(|&(_, b)| b).collect();
            chosen.sort_unstable();
            chosen
        })
        .collect();
    Ok(AssociationMap { sets, n_co })
}

/// Antenna-mean belief per user at one access point (row means of its belief
/// matrix, in antenna order).
pub fn local_refine(beliefs: &Array2<f64>) -> Vec<f64> {
    let (users, m) = beliefs.dim();
    (0..users)
        .map(|k| {
            let mut sum = 0.0;
            for col in 0..m {
                sum += beliefs[[k, col]];
            }
            sum / m as f64
        })
        .collect()
}

/// Reduce each user's local belief summaries over its cooperation set.
/// `local_beliefs` is users x access points.
pub fn joint_refine(local_beliefs: &Array2<f64>, assoc: &AssociationMap) -> Result<Vec<f64>> {
    let (users, cells) = local_beliefs.dim();
    assoc.validate(users, cells)?;
    Ok((0..users)
        .map(|k| {
            let set = &assoc.sets[k];
            let mut sum = 0.0;
            for &b in set {
                sum += local_beliefs[[k, b]];
            }
            sum / set.len() as f64
        })
        .collect())
}

/// One uploaded belief summary, for fronthaul-traffic accounting.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MessageRecord {
    pub iter: usize,
    pub fap: usize,
    pub user: usize,
    pub belief: f64,
}

/// Execution switches for the fog runner.
#[derive(Debug, Clone, Copy, Default)]
pub struct FogOptions {
    /// Step the access points concurrently within a round.
    pub parallel_faps: bool,
    /// Record every uploaded belief summary.
    pub collect_messages: bool,
}

/// Result of a fog run, with fronthaul accounting.
#[derive(Debug, Clone)]
pub struct FogOutcome {
    pub detection: DetectionResult,
    /// Belief summaries uploaded to fog processing units, total scalars.
    pub uplink_scalars: u64,
    /// Refined ratios pushed back to cooperating access points.
    pub downlink_scalars: u64,
    pub messages: Vec<MessageRecord>,
}

/// Run the cooperative edge deployment.
///
/// The iteration budget is `solver.stopping.max_iters`; the relative-change
/// threshold does not apply here (the cooperative loop stops on its round
/// count only). Each access point's noise estimate stays local; only belief
/// summaries cross the fronthaul.
pub fn run_fog(
    observation: &Observation,
    pilots: &Array2<Complex64>,
    assoc: &AssociationMap,
    solver: &SolverSettings,
    detector: &DetectorConfig,
    opts: &FogOptions,
) -> Result<FogOutcome> {
    solver.validate()?;
    detector.validate()?;
    let cells = observation.per_ap.len();
    if cells == 0 {
        return Err(Error::dimension("observation has no access points"));
    }
    let users = pilots.ncols();
    if users % cells != 0 {
        return Err(Error::dimension(format!(
            "{users} users cannot be split evenly over {cells} cells"
        )));
    }
    assoc.validate(users, cells)?;
    let users_per_cell = users / cells;
    let m_c = observation.antennas_per_ap();

    let pilot_ops = Arc::new(PilotOps::new(pilots)?);
    let mut engines = Vec::with_capacity(cells);
    let mut scales = Vec::with_capacity(cells);
    for block in &observation.per_ap {
        let (prior, sigma0) = Prior::from_measurements(block, pilots, solver.gamma_init)?;
        let engine = AmpEngine::with_pilot(
            Arc::clone(&pilot_ops),
            block,
            &prior,
            sigma0,
            &solver.options,
        )?;
        scales.push(engine.initial_scale());
        engines.push(engine);
    }

    let rounds = solver.stopping.max_iters;
    let mut uplink = 0u64;
    let mut downlink = 0u64;
    let mut messages = Vec::new();
    let mut local_beliefs = Array2::zeros((users, cells));
    for round in 1..=rounds {
        let stats: Vec<_> = if opts.parallel_faps {
            engines.par_iter_mut().map(|e| e.step()).collect()
        } else {
            engines.iter_mut().map(|e| e.step()).collect()
        };
        for (b, s) in stats.iter().enumerate() {
            if !s.finite || diverged(s.residual, scales[b]) {
                return Err(Error::Divergence {
                    iter: s.iter,
                    residual: s.residual,
                    limit: DIVERGENCE_FACTOR * scales[b],
                });
            }
        }
        for (b, engine) in engines.iter().enumerate() {
            let means = engine.row_belief_means();
            for (k, &m) in means.iter().enumerate() {
                local_beliefs[[k, b]] = m;
            }
        }
        // Joint refinement at the fog processing units: each cooperating
        // access point uploads one scalar per associated user and receives
        // the refined ratio back.
        for k in 0..users {
            let set = &assoc.sets[k];
            let mut sum = 0.0;
            for &b in set {
                sum += local_beliefs[[k, b]];
                uplink += 1;
                if opts.collect_messages {
                    messages.push(MessageRecord {
                        iter: round,
                        fap: b,
                        user: k,
                        belief: local_beliefs[[k, b]],
                    });
                }
            }
            let gamma = sum / set.len() as f64;
            for &b in set {
                engines[b].set_user_sparsity(k, gamma);
                downlink += 1;
            }
        }
    }

    // Each access point decides activity for its own users from its own
    // antennas and reports its channel estimates for all users.
    let mut x_hat = Array2::from_elem((users, cells * m_c), Complex64::new(0.0, 0.0));
    for (b, engine) in engines.iter().enumerate() {
        x_hat
            .slice_mut(s![.., b * m_c..(b + 1) * m_c])
            .assign(&engine.posterior_mean());
    }
    let mut active = vec![false; users];
    let mut belief_summary = vec![0.0; users];
    for (b, engine) in engines.iter().enumerate() {
        let beliefs = engine.beliefs();
        let means = engine.row_belief_means();
        for local in 0..users_per_cell {
            let k = b * users_per_cell + local;
            let block: Vec<f64> = beliefs.row(k).iter().copied().collect();
            active[k] = decide_active(&block, detector);
            belief_summary[k] = means[k];
        }
    }
    zero_inactive_rows(&mut x_hat, &active);

    Ok(FogOutcome {
        detection: DetectionResult {
            active,
            x_hat,
            iterations: rounds,
            belief_summary,
        },
        uplink_scalars: uplink,
        downlink_scalars: downlink,
        messages,
    })
}
