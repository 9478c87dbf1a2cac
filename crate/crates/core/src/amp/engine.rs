//! Iterative engine for the MMV-AMP recursion.
//!
//! State is stored per observation column: every factor- and variable-node
//! update for column `m` depends only on column `m` of the observation, the
//! shared pilot matrix, the per-column noise estimate, and that column's
//! sparsity ratios. Columns are therefore processed independently within an
//! iteration, with the sparsity-ratio refinement as the only cross-column
//! synchronization point. The per-column reductions are plain left-to-right
//! sums, so results do not depend on how columns are scheduled.

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::denoise::{denoise_scalar, LikelihoodForm};
use crate::error::{Error, Result};

/// Lower clamp for sparsity ratios; the upper clamp is `1 - GAMMA_FLOOR`.
pub const GAMMA_FLOOR: f64 = 1e-8;
/// Lower clamp for noise-variance estimates.
pub const SIGMA_FLOOR: f64 = 1e-12;
/// Lower clamp for variable-node variances.
pub const D_FLOOR: f64 = 1e-15;
/// Lower clamp for the slab variance produced by the energy-based init.
pub const TAU_FLOOR: f64 = 1e-12;
/// Residual growth beyond this factor of the initial scale aborts the run.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

pub fn clamp_gamma(g: f64) -> f64 {
    g.clamp(GAMMA_FLOOR, 1.0 - GAMMA_FLOOR)
}

/// True when the residual indicates the iteration has blown up.
pub fn diverged(residual: f64, initial_scale: f64) -> bool {
    !residual.is_finite() || residual > DIVERGENCE_FACTOR * (initial_scale + f64::MIN_POSITIVE)
}

/// How the per-column noise estimates are aggregated after their update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// Keep one estimate per observation column.
    #[default]
    PerColumn,
    /// Average the per-column updates into one shared estimate.
    Scalar,
}

/// Engine tuning knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AmpOptions {
    pub likelihood: LikelihoodForm,
    pub sigma_mode: SigmaMode,
    /// Convex damping weight on the previous posterior mean; 0 disables it.
    pub damping: f64,
}

impl Default for AmpOptions {
    fn default() -> Self {
        AmpOptions {
            likelihood: LikelihoodForm::Complex,
            sigma_mode: SigmaMode::PerColumn,
            damping: 0.0,
        }
    }
}

impl AmpOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.damping) {
            return Err(Error::config("damping must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

/// Spike-and-slab prior: per-entry sparsity ratios plus the shared slab.
#[derive(Debug, Clone)]
pub struct Prior {
    /// Sparsity ratios, users x columns.
    pub gamma: Array2<f64>,
    pub mu: Complex64,
    pub tau: f64,
}

impl Prior {
    pub fn uniform(users: usize, columns: usize, gamma0: f64, mu: Complex64, tau: f64) -> Result<Prior> {
        if !(0.0 < gamma0 && gamma0 < 1.0) {
            return Err(Error::config("initial sparsity ratio must lie in (0, 1)"));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::config("slab variance must be positive and finite"));
        }
        Ok(Prior {
            gamma: Array2::from_elem((users, columns), gamma0),
            mu,
            tau,
        })
    }

    /// Energy-based initialization from the measurements: the noise estimate
    /// assumes a large initial SNR, and the slab variance matches the
    /// measurement energy left after noise, spread over the expected support.
    /// Returns the prior together with the initial noise variance.
    pub fn from_measurements(
        y: &Array2<Complex64>,
        s: &Array2<Complex64>,
        gamma0: f64,
    ) -> Result<(Prior, f64)> {
        let (g, m) = y.dim();
        let users = s.ncols();
        if g == 0 || m == 0 || users == 0 {
            return Err(Error::dimension("empty measurement or pilot matrix"));
        }
        let y_energy: f64 = y.iter().map(|v| v.norm_sqr()).sum();
        let s_energy: f64 = s.iter().map(|v| v.norm_sqr()).sum();
        if s_energy == 0.0 {
            return Err(Error::numerical("pilot matrix is all-zero"));
        }
        const INITIAL_SNR: f64 = 100.0;
        let sigma0 = (y_energy / ((INITIAL_SNR + 1.0) * (g * m) as f64)).max(SIGMA_FLOOR);
        let tau = ((y_energy - (g * m) as f64 * sigma0) / (s_energy * gamma0 * m as f64))
            .max(TAU_FLOOR);
        let prior = Prior::uniform(users, m, gamma0, Complex64::new(0.0, 0.0), tau)?;
        Ok((prior, sigma0))
    }

    fn validate(&self, users: usize, columns: usize) -> Result<()> {
        if self.gamma.dim() != (users, columns) {
            return Err(Error::dimension(format!(
                "prior sparsity ratios are {:?}, expected ({users}, {columns})",
                self.gamma.dim()
            )));
        }
        if self.gamma.iter().any(|&g| !(0.0 < g && g < 1.0)) {
            return Err(Error::config("prior sparsity ratios must lie in (0, 1)"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("slab variance must be positive and finite"));
        }
        Ok(())
    }
}

/// Precomputed pilot-matrix views shared by every engine on the same pilots.
#[derive(Debug)]
pub struct PilotOps {
    /// `G x K` pilot matrix, row-major.
    s: Array2<Complex64>,
    /// Entrywise squared magnitudes, `G x K`.
    s_abs2: Array2<f64>,
    /// Conjugate transpose, `K x G`, row-major for per-user scans.
    s_conj_t: Array2<Complex64>,
    /// Squared magnitudes of the transpose, `K x G`.
    s_abs2_t: Array2<f64>,
}

impl PilotOps {
    pub fn new(s: &Array2<Complex64>) -> Result<Self> {
        let (g, k) = s.dim();
        if g == 0 || k == 0 {
            return Err(Error::dimension("pilot matrix must be non-empty"));
        }
        let s = s.as_standard_layout().to_owned();
        let s_abs2 = s.map(|v| v.norm_sqr());
        for user in 0..k {
            if s_abs2.column(user).sum() == 0.0 {
                return Err(Error::ZeroPilotColumn { user });
            }
        }
        let s_conj_t = Array2::from_shape_fn((k, g), |(i, j)| s[[j, i]].conj());
        let s_abs2_t = Array2::from_shape_fn((k, g), |(i, j)| s_abs2[[j, i]]);
        Ok(PilotOps {
            s,
            s_abs2,
            s_conj_t,
            s_abs2_t,
        })
    }

    pub fn pilot_length(&self) -> usize {
        self.s.nrows()
    }

    pub fn users(&self) -> usize {
        self.s.ncols()
    }

    pub fn matrix(&self) -> &Array2<Complex64> {
        &self.s
    }
}

/// All message-passing state for one observation column.
#[derive(Debug, Clone)]
struct ColumnState {
    y: Vec<Complex64>,
    z: Vec<Complex64>,
    z_prev: Vec<Complex64>,
    v_fac: Vec<f64>,
    v_fac_prev: Vec<f64>,
    /// Scratch: 1 / (sigma + V) per measurement row.
    w: Vec<f64>,
    /// Scratch: (y - Z) * w per measurement row.
    rw: Vec<Complex64>,
    x_hat: Vec<Complex64>,
    v: Vec<f64>,
    c: Vec<Complex64>,
    d: Vec<f64>,
    pi: Vec<f64>,
    gamma: Vec<f64>,
    sigma: f64,
}

/// Per-iteration summary returned by [`AmpEngine::step`].
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    /// Completed iterations so far (this step included).
    pub iter: usize,
    /// Frobenius norm of `Y - Z` after the factor update.
    pub residual: f64,
    /// Squared Frobenius norm of the posterior-mean change in this step.
    pub delta_sq: f64,
    /// Squared Frobenius norm of the previous posterior mean.
    pub prev_sq: f64,
    /// Mean belief indicator over all entries.
    pub mean_belief: f64,
    /// Mean noise-variance estimate over columns.
    pub sigma_mean: f64,
    /// False when any reduction produced a non-finite value.
    pub finite: bool,
}

/// One MMV-AMP solver instance on a fixed `(Y, S)` pair.
pub struct AmpEngine {
    pilot: Arc<PilotOps>,
    cols: Vec<ColumnState>,
    mu: Complex64,
    tau: f64,
    opts: AmpOptions,
    iterations: usize,
    initial_scale: f64,
}

impl AmpEngine {
    pub fn new(
        y: &Array2<Complex64>,
        s: &Array2<Complex64>,
        prior: &Prior,
        sigma0: f64,
        opts: &AmpOptions,
    ) -> Result<Self> {
        let pilot = Arc::new(PilotOps::new(s)?);
        Self::with_pilot(pilot, y, prior, sigma0, opts)
    }

    /// Build an engine sharing an existing pilot precomputation.
    pub fn with_pilot(
        pilot: Arc<PilotOps>,
        y: &Array2<Complex64>,
        prior: &Prior,
        sigma0: f64,
        opts: &AmpOptions,
    ) -> Result<Self> {
        opts.validate()?;
        let (g, m) = y.dim();
        if g != pilot.pilot_length() {
            return Err(Error::dimension(format!(
                "observation has {g} rows, pilots have {}",
                pilot.pilot_length()
            )));
        }
        if m == 0 {
            return Err(Error::dimension("observation has no columns"));
        }
        let users = pilot.users();
        prior.validate(users, m)?;
        if !(sigma0.is_finite() && sigma0 >= 0.0) {
            return Err(Error::config("initial noise variance must be non-negative"));
        }
        let sigma0 = sigma0.max(SIGMA_FLOOR);
        let initial_scale = y.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let cols = (0..m)
            .map(|col| {
                let y_col: Vec<Complex64> = y.column(col).iter().copied().collect();
                // The kernel swaps current into previous at the start of each
                // iteration, so the initial Z = Y and V = 1 live in the
                // current buffers here.
                ColumnState {
                    z: y_col.clone(),
                    z_prev: vec![Complex64::new(0.0, 0.0); g],
                    v_fac: vec![1.0; g],
                    v_fac_prev: vec![0.0; g],
                    w: vec![0.0; g],
                    rw: vec![Complex64::new(0.0, 0.0); g],
                    x_hat: vec![Complex64::new(0.0, 0.0); users],
                    v: vec![prior.tau; users],
                    c: vec![Complex64::new(0.0, 0.0); users],
                    d: vec![0.0; users],
                    pi: vec![0.0; users],
                    gamma: prior.gamma.column(col).iter().copied().collect(),
                    sigma: sigma0,
                    y: y_col,
                }
            })
            .collect();
        Ok(AmpEngine {
            pilot,
            cols,
            mu: prior.mu,
            tau: prior.tau,
            opts: *opts,
            iterations: 0,
            initial_scale,
        })
    }

    pub fn users(&self) -> usize {
        self.pilot.users()
    }

    pub fn columns(&self) -> usize {
        self.cols.len()
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Frobenius norm of the observation; reference scale for divergence.
    pub fn initial_scale(&self) -> f64 {
        self.initial_scale
    }

    /// Run one full iteration: factor update, variable update, denoising,
    /// and the elementwise hyper-parameter updates (sparsity ratios become
    /// the new beliefs; noise variances are re-estimated per column).
    /// Cross-column sparsity refinement is applied by the caller afterwards.
    pub fn step(&mut self) -> StepStats {
        let mu = self.mu;
        let tau = self.tau;
        let damping = self.opts.damping;
        let likelihood = self.opts.likelihood;
        let pilot = Arc::clone(&self.pilot);

        let mut delta_sq = 0.0;
        let mut prev_sq = 0.0;
        let mut resid_sq = 0.0;
        let mut pi_sum = 0.0;
        let mut sigma_acc = 0.0;
        for col in self.cols.iter_mut() {
            let stats = step_column(col, &pilot, mu, tau, damping, likelihood);
            delta_sq += stats.delta_sq;
            prev_sq += stats.prev_sq;
            resid_sq += stats.resid_sq;
            pi_sum += stats.pi_sum;
            sigma_acc += stats.sigma_next;
        }
        if self.opts.sigma_mode == SigmaMode::Scalar {
            let shared = (sigma_acc / self.cols.len() as f64).max(SIGMA_FLOOR);
            for col in self.cols.iter_mut() {
                col.sigma = shared;
            }
        }
        self.iterations += 1;
        let entries = (self.users() * self.columns()) as f64;
        let sigma_mean = self.cols.iter().map(|c| c.sigma).sum::<f64>() / self.cols.len() as f64;
        let residual = resid_sq.sqrt();
        StepStats {
            iter: self.iterations,
            residual,
            delta_sq,
            prev_sq,
            mean_belief: pi_sum / entries,
            sigma_mean,
            finite: residual.is_finite() && delta_sq.is_finite() && sigma_mean.is_finite(),
        }
    }

    /// Row-common refinement: every entry of a user's row receives the mean
    /// of that row's beliefs.
    pub fn apply_row_common_refinement(&mut self) {
        let users = self.users();
        let m = self.columns() as f64;
        for k in 0..users {
            let mut sum = 0.0;
            for col in &self.cols {
                sum += col.pi[k];
            }
            let g = clamp_gamma(sum / m);
            for col in self.cols.iter_mut() {
                col.gamma[k] = g;
            }
        }
    }

    /// Row-common refinement computed as a mean of per-block means over
    /// contiguous column blocks of `block_len` (one block per access point in
    /// the concatenated problem). Algebraically identical to
    /// [`Self::apply_row_common_refinement`] for equal blocks; the grouped
    /// reduction mirrors the fog deployment's two-level average so the two
    /// paths agree exactly in floating point.
    pub fn apply_blocked_row_common_refinement(&mut self, block_len: usize) -> Result<()> {
        let m = self.columns();
        if block_len == 0 || m % block_len != 0 {
            return Err(Error::dimension(format!(
                "{m} columns cannot be split into blocks of {block_len}"
            )));
        }
        let blocks = m / block_len;
        let users = self.users();
        for k in 0..users {
            let mut acc = 0.0;
            for blk in 0..blocks {
                let mut block_sum = 0.0;
                for m_idx in blk * block_len..(blk + 1) * block_len {
                    block_sum += self.cols[m_idx].pi[k];
                }
                acc += block_sum / block_len as f64;
            }
            let g = clamp_gamma(acc / blocks as f64);
            for col in self.cols.iter_mut() {
                col.gamma[k] = g;
            }
        }
        Ok(())
    }

    /// Overwrite one user's sparsity ratio across all columns.
    pub fn set_user_sparsity(&mut self, user: usize, gamma: f64) {
        let g = clamp_gamma(gamma);
        for col in self.cols.iter_mut() {
            col.gamma[user] = g;
        }
    }

    /// Overwrite the whole sparsity-ratio matrix (users x columns).
    pub fn set_sparsity_ratios(&mut self, gamma: &Array2<f64>) -> Result<()> {
        if gamma.dim() != (self.users(), self.columns()) {
            return Err(Error::dimension("sparsity-ratio shape mismatch"));
        }
        for (m, col) in self.cols.iter_mut().enumerate() {
            for (k, slot) in col.gamma.iter_mut().enumerate() {
                *slot = clamp_gamma(gamma[[k, m]]);
            }
        }
        Ok(())
    }

    /// Mean belief per user over this engine's columns, in column order.
    pub fn row_belief_means(&self) -> Vec<f64> {
        let users = self.users();
        let m = self.columns() as f64;
        (0..users)
            .map(|k| {
                let mut sum = 0.0;
                for col in &self.cols {
                    sum += col.pi[k];
                }
                sum / m
            })
            .collect()
    }

    fn assemble<T>(&self, get: impl Fn(&ColumnState, usize) -> T) -> Array2<T> {
        let (users, m) = (self.users(), self.columns());
        Array2::from_shape_fn((users, m), |(k, col)| get(&self.cols[col], k))
    }

    pub fn posterior_mean(&self) -> Array2<Complex64> {
        self.assemble(|c, k| c.x_hat[k])
    }

    pub fn posterior_variance(&self) -> Array2<f64> {
        self.assemble(|c, k| c.v[k])
    }

    pub fn beliefs(&self) -> Array2<f64> {
        self.assemble(|c, k| c.pi[k])
    }

    pub fn sparsity_ratios(&self) -> Array2<f64> {
        self.assemble(|c, k| c.gamma[k])
    }

    pub fn pseudo_measurements(&self) -> Array2<Complex64> {
        self.assemble(|c, k| c.c[k])
    }

    pub fn pseudo_variances(&self) -> Array2<f64> {
        self.assemble(|c, k| c.d[k])
    }

    pub fn factor_means(&self) -> Array2<Complex64> {
        let (g, m) = (self.pilot.pilot_length(), self.columns());
        Array2::from_shape_fn((g, m), |(row, col)| self.cols[col].z[row])
    }

    pub fn factor_variances(&self) -> Array2<f64> {
        let (g, m) = (self.pilot.pilot_length(), self.columns());
        Array2::from_shape_fn((g, m), |(row, col)| self.cols[col].v_fac[row])
    }

    pub fn noise_estimates(&self) -> Vec<f64> {
        self.cols.iter().map(|c| c.sigma).collect()
    }
}

struct ColumnStats {
    delta_sq: f64,
    prev_sq: f64,
    resid_sq: f64,
    pi_sum: f64,
    sigma_next: f64,
}

fn step_column(
    col: &mut ColumnState,
    pilot: &PilotOps,
    mu: Complex64,
    tau: f64,
    damping: f64,
    likelihood: LikelihoodForm,
) -> ColumnStats {
    let g_len = col.y.len();
    let users = col.x_hat.len();
    let sigma = col.sigma;
    std::mem::swap(&mut col.z, &mut col.z_prev);
    std::mem::swap(&mut col.v_fac, &mut col.v_fac_prev);

    // Factor update.
    for g in 0..g_len {
        let s_row = pilot.s.row(g);
        let a_row = pilot.s_abs2.row(g);
        let mut var = 0.0;
        let mut mean = Complex64::new(0.0, 0.0);
        for k in 0..users {
            var += a_row[k] * col.v[k];
            mean += s_row[k] * col.x_hat[k];
        }
        col.v_fac[g] = var;
        let onsager = var / (sigma + col.v_fac_prev[g]);
        col.z[g] = mean - (col.y[g] - col.z_prev[g]) * onsager;
    }

    // Residual, effective-noise weights, and the noise-variance update.
    let mut resid_sq = 0.0;
    let mut sigma_acc = 0.0;
    for g in 0..g_len {
        let r = col.y[g] - col.z[g];
        let r2 = r.norm_sqr();
        resid_sq += r2;
        let w = 1.0 / (sigma + col.v_fac[g]);
        col.w[g] = w;
        col.rw[g] = r * w;
        let t = 1.0 + col.v_fac[g] / sigma;
        sigma_acc += r2 / (t * t) + sigma * col.v_fac[g] * w;
    }
    let sigma_next = (sigma_acc / g_len as f64).max(SIGMA_FLOOR);

    // Variable update followed by denoising and the elementwise EM update of
    // the sparsity ratios.
    let mut delta_sq = 0.0;
    let mut prev_sq = 0.0;
    let mut pi_sum = 0.0;
    for k in 0..users {
        let a2_row = pilot.s_abs2_t.row(k);
        let sc_row = pilot.s_conj_t.row(k);
        let mut dsum = 0.0;
        let mut corr = Complex64::new(0.0, 0.0);
        for g in 0..g_len {
            dsum += a2_row[g] * col.w[g];
            corr += sc_row[g] * col.rw[g];
        }
        let d = (1.0 / dsum).max(D_FLOOR);
        let c = col.x_hat[k] + corr * d;
        col.d[k] = d;
        col.c[k] = c;

        let out = denoise_scalar(c, d, col.gamma[k], mu, tau, likelihood);
        let old = col.x_hat[k];
        let new = if damping > 0.0 {
            out.x_hat * (1.0 - damping) + old * damping
        } else {
            out.x_hat
        };
        delta_sq += (new - old).norm_sqr();
        prev_sq += old.norm_sqr();
        pi_sum += out.pi;
        col.x_hat[k] = new;
        col.v[k] = out.v;
        col.pi[k] = out.pi;
        col.gamma[k] = clamp_gamma(out.pi);
    }
    col.sigma = sigma_next;

    ColumnStats {
        delta_sq,
        prev_sq,
        resid_sq,
        pi_sum,
        sigma_next,
    }
}
