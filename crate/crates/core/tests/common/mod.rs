//! Shared test oracles and statistics helpers.
//!
//! Everything here evaluates the model definitions directly (numerical
//! quadrature of the scalar posterior, straight-line compensated-sum
//! evaluation of the message-passing recursion) and stays independent of the
//! library's solver path.

#![allow(dead_code)]

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn complex_gaussian(rng: &mut ChaCha8Rng, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

pub fn random_complex_matrix(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    variance: f64,
) -> Array2<Complex64> {
    Array2::from_shape_fn((rows, cols), |_| complex_gaussian(rng, variance))
}

pub fn rel_err(actual: f64, expected: f64) -> f64 {
    (actual - expected).abs() / expected.abs().max(1e-300)
}

pub fn rel_err_c(actual: Complex64, expected: Complex64) -> f64 {
    (actual - expected).norm() / expected.norm().max(1e-300)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Quadrature oracle for the scalar spike-and-slab posterior
// ---------------------------------------------------------------------------

/// Posterior mean and variance of `x` given the pseudo-measurement `c` with
/// noise variance `d` under the prior
/// `(1 - gamma) * delta(x) + gamma * CN(x; mu, tau)`, computed by numerical
/// integration of the posterior's slab component.
///
/// The two Gaussian factors separate over the real and imaginary axes, so
/// the 2-D moments reduce to products of 1-D integrals, evaluated with
/// composite Simpson on a grid that resolves the narrower factor.
pub fn posterior_by_quadrature(
    c: Complex64,
    d: f64,
    gamma: f64,
    mu: Complex64,
    tau: f64,
) -> (Complex64, f64, f64) {
    let spike_weight = (1.0 - gamma) * (-c.norm_sqr() / d).exp() / (std::f64::consts::PI * d);
    let slab_const = gamma / (std::f64::consts::PI * std::f64::consts::PI * tau * d);
    let (x0, x1, x2) = axis_moments(c.re, mu.re, d, tau);
    let (y0, y1, y2) = axis_moments(c.im, mu.im, d, tau);
    let m0 = slab_const * x0 * y0;
    let m1 = Complex64::new(slab_const * x1 * y0, slab_const * x0 * y1);
    let m2 = slab_const * (x2 * y0 + x0 * y2);
    let norm = spike_weight + m0;
    let mean = m1 / norm;
    let second = m2 / norm;
    let variance = second - mean.norm_sqr();
    let pi = m0 / norm;
    (mean, variance, pi)
}

/// Simpson moments `(S0, S1, S2)` of `u^k exp(-(u-mu)^2/tau - (cv-u)^2/d)`.
fn axis_moments(cv: f64, mu: f64, d: f64, tau: f64) -> (f64, f64, f64) {
    let narrow = d.min(tau).sqrt();
    let lo = cv.min(mu) - 10.0 * narrow;
    let hi = cv.max(mu) + 10.0 * narrow;
    let n = (((hi - lo) / (narrow / 60.0)).ceil() as usize).max(64);
    let n = if n % 2 == 0 { n } else { n + 1 };
    let h = (hi - lo) / n as f64;
    let f = |u: f64| (-(u - mu) * (u - mu) / tau - (cv - u) * (cv - u) / d).exp();
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for i in 0..=n {
        let u = lo + i as f64 * h;
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let fu = w * f(u);
        s0 += fu;
        s1 += fu * u;
        s2 += fu * u * u;
    }
    let scale = h / 3.0;
    (s0 * scale, s1 * scale, s2 * scale)
}

// ---------------------------------------------------------------------------
// Straight-line oracle for the message-passing recursion
// ---------------------------------------------------------------------------

/// Neumaier compensated accumulator.
#[derive(Clone, Copy, Default)]
pub struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn csum(values: impl Iterator<Item = Complex64>) -> Complex64 {
    let mut re = Neumaier::default();
    let mut im = Neumaier::default();
    for v in values {
        re.add(v.re);
        im.add(v.im);
    }
    Complex64::new(re.value(), im.value())
}

fn rsum(values: impl Iterator<Item = f64>) -> f64 {
    let mut acc = Neumaier::default();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

const GAMMA_FLOOR: f64 = 1e-8;
const SIGMA_FLOOR: f64 = 1e-12;
const D_FLOOR: f64 = 1e-15;

/// Complete per-iteration state of the straight-line evaluation.
#[derive(Clone)]
pub struct OracleState {
    pub v_fac: Array2<f64>,
    pub z: Array2<Complex64>,
    pub d: Array2<f64>,
    pub c: Array2<Complex64>,
    pub x_hat: Array2<Complex64>,
    pub v: Array2<f64>,
    pub pi: Array2<f64>,
    pub gamma: Array2<f64>,
    pub sigma: Vec<f64>,
}

/// Literal evaluation of the factor update, variable update, denoiser, and
/// the two EM updates, with compensated sums, iterated `iters` times from
/// the standard initialization. The elementwise EM rule updates the sparsity
/// ratios (no cross-column refinement).
pub fn straight_line_amp(
    y: &Array2<Complex64>,
    s: &Array2<Complex64>,
    gamma0: f64,
    sigma0: f64,
    mu: Complex64,
    tau: f64,
    iters: usize,
) -> OracleState {
    let (g_len, users) = s.dim();
    let m_len = y.ncols();
    let mut st = OracleState {
        v_fac: Array2::from_elem((g_len, m_len), 1.0),
        z: y.clone(),
        d: Array2::zeros((users, m_len)),
        c: Array2::from_elem((users, m_len), Complex64::new(0.0, 0.0)),
        x_hat: Array2::from_elem((users, m_len), Complex64::new(0.0, 0.0)),
        v: Array2::from_elem((users, m_len), tau),
        pi: Array2::zeros((users, m_len)),
        gamma: Array2::from_elem((users, m_len), gamma0),
        sigma: vec![sigma0.max(SIGMA_FLOOR); m_len],
    };
    for _ in 0..iters {
        let v_fac_prev = st.v_fac.clone();
        let z_prev = st.z.clone();
        // Factor nodes.
        for m in 0..m_len {
            let sigma = st.sigma[m];
            for g in 0..g_len {
                let var = rsum((0..users).map(|k| s[[g, k]].norm_sqr() * st.v[[k, m]]));
                let mean = csum((0..users).map(|k| s[[g, k]] * st.x_hat[[k, m]]));
                st.v_fac[[g, m]] = var;
                st.z[[g, m]] =
                    mean - (y[[g, m]] - z_prev[[g, m]]) * (var / (sigma + v_fac_prev[[g, m]]));
            }
        }
        // Variable nodes.
        for m in 0..m_len {
            let sigma = st.sigma[m];
            for k in 0..users {
                let dsum = rsum(
                    (0..g_len).map(|g| s[[g, k]].norm_sqr() / (sigma + st.v_fac[[g, m]])),
                );
                let d = (1.0 / dsum).max(D_FLOOR);
                let corr = csum((0..g_len).map(|g| {
                    s[[g, k]].conj() * (y[[g, m]] - st.z[[g, m]]) / (sigma + st.v_fac[[g, m]])
                }));
                st.d[[k, m]] = d;
                st.c[[k, m]] = st.x_hat[[k, m]] + corr * d;
            }
        }
        // Denoiser and the elementwise EM update of the sparsity ratios.
        for m in 0..m_len {
            for k in 0..users {
                let (d, c) = (st.d[[k, m]], st.c[[k, m]]);
                let a = (c * tau + mu * d) / (d + tau);
                let b = tau * d / (tau + d);
                let l = (d / (d + tau)).ln() + c.norm_sqr() / d
                    - (c - mu).norm_sqr() / (d + tau);
                let gamma = st.gamma[[k, m]];
                let pi = gamma / (gamma + (1.0 - gamma) * (-l).exp());
                let x = a * pi;
                let v = pi * (a.norm_sqr() + b) - x.norm_sqr();
                st.x_hat[[k, m]] = x;
                st.v[[k, m]] = v;
                st.pi[[k, m]] = pi;
                st.gamma[[k, m]] = pi.clamp(GAMMA_FLOOR, 1.0 - GAMMA_FLOOR);
            }
        }
        // Noise-variance EM update.
        for m in 0..m_len {
            let sigma = st.sigma[m];
            let acc = rsum((0..g_len).map(|g| {
                let r2 = (y[[g, m]] - st.z[[g, m]]).norm_sqr();
                let t = 1.0 + st.v_fac[[g, m]] / sigma;
                r2 / (t * t) + sigma * st.v_fac[[g, m]] / (sigma + st.v_fac[[g, m]])
            }));
            st.sigma[m] = (acc / g_len as f64).max(SIGMA_FLOOR);
        }
    }
    st
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

/// One-sided paired t statistic for `mean(a - b) > 0`.
pub fn paired_t_statistic(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    assert!(n >= 2);
    let diffs: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return if mean > 0.0 { f64::INFINITY } else { 0.0 };
    }
    mean / (var / n as f64).sqrt()
}

/// Conservative one-sided 5% critical value for n >= 100 paired samples.
pub const T_CRITICAL_5PCT: f64 = 1.66;
