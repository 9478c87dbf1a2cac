//! Scalar spike-and-slab MMSE denoiser.
//!
//! Given a pseudo-measurement `c` with effective noise variance `d`, the
//! posterior under the prior `(1 - gamma) * delta(x) + gamma * CN(x; mu, tau)`
//! is a spike at zero plus a Gaussian with mean `a` and variance `b`. The
//! belief indicator `pi` is the posterior slab weight; it is evaluated in the
//! log domain so the computation stays stable for log-likelihood ratios far
//! beyond 1e4.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Which normalization the log-likelihood ratio uses.
///
/// `Complex` is consistent with the circularly-symmetric complex Gaussian
/// model. `RealHalf` keeps the real-Gaussian constants (a factor 1/2 on the
/// log term and halved quadratic terms) and is retained for fidelity audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodForm {
    #[default]
    Complex,
    RealHalf,
}

/// Output of the scalar denoiser.
#[derive(Debug, Clone, Copy)]
pub struct DenoisedValue {
    /// Posterior mean.
    pub x_hat: Complex64,
    /// Posterior variance (always non-negative).
    pub v: f64,
    /// Belief indicator: posterior probability the coefficient is non-zero.
    pub pi: f64,
    /// Slab-component posterior mean.
    pub a: Complex64,
    /// Slab-component posterior variance.
    pub b: f64,
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Log-likelihood ratio of slab vs spike for pseudo-measurement `(c, d)`.
pub fn log_likelihood_ratio(
    c: Complex64,
    d: f64,
    mu: Complex64,
    tau: f64,
    form: LikelihoodForm,
) -> f64 {
    let dt = d + tau;
    match form {
        LikelihoodForm::Complex => (d / dt).ln() + c.norm_sqr() / d - (c - mu).norm_sqr() / dt,
        LikelihoodForm::RealHalf => {
            0.5 * (d / dt).ln() + c.norm_sqr() / (2.0 * d) - (c - mu).norm_sqr() / (2.0 * dt)
        }
    }
}

/// Denoise one coefficient.
///
/// `d` must be positive and `tau` positive; `gamma` may take the closed
/// interval `[0, 1]` (the boundary values give the pure spike / pure slab
/// posterior).
pub fn denoise_scalar(
    c: Complex64,
    d: f64,
    gamma: f64,
    mu: Complex64,
    tau: f64,
    form: LikelihoodForm,
) -> DenoisedValue {
    let dt = d + tau;
    let a = (c * tau + mu * d) / dt;
    let b = tau * d / dt;
    let l = log_likelihood_ratio(c, d, mu, tau, form);
    // pi = gamma / (gamma + (1 - gamma) exp(-L)) = sigmoid(L + logit(gamma))
    let u = l + gamma.ln() - (1.0 - gamma).ln();
    let pi = sigmoid(u);
    let x_hat = a * pi;
    // Algebraically pi (|a|^2 + b) - |x_hat|^2, factored so v >= 0 holds
    // elementwise in floating point.
    let v = pi * (1.0 - pi) * a.norm_sqr() + pi * b;
    DenoisedValue { x_hat, v, pi, a, b }
}
