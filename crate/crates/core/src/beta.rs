//! Beta distribution pieces used by the scheduler: log-density, its partial
//! derivatives, and seeded sampling through two Marsaglia–Tsang gamma draws.

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

/// Samples are kept this far inside the open unit interval so the
/// log-density stays finite.
pub const EDGE: f64 = 1e-12;

pub fn ln_beta_fn(alpha: f64, beta: f64) -> f64 {
    ln_gamma(alpha) + ln_gamma(beta) - ln_gamma(alpha + beta)
}

/// `ln BetaPDF(q; α, β)`.
pub fn log_prob(alpha: f64, beta: f64, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("quantile {q} outside the open interval (0, 1)")));
    }
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(Error::Domain(format!("Beta parameters ({alpha}, {beta}) must be positive")));
    }
    // Exact zero for the uniform case regardless of rounding in ln B(1, 1).
    if alpha == 1.0 && beta == 1.0 {
        return Ok(0.0);
    }
    Ok((alpha - 1.0) * q.ln() + (beta - 1.0) * (-q).ln_1p() - ln_beta_fn(alpha, beta))
}

/// `(∂/∂α, ∂/∂β) ln BetaPDF(q; α, β)`.
pub fn log_prob_grad(alpha: f64, beta: f64, q: f64) -> (f64, f64) {
    let common = digamma(alpha + beta);
    (
        q.ln() - digamma(alpha) + common,
        (-q).ln_1p() - digamma(beta) + common,
    )
}

pub fn mean(alpha: f64, beta: f64) -> f64 {
    alpha / (alpha + beta)
}

/// `ln X` for `X ~ Gamma(shape, 1)`.
///
/// Marsaglia–Tsang for shape ≥ 1; shapes below one are boosted with
/// `X = Y · U^{1/shape}`, `Y ~ Gamma(shape + 1)`, kept in log space so tiny
/// shapes do not underflow.
pub fn sample_ln_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape < 1.0 {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        return sample_ln_gamma(shape + 1.0, rng) + u.ln() / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.gen();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d.ln() + v.ln();
        }
    }
}

/// Draws `q ~ Beta(α, β)` as `X / (X + Y)` with independent gamma draws,
/// clamped to `[EDGE, 1 − EDGE]`.
pub fn sample<R: Rng + ?Sized>(alpha: f64, beta: f64, rng: &mut R) -> f64 {
    let lx = sample_ln_gamma(alpha, rng);
    let ly = sample_ln_gamma(beta, rng);
    // q = 1 / (1 + exp(ly − lx))
    let q = crate::linalg::sigmoid(lx - ly);
    q.clamp(EDGE, 1.0 - EDGE)
}
