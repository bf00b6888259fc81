//! Error-function helpers for truncated Gaussians.
//!
//! Everything here is phrased through the scaled complementary error
//! function `erfcx(x) = exp(x²) erfc(x)` so that ratios such as
//! `exp(-η²) / (1 + erf η)` stay finite for large negative `η`.

use std::f64::consts::PI;

pub use libm::{erf, erfc};

/// Depth of the backward continued-fraction recursion for `erfcx` at x >= 4.
const CF_DEPTH: usize = 80;

/// `exp(x²) erfc(x)`.
pub fn erfcx(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        // erfc(-y) = 2 - erfc(y)
        return 2.0 * (x * x).exp() - erfcx(-x);
    }
    if x < 4.0 {
        return (x * x).exp() * erfc(x);
    }
    // erfc(x) = exp(-x²)/sqrt(π) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    let mut tail = x;
    for k in (1..=CF_DEPTH).rev() {
        tail = x + 0.5 * k as f64 / tail;
    }
    1.0 / (PI.sqrt() * tail)
}

/// `exp(-η²) / (1 + erf η)`.
pub fn truncation_ratio(eta: f64) -> f64 {
    1.0 / erfcx(-eta)
}

/// The slope factor from the uniqueness argument for the stationary mean:
///
/// `g(η) = 1 - (2/√π) R(η) [R(η)/√π + η]` with `R = exp(-η²)/(1 + erf η)`.
///
/// For a Gaussian truncated to `s >= 0` with peak `Φ0` and variance
/// parameter `σ`, `g(Φ0/√(2σ))` is exactly the ratio of its variance to `σ`.
pub fn g_eta(eta: f64) -> f64 {
    let r = truncation_ratio(eta);
    1.0 - 2.0 / PI.sqrt() * r * (r / PI.sqrt() + eta)
}

/// CDF of the half-normal law with variance parameter `sigma`.
pub fn half_normal_cdf(s: f64, sigma: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else {
        erf(s / (2.0 * sigma).sqrt())
    }
}
