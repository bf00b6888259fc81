//! Spatially homogeneous stationary states.
//!
//! With a given peak `Φ0` the stationary density is a Gaussian truncated to
//! `s >= 0`,
//!
//! ```text
//! f∞(s) = exp(-(s - Φ0)² / 2σ) / Z,   Z = sqrt(πσ/2) (1 + erf(Φ0 / sqrt(2σ)))
//! ```
//!
//! and the peak itself depends on the mean through `Φ0 = Φ(W0 <f∞> + B)`.
//! The mean is therefore the root of the scalar consistency residual
//! `G(m, σ) = Φ(W0 m + B) + σ exp(-Φ²/2σ) / Z - m`, which is strictly
//! decreasing whenever `Φ' > 1/W0` on the bracket.

use std::f64::consts::PI;

use crate::activation::Activation;
use crate::error::{GridError, Result};
use crate::special::{erfcx, g_eta, truncation_ratio};

/// Bisection stops once the bracket is this narrow.
const BISECTION_WIDTH: f64 = 1e-14;
const MAX_BISECTIONS: usize = 400;
/// Points used to check the slope bound over the bracket.
const SLOPE_SCAN: usize = 2001;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogeneousState {
    pub sigma: f64,
    /// Stationary firing rate `Φ0 = Φ(W0 m + B)`.
    pub phi0: f64,
    /// Stationary mean `m = <f∞>`.
    pub mean: f64,
    /// Mass normalisation.
    pub z: f64,
    /// Second centered moment of `f∞`.
    pub m_inf: f64,
    /// Interaction argument `W0 m + B` at the fixed point.
    pub argument: f64,
}

/// Moments of the truncated Gaussian with peak `phi0` and variance
/// parameter `sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedGaussian {
    pub phi0: f64,
    pub sigma: f64,
}

impl TruncatedGaussian {
    pub fn new(phi0: f64, sigma: f64) -> Self {
        TruncatedGaussian { phi0, sigma }
    }

    /// `η = Φ0 / sqrt(2σ)`.
    pub fn eta(&self) -> f64 {
        self.phi0 / (2.0 * self.sigma).sqrt()
    }

    pub fn z(&self) -> f64 {
        // 1 + erf(η) = erfc(-η) = exp(-η²) erfcx(-η)
        let eta = self.eta();
        (PI * self.sigma / 2.0).sqrt() * (-eta * eta).exp() * erfcx(-eta)
    }

    /// `<f∞> = Φ0 + sqrt(2σ/π) R(η)`.
    pub fn mean(&self) -> f64 {
        self.phi0 + (2.0 * self.sigma / PI).sqrt() * truncation_ratio(self.eta())
    }

    /// `∫ (s - <f∞>)² f∞ ds = σ g(η)`.
    pub fn variance(&self) -> f64 {
        self.sigma * g_eta(self.eta())
    }

    /// Density at `s >= 0`, evaluated without forming `Z` so that it stays
    /// finite when `Φ0` is far below zero.
    pub fn density(&self, s: f64) -> f64 {
        if s < 0.0 {
            return 0.0;
        }
        let sigma = self.sigma;
        let eta = self.eta();
        // exp(-(s-Φ0)²/2σ) / Z = exp(-s(s - 2Φ0)/2σ) / (sqrt(πσ/2) erfcx(-η))
        (-s * (s - 2.0 * self.phi0) / (2.0 * sigma)).exp()
            / ((PI * sigma / 2.0).sqrt() * erfcx(-eta))
    }

    /// Upper end of the numerically relevant support.
    pub fn support_end(&self) -> f64 {
        self.phi0.max(0.0) + 40.0 * self.sigma.sqrt()
    }
}

impl HomogeneousState {
    fn from_mean(mean: f64, sigma: f64, activation: &Activation, w0: f64, b: f64) -> Self {
        let argument = w0 * mean + b;
        let phi0 = activation.evaluate(argument);
        let tg = TruncatedGaussian::new(phi0, sigma);
        HomogeneousState {
            sigma,
            phi0,
            mean,
            z: tg.z(),
            m_inf: tg.variance(),
            argument,
        }
    }

    pub fn profile(&self) -> TruncatedGaussian {
        TruncatedGaussian::new(self.phi0, self.sigma)
    }

    pub fn density_at(&self, s: f64) -> f64 {
        self.profile().density(s)
    }

    /// Closed-form second centered moment `M∞ = σ g(Φ0/sqrt(2σ))`.
    pub fn m_infinity(&self) -> f64 {
        self.m_inf
    }

    /// `M∞` by adaptive quadrature, used as an independent check of the
    /// closed form.
    pub fn m_infinity_quadrature(&self) -> f64 {
        let tg = self.profile();
        let mean = self.mean;
        let end = tg.support_end();
        adaptive_simpson(&|s| (s - mean).powi(2) * tg.density(s), 0.0, end, 1e-15)
    }

    /// `Φ0' = Φ'(W0 m + B)`.
    pub fn slope(&self, activation: &Activation) -> f64 {
        activation.derivative(self.argument)
    }
}

/// `G(m, σ)`; positive below the stationary mean and negative above it.
pub fn consistency_residual(m: f64, sigma: f64, activation: &Activation, w0: f64, b: f64) -> f64 {
    let phi = activation.evaluate(w0 * m + b);
    TruncatedGaussian::new(phi, sigma).mean() - m
}

/// `∂G/∂m = -1 + Φ'(W0 m + B) W0 g(Φ/sqrt(2σ))`.
pub fn consistency_slope(m: f64, sigma: f64, activation: &Activation, w0: f64, b: f64) -> f64 {
    let arg = w0 * m + b;
    let eta = activation.evaluate(arg) / (2.0 * sigma).sqrt();
    -1.0 + activation.derivative(arg) * w0 * g_eta(eta)
}

/// Upper end of the root bracket: `max(Φ(B), 0) + sqrt(2σ/π)`.
///
/// The noise contribution to the mean, `sqrt(2σ/π) R(η)`, is largest at
/// `Φ0 = 0` among nonnegative rates, where it equals `sqrt(2σ/π)`.
pub fn bracket_upper(sigma: f64, activation: &Activation, b: f64) -> f64 {
    activation.evaluate(b).max(0.0) + (2.0 * sigma / PI).sqrt()
}

/// Solves the consistency relation for the stationary mean.
pub fn solve_stationary(
    activation: &Activation,
    w0: f64,
    b: f64,
    sigma: f64,
    tol: f64,
) -> Result<HomogeneousState> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(GridError::param("sigma", format!("must be positive, got {sigma}")));
    }
    if !(w0 <= 0.0) {
        return Err(GridError::param("W0", format!("must be <= 0, got {w0}")));
    }
    let residual = |m: f64| consistency_residual(m, sigma, activation, w0, b);

    let mut hi = bracket_upper(sigma, activation, b);
    // Activations that dip below zero can leave G(hi) marginally positive;
    // widen a few times before giving up.
    let mut widen = 0;
    while residual(hi) >= 0.0 {
        widen += 1;
        if widen > 20 {
            return Err(GridError::Bracket(format!(
                "G stays nonnegative up to m = {hi} (sigma = {sigma})"
            )));
        }
        hi = 2.0 * hi + sigma.sqrt();
    }
    let mut lo = 0.0;
    let g_lo = residual(lo);
    if g_lo <= 0.0 {
        if g_lo == 0.0 {
            return Ok(HomogeneousState::from_mean(0.0, sigma, activation, w0, b));
        }
        return Err(GridError::Bracket(format!("G(0) = {g_lo} is not positive")));
    }

    if w0 < 0.0 {
        let min_slope = activation.min_slope(w0 * hi + b, b);
        let scan = (0..SLOPE_SCAN)
            .map(|i| activation.derivative(w0 * hi * i as f64 / (SLOPE_SCAN - 1) as f64 + b))
            .fold(min_slope, f64::min);
        if scan <= 1.0 / w0 {
            return Err(GridError::SlopeBound {
                min_slope: scan,
                bound: 1.0 / w0,
            });
        }
    }

    let mut iterations = 0;
    while hi - lo > BISECTION_WIDTH * hi.max(1.0) {
        iterations += 1;
        if iterations > MAX_BISECTIONS {
            return Err(GridError::Stalled(format!(
                "bisection on [{lo}, {hi}] did not shrink below {BISECTION_WIDTH}"
            )));
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if residual(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut mean = 0.5 * (lo + hi);
    // One Newton polish, kept only if it improves the residual.
    let slope = consistency_slope(mean, sigma, activation, w0, b);
    if slope < 0.0 {
        let polished = mean - residual(mean) / slope;
        if polished >= 0.0 && residual(polished).abs() < residual(mean).abs() {
            mean = polished;
        }
    }
    let g = residual(mean);
    if g.abs() > tol {
        return Err(GridError::Stalled(format!(
            "|G| = {:e} above tolerance {tol:e} at m = {mean}",
            g.abs()
        )));
    }
    Ok(HomogeneousState::from_mean(mean, sigma, activation, w0, b))
}

/// Noise-free fixed point `m = Φ(W0 m + B)`.
pub fn zero_noise_mean(activation: &Activation, w0: f64, b: f64) -> Result<f64> {
    if !(w0 <= 0.0) {
        return Err(GridError::param("W0", format!("must be <= 0, got {w0}")));
    }
    let h = |m: f64| activation.evaluate(w0 * m + b) - m;
    let mut lo = 0.0;
    let mut hi = activation.evaluate(b).max(0.0);
    if h(lo) <= 0.0 {
        return Ok(0.0);
    }
    while h(hi) > 0.0 {
        hi = 2.0 * hi + 1.0;
        if hi > 1e12 {
            return Err(GridError::Bracket("zero-noise fixed point unbounded".into()));
        }
    }
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if h(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Stationary state of the homogeneous problem on a cell-centred `s`-grid.
///
/// The finite-volume scheme balances fluxes exactly for point values of the
/// truncated Gaussian at cell centres, so its fixed point is the discrete
/// analogue of [`solve_stationary`]: the same Gaussian shape, normalised and
/// averaged by the midpoint rule on `[0, s_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStationary {
    pub sigma: f64,
    pub phi0: f64,
    pub mean: f64,
    pub ds: f64,
    /// Cell values with `Σ density · ds = 1`.
    pub density: Vec<f64>,
}

/// Normalised cell values of `exp(-(s_j - phi0)²/2σ)` on `n_s` cells.
pub fn discrete_gaussian(phi0: f64, sigma: f64, n_s: usize, s_max: f64) -> Vec<f64> {
    let ds = s_max / n_s as f64;
    let exponent = |j: usize| {
        let s = (j as f64 + 0.5) * ds;
        -(s - phi0).powi(2) / (2.0 * sigma)
    };
    let peak = (0..n_s).map(exponent).fold(f64::NEG_INFINITY, f64::max);
    let mut f: Vec<f64> = (0..n_s).map(|j| (exponent(j) - peak).exp()).collect();
    let mass: f64 = f.iter().sum::<f64>() * ds;
    for v in f.iter_mut() {
        *v /= mass;
    }
    f
}

pub fn discrete_mean(density: &[f64], ds: f64) -> f64 {
    density
        .iter()
        .enumerate()
        .map(|(j, f)| (j as f64 + 0.5) * ds * f)
        .sum::<f64>()
        * ds
}

pub fn solve_discrete(
    activation: &Activation,
    w0: f64,
    b: f64,
    sigma: f64,
    n_s: usize,
    s_max: f64,
) -> Result<DiscreteStationary> {
    if !(sigma > 0.0) {
        return Err(GridError::param("sigma", "must be positive"));
    }
    if n_s == 0 || !(s_max > 0.0) {
        return Err(GridError::param("grid.n_s", "need at least one cell on a positive interval"));
    }
    let ds = s_max / n_s as f64;
    let residual = |m: f64| {
        let phi = activation.evaluate(w0 * m + b);
        discrete_mean(&discrete_gaussian(phi, sigma, n_s, s_max), ds) - m
    };
    let (mut lo, mut hi) = (0.0, s_max);
    if residual(lo) <= 0.0 || residual(hi) >= 0.0 {
        return Err(GridError::Bracket("discrete consistency has no root in [0, s_max]".into()));
    }
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if residual(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mean = 0.5 * (lo + hi);
    let phi0 = activation.evaluate(w0 * mean + b);
    let density = discrete_gaussian(phi0, sigma, n_s, s_max);
    Ok(DiscreteStationary {
        sigma,
        phi0,
        mean: discrete_mean(&density, ds),
        ds,
        density,
    })
}

pub(crate) fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    // Start from a fixed partition so narrow peaks are not skipped.
    let panels = 64;
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let (x0, x1) = (a + i as f64 * h, a + (i + 1) as f64 * h);
            let (f0, fm, f1) = (f(x0), f(0.5 * (x0 + x1)), f(x1));
            let whole = h / 6.0 * (f0 + 4.0 * fm + f1);
            step(f, x0, x1, f0, fm, f1, whole, tol / panels as f64, 40)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    const W0: f64 = -20.6711;

    #[test]
    fn density_peaks_at_phi0() {
        let s = solve_stationary(&Activation::relu(), W0, 3.0, 0.03, 1e-12).unwrap();
        assert_relative_eq!(s.density_at(s.phi0), 1.0 / s.z, max_relative = 1e-14);
    }

    #[test]
    fn half_normal_density_at_origin() {
        // Φ0 = 0 and erf(0) = 0 give Z = sqrt(πσ/2), so f∞(0) = 2/sqrt(2πσ).
        let tg = TruncatedGaussian::new(0.0, 0.5);
        assert_relative_eq!(tg.density(0.0), 2.0 / (2.0 * PI * 0.5).sqrt(), max_relative = 1e-14);
        assert_relative_eq!(tg.z(), (PI * 0.5 / 2.0).sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn density_integrates_to_one() {
        for (phi0, sigma) in [(0.138, 0.03), (0.0, 0.5), (0.6, 0.001), (-0.05, 0.02)] {
            let tg = TruncatedGaussian::new(phi0, sigma);
            let end = phi0.max(0.0) + 12.0 * sigma.sqrt();
            let mass = adaptive_simpson(&|s| tg.density(s), 0.0, end, 1e-14);
            assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn residual_signs_at_the_bracket_ends() {
        for act in [
            Activation::relu(),
            Activation::smooth_eps(0.01).unwrap(),
            Activation::sigmoid(15.0).unwrap(),
        ] {
            for sigma in [1e-4, 0.01, 0.03, 0.1] {
                assert!(consistency_residual(0.0, sigma, &act, W0, 3.0) > 0.0);
                let m = act.evaluate(3.0) + (sigma / (2.0 * PI)).sqrt() + 0.1;
                assert!(consistency_residual(m, sigma, &act, W0, 3.0) < 0.0);
            }
        }
    }

    #[test]
    fn zero_rate_root_is_the_half_normal_mean() {
        let act = Activation::constant(0.0).unwrap();
        let s = solve_stationary(&act, W0, 3.0, 0.5, 1e-13).unwrap();
        assert_relative_eq!(s.mean, (1.0 / PI).sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn constant_rate_gives_closed_form_mean() {
        let c = 0.4;
        let sigma = 0.02;
        let act = Activation::constant(c).unwrap();
        let s = solve_stationary(&act, W0, 3.0, sigma, 1e-13).unwrap();
        let z = (PI * sigma / 2.0).sqrt() * (1.0 + crate::special::erf(c / (2.0 * sigma).sqrt()));
        let want = c + sigma * (-c * c / (2.0 * sigma)).exp() / z;
        assert_relative_eq!(s.mean, want, max_relative = 1e-12);
    }

    #[test]
    fn vanishing_noise_recovers_the_relu_fixed_point() {
        let s = solve_stationary(&Activation::relu(), W0, 3.0, 1e-8, 1e-13).unwrap();
        assert_relative_eq!(s.mean, 3.0 / (1.0 - W0), max_relative = 1e-9);
        assert_relative_eq!(s.mean, 0.138_433, max_relative = 1e-5);
        let m0 = zero_noise_mean(&Activation::relu(), W0, 3.0).unwrap();
        assert_relative_eq!(m0, 3.0 / (1.0 - W0), max_relative = 1e-12);
    }

    #[test]
    fn half_normal_variance() {
        let tg = TruncatedGaussian::new(0.0, 0.3);
        assert_relative_eq!(tg.variance(), 0.3 * (1.0 - 2.0 / PI), max_relative = 1e-14);
        let mean = tg.mean();
        let quad = adaptive_simpson(&|s| (s - mean).powi(2) * tg.density(s), 0.0, 20.0, 1e-15);
        assert_relative_eq!(quad, 0.3 * (1.0 - 2.0 / PI), max_relative = 1e-9);
    }

    #[test]
    fn m_infinity_closed_form_matches_quadrature() {
        for act in [Activation::relu(), Activation::smooth_eps(0.01).unwrap(), Activation::sigmoid(15.0).unwrap()] {
            for sigma in [1e-4, 0.005, 0.03, 0.1] {
                let s = solve_stationary(&act, W0, 3.0, sigma, 1e-12).unwrap();
                assert!(s.m_inf > 0.0);
                assert_relative_eq!(s.m_infinity(), s.m_infinity_quadrature(), max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn small_noise_variance_ratio() {
        let s = solve_stationary(&Activation::relu(), W0, 3.0, 1e-4, 1e-13).unwrap();
        assert!(s.phi0 > 0.13);
        let ratio = s.m_inf / 1e-4;
        assert!((0.95..=1.0).contains(&ratio), "M∞/σ = {ratio}");
    }

    #[test]
    fn residual_changes_sign_once() {
        for act in [Activation::relu(), Activation::smooth_eps(0.01).unwrap(), Activation::sigmoid(15.0).unwrap()] {
            for i in 0..=20 {
                let sigma = 1e-4 + (0.1 - 1e-4) * i as f64 / 20.0;
                let hi = bracket_upper(sigma, &act, 3.0);
                let mut changes = 0;
                let mut prev = consistency_residual(0.0, sigma, &act, W0, 3.0);
                for j in 1..=10_000 {
                    let g = consistency_residual(hi * j as f64 / 1e4, sigma, &act, W0, 3.0);
                    if (g > 0.0) != (prev > 0.0) {
                        changes += 1;
                    }
                    prev = g;
                }
                assert_eq!(changes, 1, "{} sigma={sigma}", act.name());
            }
        }
    }

    #[test]
    fn residual_decreases_through_the_root() {
        for act in [Activation::relu(), Activation::smooth_sqrt(0.01).unwrap(), Activation::sigmoid(15.0).unwrap()] {
            let s = solve_stationary(&act, W0, 3.0, 0.02, 1e-12).unwrap();
            let h = 1e-7;
            let fd = (consistency_residual(s.mean + h, 0.02, &act, W0, 3.0)
                - consistency_residual(s.mean - h, 0.02, &act, W0, 3.0))
                / (2.0 * h);
            assert!(fd < 0.0);
            assert_relative_eq!(fd, consistency_slope(s.mean, 0.02, &act, W0, 3.0), max_relative = 1e-5);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(solve_stationary(&Activation::relu(), W0, 3.0, 0.0, 1e-12).is_err());
        assert!(solve_stationary(&Activation::relu(), 1.0, 3.0, 0.01, 1e-12).is_err());
    }

    #[test]
    fn slope_bound_violation_is_reported() {
        // smooth_eps dips to Φ' ≈ -0.045 near x = -0.15, below 1/W0 once
        // |W0| > 22, and B = 0 puts the dip inside the scanned range.
        let act = Activation::smooth_eps(0.01).unwrap();
        let strong = solve_stationary(&act, -40.0, 0.0, 0.01, 1e-12);
        assert!(matches!(strong, Err(GridError::SlopeBound { .. })), "{strong:?}");
        assert!(solve_stationary(&act, W0, 0.0, 0.01, 1e-12).is_ok());
    }

    #[test]
    fn discrete_state_converges_to_the_continuous_one() {
        let act = Activation::smooth_eps(0.01).unwrap();
        let cont = solve_stationary(&act, W0, 3.0, 0.03, 1e-13).unwrap();
        let mut prev = f64::INFINITY;
        for n_s in [64, 128, 256, 512] {
            let d = solve_discrete(&act, W0, 3.0, 0.03, n_s, 3.0).unwrap();
            let gap = (d.mean - cont.mean).abs();
            assert!(gap < prev);
            prev = gap;
        }
        assert!(prev < 1e-5, "gap {prev}");
    }
}
