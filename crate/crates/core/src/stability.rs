//! Linear stability of the homogeneous state.
//!
//! A lattice mode `k = 2π(k1, k2)` amplifies by
//! `F(k) = ¼ Φ0' Ŵ(k) Σ_β exp(-i k·r^β)`. Without noise the homogeneous
//! state is stable iff `F < 1` for every mode; with noise the threshold
//! becomes `F < σ / M∞(σ)`.

use std::f64::consts::PI;

use crate::activation::Activation;
use crate::connectivity::{Convolver, Kernel, ShiftSet};
use crate::error::{GridError, Result};
use crate::homogeneous::{solve_stationary, zero_noise_mean, HomogeneousState};

/// Relative tolerance for ties among dominant modes.
pub const TIE_TOLERANCE: f64 = 1e-6;
/// Scan resolution of [`critical_sigma`] before bisection.
pub const SIGMA_SCAN_POINTS: usize = 200;
/// Residual tolerance for the homogeneous solves inside the σ scan.
const STATIONARY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispersionEntry {
    pub k1: i64,
    pub k2: i64,
    pub w_hat: f64,
    pub shift: f64,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispersionTable {
    pub entries: Vec<DispersionEntry>,
    /// NaN when the table was not built from a noisy stationary state.
    pub sigma: f64,
    pub phi0_prime: f64,
    pub k_max: usize,
}

impl DispersionTable {
    /// `F` for all `|k1|, |k2| <= k_max` at a given slope `Φ0'`.
    pub fn with_slope(kernel: &Kernel, shifts: &ShiftSet, phi0_prime: f64, k_max: usize) -> Result<Self> {
        let spectrum = kernel.spectral_table(k_max)?;
        let entries = spectrum
            .iter()
            .map(|(k1, k2, w_hat)| {
                let shift = shifts.factor(k1 as f64, k2 as f64);
                DispersionEntry {
                    k1,
                    k2,
                    w_hat,
                    shift,
                    f: 0.25 * phi0_prime * w_hat * shift,
                }
            })
            .collect();
        Ok(DispersionTable {
            entries,
            sigma: f64::NAN,
            phi0_prime,
            k_max,
        })
    }

    /// Build from raw entries, e.g. for synthetic tables.
    pub fn from_entries(entries: Vec<DispersionEntry>, phi0_prime: f64) -> Self {
        let k_max = entries
            .iter()
            .map(|e| e.k1.unsigned_abs().max(e.k2.unsigned_abs()) as usize)
            .max()
            .unwrap_or(0);
        DispersionTable {
            entries,
            sigma: f64::NAN,
            phi0_prime,
            k_max,
        }
    }

    pub fn get(&self, k1: i64, k2: i64) -> Option<&DispersionEntry> {
        self.entries.iter().find(|e| e.k1 == k1 && e.k2 == k2)
    }

    /// Entry with the largest `F` (first in table order on exact ties).
    pub fn max_entry(&self) -> Option<&DispersionEntry> {
        self.entries
            .iter()
            .fold(None, |best: Option<&DispersionEntry>, e| match best {
                Some(b) if b.f >= e.f => Some(b),
                _ => Some(e),
            })
    }

    pub fn max_f(&self) -> f64 {
        self.max_entry().map_or(f64::NEG_INFINITY, |e| e.f)
    }

    /// All modes with `k1, k2 >= 0` whose `F` is within [`TIE_TOLERANCE`] of
    /// the maximum over that quadrant, ordered by `(k1, k2)`.
    pub fn dominant_modes(&self) -> Vec<(i64, i64)> {
        let quadrant = || self.entries.iter().filter(|e| e.k1 >= 0 && e.k2 >= 0);
        let max = quadrant().map(|e| e.f).fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Vec::new();
        }
        let cut = max - TIE_TOLERANCE * max.abs();
        let mut modes: Vec<_> = quadrant().filter(|e| e.f >= cut).map(|e| (e.k1, e.k2)).collect();
        modes.sort_unstable();
        modes
    }

    /// Copy with every `F` multiplied by `c`, as if `Φ0'` were scaled.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.phi0_prime *= c;
        for e in &mut out.entries {
            e.f *= c;
        }
        out
    }

    pub fn to_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "k1,k2,What,shift,F")?;
        for e in &self.entries {
            writeln!(w, "{},{},{:e},{:e},{:e}", e.k1, e.k2, e.w_hat, e.shift, e.f)?;
        }
        Ok(())
    }
}

/// `F` at the noisy stationary state `hom`.
pub fn dispersion(
    kernel: &Kernel,
    shifts: &ShiftSet,
    hom: &HomogeneousState,
    activation: &Activation,
    k_max: usize,
) -> Result<DispersionTable> {
    let mut table = DispersionTable::with_slope(kernel, shifts, hom.slope(activation), k_max)?;
    table.sigma = hom.sigma;
    Ok(table)
}

/// `F` at the noise-free fixed point `s∞ = Φ(W0 s∞ + B)`.
pub fn zero_noise_dispersion(
    kernel: &Kernel,
    shifts: &ShiftSet,
    activation: &Activation,
    b: f64,
    k_max: usize,
) -> Result<DispersionTable> {
    let s_inf = zero_noise_mean(activation, kernel.w0(), b)?;
    let slope = activation.derivative(kernel.w0() * s_inf + b);
    let mut table = DispersionTable::with_slope(kernel, shifts, slope, k_max)?;
    table.sigma = 0.0;
    Ok(table)
}

/// Whether every mode satisfies `F < 1`, and the worst mode.
pub fn zero_noise_stable(table: &DispersionTable) -> (bool, Option<DispersionEntry>) {
    match table.max_entry() {
        Some(e) => (e.f < 1.0, Some(*e)),
        None => (true, None),
    }
}

/// Growth rate `(F - 1)/τ` of a mode of the linearised mean equation.
pub fn linearized_growth_rate(f: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(GridError::param("solver.tau", "must be positive"));
    }
    Ok((f - 1.0) / tau)
}

/// `max_k F(k; σ) · M∞(σ)/σ - 1`; positive where the homogeneous state is
/// linearly unstable.
///
/// Only the largest `F` matters, and `F` depends on `σ` through the scalar
/// `Φ0'`, so the maximising mode can be taken from any fixed positive slope.
pub fn stability_indicator(
    kernel: &Kernel,
    shifts: &ShiftSet,
    activation: &Activation,
    b: f64,
    sigma: f64,
    k_max: usize,
) -> Result<f64> {
    let unit = DispersionTable::with_slope(kernel, shifts, 1.0, k_max)?;
    indicator_with(&unit, activation, kernel.w0(), b, sigma)
}

fn indicator_with(unit: &DispersionTable, activation: &Activation, w0: f64, b: f64, sigma: f64) -> Result<f64> {
    let hom = solve_stationary(activation, w0, b, sigma, STATIONARY_TOL)?;
    let slope = hom.slope(activation);
    // F = slope · unit F, and the max flips to the min when slope < 0.
    let fmax = unit
        .entries
        .iter()
        .map(|e| slope * e.f)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(fmax * hom.m_inf / sigma - 1.0)
}

/// Noise strength at which the homogeneous state changes linear stability.
///
/// The indicator is scanned on [`SIGMA_SCAN_POINTS`] evenly spaced points of
/// `[lo, hi]`; exactly one sign change is then refined by bisection to
/// width `tol`.
pub fn critical_sigma(
    kernel: &Kernel,
    shifts: &ShiftSet,
    activation: &Activation,
    b: f64,
    lo: f64,
    hi: f64,
    tol: f64,
    k_max: usize,
) -> Result<f64> {
    if !(lo > 0.0 && hi > lo) {
        return Err(GridError::param("sweep.sigma_lo", "need 0 < sigma_lo < sigma_hi"));
    }
    let unit = DispersionTable::with_slope(kernel, shifts, 1.0, k_max)?;
    let w0 = kernel.w0();
    let indicator = |s: f64| indicator_with(&unit, activation, w0, b, s);

    let step = (hi - lo) / (SIGMA_SCAN_POINTS - 1) as f64;
    let sigmas: Vec<f64> = (0..SIGMA_SCAN_POINTS).map(|i| lo + step * i as f64).collect();
    let values = sigmas.iter().map(|&s| indicator(s)).collect::<Result<Vec<_>>>()?;
    let crossings: Vec<usize> = (1..values.len())
        .filter(|&i| (values[i - 1] > 0.0) != (values[i] > 0.0))
        .collect();
    match crossings.len() {
        0 => return Err(GridError::NoCrossing { lo, hi }),
        1 => {}
        _ => {
            return Err(GridError::MultipleCrossings(
                crossings.iter().map(|&i| 0.5 * (sigmas[i - 1] + sigmas[i])).collect(),
            ))
        }
    }
    let i = crossings[0];
    let (mut a, mut c) = (sigmas[i - 1], sigmas[i]);
    let positive_at_a = values[i - 1] > 0.0;
    while c - a > tol {
        let mid = 0.5 * (a + c);
        if (indicator(mid)? > 0.0) == positive_at_a {
            a = mid;
        } else {
            c = mid;
        }
    }
    Ok(0.5 * (a + c))
}

/// `Σ w_i cos(k_i · x)` at the cell centres, x-major.
pub fn mode_pattern(grid: &crate::TorusGrid, modes: &[((i64, i64), f64)]) -> Vec<f64> {
    let n = grid.n();
    let mut out = vec![0.0; n * n];
    for ix in 0..n {
        let x = grid.center(ix);
        for iy in 0..n {
            let y = grid.center(iy);
            out[grid.index(ix, iy)] = modes
                .iter()
                .map(|&((k1, k2), w)| w * (2.0 * PI * (k1 as f64 * x + k2 as f64 * y)).cos())
                .sum();
        }
    }
    out
}

/// Integrates the linearised mean equation
/// `τ dh^β/dt = ¼ Φ0' Σ_β' W^β' * h^β' - h^β` with classical RK4 and
/// returns the RMS of `h^1` after each of `steps` steps.
///
/// Serves as a time-domain check on [`linearized_growth_rate`].
pub fn integrate_linearized_means(
    convolver: &mut Convolver,
    phi0_prime: f64,
    tau: f64,
    initial: [Vec<f64>; 4],
    dt: f64,
    steps: usize,
) -> Vec<f64> {
    let cells = initial[0].len();
    let mut h = initial;
    let mut conv = vec![0.0; cells];
    let mut rhs = |h: &[Vec<f64>; 4], out: &mut [Vec<f64>; 4]| {
        convolver.convolve_means([&h[0], &h[1], &h[2], &h[3]], &mut conv);
        for (hb, ob) in h.iter().zip(out.iter_mut()) {
            for ((o, &c), &v) in ob.iter_mut().zip(&conv).zip(hb) {
                *o = (phi0_prime * c - v) / tau;
            }
        }
    };
    let zero = || std::array::from_fn::<Vec<f64>, 4, _>(|_| vec![0.0; cells]);
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (zero(), zero(), zero(), zero(), zero());
    let mut rms = Vec::with_capacity(steps);
    for _ in 0..steps {
        rhs(&h, &mut k1);
        axpy(&mut tmp, &h, 0.5 * dt, &k1);
        rhs(&tmp, &mut k2);
        axpy(&mut tmp, &h, 0.5 * dt, &k2);
        rhs(&tmp, &mut k3);
        axpy(&mut tmp, &h, dt, &k3);
        rhs(&tmp, &mut k4);
        for b in 0..4 {
            for i in 0..cells {
                h[b][i] += dt / 6.0 * (k1[b][i] + 2.0 * k2[b][i] + 2.0 * k3[b][i] + k4[b][i]);
            }
        }
        rms.push((h[0].iter().map(|v| v * v).sum::<f64>() / cells as f64).sqrt());
    }
    rms
}

fn axpy(out: &mut [Vec<f64>; 4], x: &[Vec<f64>; 4], a: f64, y: &[Vec<f64>; 4]) {
    for b in 0..4 {
        for ((o, &xv), &yv) in out[b].iter_mut().zip(&x[b]).zip(&y[b]) {
            *o = xv + a * yv;
        }
    }
}
