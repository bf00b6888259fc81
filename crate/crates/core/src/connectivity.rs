//! Inhibitory connectivity on the periodic neural sheet.
//!
//! The sheet `[-0.5, 0.5)²` is discretised into `n × n` cells with the
//! origin at a cell center. Kernels are stored by grid offset so that the
//! interaction integral becomes a cyclic convolution evaluated with FFTs.
//! Two-dimensional fields are flat `Vec<f64>` in x-major order: the value
//! at cell `(ix, iy)` lives at `ix * n + iy`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};

/// Relative size below which imaginary parts of `Ŵ(k)` count as round-off.
const IMAG_TOLERANCE: f64 = 1e-10;
/// Relative kernel magnitude treated as "outside the support".
const SUPPORT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TorusGrid {
    n: usize,
}

impl TorusGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 4 || n % 2 != 0 {
            return Err(GridError::param("grid.n", format!("must be even and >= 4, got {n}")));
        }
        Ok(TorusGrid { n })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        1.0 / self.n as f64
    }

    #[inline]
    pub fn cells(&self) -> usize {
        self.n * self.n
    }

    /// Center of cell `i` along one axis; `i = n/2` is the origin.
    #[inline]
    pub fn center(&self, i: usize) -> f64 {
        -0.5 + i as f64 * self.dx()
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        ix * self.n + iy
    }

    /// Index of the cell containing the sheet origin.
    pub fn origin(&self) -> usize {
        self.index(self.n / 2, self.n / 2)
    }

    /// Minimum-image distance along one axis for a grid offset.
    #[inline]
    fn wrapped(&self, offset: usize) -> f64 {
        let o = if offset > self.n / 2 {
            offset as f64 - self.n as f64
        } else {
            offset as f64
        };
        o * self.dx()
    }
}

/// `W(ρ) = -A (1 + tanh(a - b ρ))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelParams {
    #[serde(rename = "A")]
    pub amplitude: f64,
    pub a: f64,
    pub b: f64,
}

impl KernelParams {
    /// The kernel used throughout the reference experiments:
    /// `A = 0.005 · 128²`, `a = 10`, `b = 50`.
    pub fn reference() -> Self {
        KernelParams {
            amplitude: 0.005 * 128.0 * 128.0,
            a: 10.0,
            b: 50.0,
        }
    }

    #[inline]
    pub fn radial(&self, rho: f64) -> f64 {
        -self.amplitude * (1.0 + (self.a - self.b * rho).tanh())
    }
}

impl Default for KernelParams {
    fn default() -> Self {
        Self::reference()
    }
}

/// Sampled kernel together with its integral and discrete spectrum.
#[derive(Debug, Clone)]
pub struct Kernel {
    grid: TorusGrid,
    params: Option<KernelParams>,
    /// `W` at grid offset `(ox, oy)`, x-major.
    offsets: Vec<f64>,
    w0: f64,
    /// Full-lattice transform `Σ W(x) exp(-i k·x) dx²` in FFT order.
    spectrum: Vec<Complex<f64>>,
}

impl Kernel {
    /// Samples `W(|x|) = -A(1 + tanh(a - b|x|))` with minimum-image torus
    /// distances.
    pub fn sample(grid: TorusGrid, params: KernelParams) -> Result<Self> {
        if !(params.amplitude > 0.0 && params.amplitude.is_finite()) {
            return Err(GridError::param("kernel.A", "must be positive"));
        }
        if !(params.b > 0.0 && params.b.is_finite()) {
            return Err(GridError::param("kernel.b", "must be positive"));
        }
        if !params.a.is_finite() {
            return Err(GridError::param("kernel.a", "must be finite"));
        }
        let edge = params.radial(0.5).abs();
        let bound = SUPPORT_TOLERANCE * params.amplitude;
        if edge > bound {
            return Err(GridError::KernelSupport { value: edge, bound });
        }
        let n = grid.n();
        let mut offsets = vec![0.0; grid.cells()];
        for ox in 0..n {
            let x = grid.wrapped(ox);
            for oy in 0..n {
                let y = grid.wrapped(oy);
                offsets[grid.index(ox, oy)] = params.radial((x * x + y * y).sqrt());
            }
        }
        let mut kernel = Self::from_offsets(grid, offsets)?;
        kernel.params = Some(params);
        Ok(kernel)
    }

    /// Builds a kernel from values indexed by grid offset (x-major). The
    /// caller is responsible for evenness; `spectral_table` reports
    /// violations.
    pub fn from_offsets(grid: TorusGrid, offsets: Vec<f64>) -> Result<Self> {
        if offsets.len() != grid.cells() {
            return Err(GridError::param(
                "kernel.samples",
                format!("expected {} values, got {}", grid.cells(), offsets.len()),
            ));
        }
        if offsets.iter().any(|w| !w.is_finite()) {
            return Err(GridError::param("kernel.samples", "non-finite value"));
        }
        let dx2 = grid.dx() * grid.dx();
        let w0 = offsets.iter().sum::<f64>() * dx2;
        let mut fft = Fft2::new(grid.n());
        let mut spectrum: Vec<Complex<f64>> =
            offsets.iter().map(|&w| Complex::new(w * dx2, 0.0)).collect();
        fft.forward(&mut spectrum);
        Ok(Kernel {
            grid,
            params: None,
            offsets,
            w0,
            spectrum,
        })
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn params(&self) -> Option<KernelParams> {
        self.params
    }

    /// `W0 = Σ W dx²`, the discrete integral over the sheet.
    pub fn w0(&self) -> f64 {
        self.w0
    }

    pub fn at_offset(&self, ox: usize, oy: usize) -> f64 {
        self.offsets[self.grid.index(ox % self.grid.n(), oy % self.grid.n())]
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    /// Kernel values at cell centers in sheet order, i.e. `W(x_i, y_j)`
    /// relative to the origin cell.
    pub fn samples(&self) -> Vec<f64> {
        let n = self.grid.n();
        let mut out = vec![0.0; self.grid.cells()];
        for ix in 0..n {
            for iy in 0..n {
                out[self.grid.index(ix, iy)] = self.at_offset(ix + n / 2, iy + n / 2);
            }
        }
        out
    }

    /// Complex transform at lattice mode `2π(k1, k2)`.
    pub fn transform_at(&self, k1: i64, k2: i64) -> Complex<f64> {
        let n = self.grid.n() as i64;
        let i = k1.rem_euclid(n) as usize;
        let j = k2.rem_euclid(n) as usize;
        self.spectrum[self.grid.index(i, j)]
    }

    pub fn full_spectrum(&self) -> &[Complex<f64>] {
        &self.spectrum
    }

    /// Real lattice coefficients `Ŵ(k)` for `|k1|, |k2| <= k_max`.
    pub fn spectral_table(&self, k_max: usize) -> Result<SpectralTable> {
        let n = self.grid.n();
        if k_max + 1 > n / 2 {
            return Err(GridError::param(
                "k_max",
                format!("must be <= n/2 - 1 = {}, got {k_max}", n / 2 - 1),
            ));
        }
        let scale = self.spectrum.iter().map(|c| c.norm()).fold(0.0, f64::max);
        let tol = IMAG_TOLERANCE * scale;
        let k = k_max as i64;
        let side = 2 * k_max + 1;
        let mut values = Vec::with_capacity(side * side);
        for k1 in -k..=k {
            for k2 in -k..=k {
                let c = self.transform_at(k1, k2);
                if c.im.abs() > tol {
                    return Err(GridError::ComplexSpectrum {
                        k1,
                        k2,
                        imag: c.im,
                        tol,
                    });
                }
                values.push(c.re);
            }
        }
        Ok(SpectralTable { k_max, values })
    }

    /// Kernel samples as CSV rows `x,y,W` in sheet order.
    pub fn to_csv(&self) -> String {
        let n = self.grid.n();
        let samples = self.samples();
        let mut out = String::from("x,y,W\n");
        for ix in 0..n {
            for iy in 0..n {
                out.push_str(&format!(
                    "{},{},{}\n",
                    self.grid.center(ix),
                    self.grid.center(iy),
                    samples[self.grid.index(ix, iy)]
                ));
            }
        }
        out
    }
}

/// `Ŵ(k)` on the square `|k1|, |k2| <= k_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralTable {
    k_max: usize,
    values: Vec<f64>,
}

impl SpectralTable {
    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn get(&self, k1: i64, k2: i64) -> f64 {
        let k = self.k_max as i64;
        assert!(k1.abs() <= k && k2.abs() <= k, "mode ({k1}, {k2}) outside table");
        let side = 2 * k + 1;
        self.values[((k1 + k) * side + (k2 + k)) as usize]
    }

    /// All `(k1, k2, Ŵ)` entries, k1-major.
    pub fn iter(&self) -> impl Iterator<Item = (i64, i64, f64)> + '_ {
        let k = self.k_max as i64;
        let side = 2 * k + 1;
        self.values
            .iter()
            .enumerate()
            .map(move |(i, &w)| (i as i64 / side - k, i as i64 % side - k, w))
    }
}

/// Cardinal orientation of a population.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    North,
    West,
    South,
    East,
}

impl Orientation {
    pub const ALL: [Orientation; 4] = [
        Orientation::North,
        Orientation::West,
        Orientation::South,
        Orientation::East,
    ];

    /// Unit grid step `(dx, dy)` in the preferred direction.
    pub fn unit(self) -> (i64, i64) {
        match self {
            Orientation::North => (0, 1),
            Orientation::West => (-1, 0),
            Orientation::South => (0, -1),
            Orientation::East => (1, 0),
        }
    }

    /// Preferred heading `θ^β`: π/2, π, 3π/2, 2π.
    pub fn heading(self) -> f64 {
        match self {
            Orientation::North => 0.5 * PI,
            Orientation::West => PI,
            Orientation::South => 1.5 * PI,
            Orientation::East => 2.0 * PI,
        }
    }
}

/// Equal-length shifts `r^β = z e_β` with `z` a whole number of cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftSet {
    grid: TorusGrid,
    z_cells: usize,
}

impl ShiftSet {
    pub fn new(grid: TorusGrid, z_cells: usize) -> Result<Self> {
        if z_cells >= grid.n() / 2 {
            return Err(GridError::param(
                "shift.z_cells",
                format!("must be < n/2 = {}, got {z_cells}", grid.n() / 2),
            ));
        }
        Ok(ShiftSet { grid, z_cells })
    }

    /// One-cell shifts.
    pub fn unit(grid: TorusGrid) -> Self {
        ShiftSet { grid, z_cells: 1 }
    }

    pub fn z_cells(&self) -> usize {
        self.z_cells
    }

    /// Shift magnitude in sheet units.
    pub fn z(&self) -> f64 {
        self.z_cells as f64 * self.grid.dx()
    }

    /// `r^β` in grid cells.
    pub fn cells(&self, beta: usize) -> (i64, i64) {
        let (ux, uy) = Orientation::ALL[beta].unit();
        (ux * self.z_cells as i64, uy * self.z_cells as i64)
    }

    /// `Σ_β exp(-i k·r^β)` at lattice mode `2π(k1, k2)`.
    pub fn factor(&self, k1: f64, k2: f64) -> f64 {
        shift_factor(k1, k2, self.z())
    }
}

/// `Σ_β exp(-i k·r^β) = 2 cos(2π k1 z) + 2 cos(2π k2 z)` for `k = 2π(k1, k2)`.
pub fn shift_factor(k1: f64, k2: f64, z: f64) -> f64 {
    2.0 * (2.0 * PI * k1 * z).cos() + 2.0 * (2.0 * PI * k2 * z).cos()
}

/// Row-column 2-D FFT on an `n × n` x-major buffer.
pub(crate) struct Fft2 {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    column: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl Fft2 {
    pub(crate) fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let scratch_len = forward
            .get_inplace_scratch_len()
            .max(inverse.get_inplace_scratch_len());
        Fft2 {
            n,
            forward,
            inverse,
            column: vec![Complex::default(); n],
            scratch: vec![Complex::default(); scratch_len],
        }
    }

    pub(crate) fn forward(&mut self, data: &mut [Complex<f64>]) {
        let plan = Arc::clone(&self.forward);
        self.transform(plan.as_ref(), data);
    }

    /// Unnormalised inverse; divide by `n²` to undo `forward`.
    pub(crate) fn inverse(&mut self, data: &mut [Complex<f64>]) {
        let plan = Arc::clone(&self.inverse);
        self.transform(plan.as_ref(), data);
    }

    fn transform(&mut self, plan: &dyn Fft<f64>, data: &mut [Complex<f64>]) {
        let n = self.n;
        debug_assert_eq!(data.len(), n * n);
        // Contiguous rows are the y direction for fixed x.
        for row in data.chunks_exact_mut(n) {
            plan.process_with_scratch(row, &mut self.scratch);
        }
        for iy in 0..n {
            for ix in 0..n {
                self.column[ix] = data[ix * n + iy];
            }
            plan.process_with_scratch(&mut self.column, &mut self.scratch);
            for ix in 0..n {
                data[ix * n + iy] = self.column[ix];
            }
        }
    }
}

/// Reusable workspace for the shifted interaction integral
/// `(1/4) Σ_β' ∫ W(x - y - r^β') m^β'(y) dy`.
pub struct Convolver {
    kernel: Arc<Kernel>,
    shifts: ShiftSet,
    fft: Fft2,
    buffer: Vec<Complex<f64>>,
}

impl Convolver {
    pub fn new(kernel: Arc<Kernel>, shifts: ShiftSet) -> Result<Self> {
        if kernel.grid() != shifts.grid {
            return Err(GridError::param("shift", "shift grid differs from kernel grid"));
        }
        let n = kernel.grid().n();
        Ok(Convolver {
            fft: Fft2::new(n),
            buffer: vec![Complex::default(); n * n],
            kernel,
            shifts,
        })
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn shifts(&self) -> ShiftSet {
        self.shifts
    }

    /// Writes the interaction field for the four mean fields into `out`.
    ///
    /// Translating population β' by `r^β'` before a single convolution is
    /// the same as convolving with the shifted kernel `W(· - r^β')`.
    pub fn convolve_means(&mut self, means: [&[f64]; 4], out: &mut [f64]) {
        let grid = self.kernel.grid();
        let n = grid.n();
        let nn = n as i64;
        for c in self.buffer.iter_mut() {
            *c = Complex::default();
        }
        for (beta, mean) in means.iter().enumerate() {
            debug_assert_eq!(mean.len(), grid.cells());
            let (rx, ry) = self.shifts.cells(beta);
            for ix in 0..n {
                let sx = (ix as i64 - rx).rem_euclid(nn) as usize;
                for iy in 0..n {
                    let sy = (iy as i64 - ry).rem_euclid(nn) as usize;
                    self.buffer[ix * n + iy].re += mean[sx * n + sy];
                }
            }
        }
        self.fft.forward(&mut self.buffer);
        for (b, w) in self.buffer.iter_mut().zip(self.kernel.spectrum.iter()) {
            *b *= *w;
        }
        self.fft.inverse(&mut self.buffer);
        let scale = 0.25 / (n * n) as f64;
        for (o, b) in out.iter_mut().zip(self.buffer.iter()) {
            *o = b.re * scale;
        }
    }
}

/// One-shot form of [`Convolver::convolve_means`].
pub fn convolve_means(kernel: &Kernel, shifts: ShiftSet, means: [&[f64]; 4]) -> Result<Vec<f64>> {
    let mut conv = Convolver::new(Arc::new(kernel.clone()), shifts)?;
    let mut out = vec![0.0; kernel.grid().cells()];
    conv.convolve_means(means, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference(n: usize) -> Kernel {
        Kernel::sample(TorusGrid::new(n).unwrap(), KernelParams::reference()).unwrap()
    }

    /// Direct double sum of `(1/4) Σ_β ∫ W(x - y - r^β) m^β(y) dy`.
    fn direct(kernel: &Kernel, shifts: ShiftSet, means: [&[f64]; 4]) -> Vec<f64> {
        let grid = kernel.grid();
        let n = grid.n() as i64;
        let dx2 = grid.dx() * grid.dx();
        let mut out = vec![0.0; grid.cells()];
        for ix in 0..n {
            for iy in 0..n {
                let mut acc = 0.0;
                for (beta, m) in means.iter().enumerate() {
                    let (rx, ry) = shifts.cells(beta);
                    for jx in 0..n {
                        for jy in 0..n {
                            let ox = (ix - jx - rx).rem_euclid(n) as usize;
                            let oy = (iy - jy - ry).rem_euclid(n) as usize;
                            acc += kernel.at_offset(ox, oy) * m[(jx * n + jy) as usize];
                        }
                    }
                }
                out[(ix * n + iy) as usize] = 0.25 * acc * dx2;
            }
        }
        out
    }

    #[test]
    fn grid_validation() {
        assert!(TorusGrid::new(3).is_err());
        assert!(TorusGrid::new(6).is_ok());
        assert!(TorusGrid::new(7).is_err());
        let g = TorusGrid::new(8).unwrap();
        assert_eq!(g.center(4), 0.0);
        assert_eq!(g.center(0), -0.5);
    }

    #[test]
    fn reference_kernel_integral() {
        // Stated value for the reference kernel: W0 = -20.6711.
        let k = reference(64);
        assert!((k.w0() + 20.6711).abs() < 0.15, "W0 = {}", k.w0());
    }

    #[test]
    fn kernel_value_at_origin() {
        let params = KernelParams {
            amplitude: 3.0,
            a: 2.0,
            b: 40.0,
        };
        let k = Kernel::sample(TorusGrid::new(16).unwrap(), params).unwrap();
        assert_relative_eq!(k.at_offset(0, 0), -3.0 * (1.0 + 2.0f64.tanh()));
        let samples = k.samples();
        assert_eq!(samples[k.grid().origin()], k.at_offset(0, 0));
    }

    #[test]
    fn kernel_is_inhibitory_and_even() {
        let k = reference(32);
        let n = 32;
        for ox in 0..n {
            for oy in 0..n {
                let w = k.at_offset(ox, oy);
                assert!(w <= 0.0);
                assert_eq!(w, k.at_offset((n - ox) % n, oy));
                assert_eq!(w, k.at_offset(ox, (n - oy) % n));
            }
        }
    }

    #[test]
    fn wide_kernel_is_rejected() {
        let params = KernelParams {
            amplitude: 1.0,
            a: 10.0,
            b: 5.0,
        };
        let err = Kernel::sample(TorusGrid::new(32).unwrap(), params).unwrap_err();
        assert!(matches!(err, GridError::KernelSupport { .. }));
    }

    #[test]
    fn zero_mode_is_the_integral() {
        let k = reference(32);
        let table = k.spectral_table(10).unwrap();
        assert_eq!(table.get(0, 0), k.transform_at(0, 0).re);
        assert_relative_eq!(table.get(0, 0), k.w0(), max_relative = 1e-13);
    }

    #[test]
    fn spectrum_is_even() {
        let table = reference(32).spectral_table(10).unwrap();
        for (k1, k2, w) in table.iter() {
            assert_relative_eq!(w, table.get(-k1, k2), max_relative = 1e-12, epsilon = 1e-12);
            assert_relative_eq!(w, table.get(k1, -k2), max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_kernel_has_only_the_zero_mode() {
        let grid = TorusGrid::new(16).unwrap();
        let k = Kernel::from_offsets(grid, vec![-2.5; 256]).unwrap();
        let table = k.spectral_table(7).unwrap();
        for (k1, k2, w) in table.iter() {
            if (k1, k2) != (0, 0) {
                assert_abs_diff_eq!(w, 0.0, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn k_max_is_bounded_by_the_grid() {
        let k = reference(16);
        assert!(k.spectral_table(7).is_ok());
        assert!(k.spectral_table(8).is_err());
    }

    #[test]
    fn odd_kernel_is_reported() {
        let grid = TorusGrid::new(8).unwrap();
        let mut offsets = vec![0.0; 64];
        offsets[grid.index(1, 0)] = -1.0;
        let k = Kernel::from_offsets(grid, offsets).unwrap();
        assert!(matches!(
            k.spectral_table(3),
            Err(GridError::ComplexSpectrum { .. })
        ));
    }

    #[test]
    fn parseval() {
        let k = reference(32);
        let dx2 = k.grid().dx().powi(2);
        let energy: f64 = k.offsets().iter().map(|w| w * w).sum::<f64>() * dx2;
        let spectral: f64 = k.full_spectrum().iter().map(|c| c.norm_sqr()).sum();
        assert_relative_eq!(spectral, energy, max_relative = 1e-10);
    }

    #[test]
    fn shift_factor_values() {
        assert_eq!(shift_factor(0.0, 0.0, 0.37), 4.0);
        assert_relative_eq!(
            shift_factor(4.0, 0.0, 1.0 / 64.0),
            2.0 * (PI / 8.0).cos() + 2.0,
            max_relative = 1e-15
        );
        assert_relative_eq!(shift_factor(4.0, 0.0, 1.0 / 64.0), 3.847_759_065_022_573_5, max_relative = 1e-15);
        assert_abs_diff_eq!(shift_factor(2.0, 2.0, 0.25), -4.0, epsilon = 1e-14);
    }

    #[test]
    fn shift_factor_matches_the_phase_sum() {
        let grid = TorusGrid::new(32).unwrap();
        let shifts = ShiftSet::new(grid, 3).unwrap();
        for k1 in -10i64..=10 {
            for k2 in -10i64..=10 {
                let mut sum = Complex::new(0.0, 0.0);
                for beta in 0..4 {
                    let (rx, ry) = shifts.cells(beta);
                    let phase = -2.0 * PI * (k1 * rx + k2 * ry) as f64 * grid.dx();
                    sum += Complex::from_polar(1.0, phase);
                }
                let f = shifts.factor(k1 as f64, k2 as f64);
                assert_abs_diff_eq!(sum.im, 0.0, epsilon = 1e-12);
                assert_abs_diff_eq!(sum.re, f, epsilon = 1e-12);
                assert!(f.abs() <= 4.0 + 1e-12);
            }
        }
    }

    #[test]
    fn shift_must_fit_the_grid() {
        let grid = TorusGrid::new(8).unwrap();
        assert!(ShiftSet::new(grid, 3).is_ok());
        assert!(ShiftSet::new(grid, 4).is_err());
    }

    #[test]
    fn constant_means_give_w0_times_mean() {
        let k = reference(16);
        let shifts = ShiftSet::unit(k.grid());
        let m = vec![0.3; 256];
        let out = convolve_means(&k, shifts, [&m, &m, &m, &m]).unwrap();
        for v in out {
            assert_relative_eq!(v, k.w0() * 0.3, max_relative = 1e-12);
        }
    }

    #[test]
    fn point_mass_matches_direct_sum() {
        let k = reference(16);
        let shifts = ShiftSet::new(k.grid(), 2).unwrap();
        let zero = vec![0.0; 256];
        let mut spike = vec![0.0; 256];
        spike[k.grid().index(3, 11)] = 1.0 / k.grid().dx().powi(2);
        let fft = convolve_means(&k, shifts, [&zero, &zero, &spike, &zero]).unwrap();
        let slow = direct(&k, shifts, [&zero, &zero, &spike, &zero]);
        let scale = slow.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (a, b) in fft.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-10 * scale);
        }
        // A unit mass reproduces a quarter of the kernel, translated to the
        // spike and then by r^south = (0, -2).
        let (rx, ry) = shifts.cells(2);
        for ix in 0..16i64 {
            for iy in 0..16i64 {
                let ox = (ix - 3 - rx).rem_euclid(16) as usize;
                let oy = (iy - 11 - ry).rem_euclid(16) as usize;
                let want = 0.25 * k.at_offset(ox, oy);
                assert_relative_eq!(fft[(ix * 16 + iy) as usize], want, max_relative = 1e-10, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn random_means_match_direct_sum() {
        let k = reference(16);
        let shifts = ShiftSet::unit(k.grid());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fields: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..256).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let means = [&fields[0][..], &fields[1][..], &fields[2][..], &fields[3][..]];
        let fft = convolve_means(&k, shifts, means).unwrap();
        let slow = direct(&k, shifts, means);
        let scale = slow.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (a, b) in fft.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-10 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn convolution_is_linear() {
        let k = reference(16);
        let shifts = ShiftSet::unit(k.grid());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut field = || -> Vec<f64> { (0..256).map(|_| rng.gen::<f64>()).collect() };
        let m1: Vec<Vec<f64>> = (0..4).map(|_| field()).collect();
        let m2: Vec<Vec<f64>> = (0..4).map(|_| field()).collect();
        let (a, b) = (0.7, -1.3);
        let mix: Vec<Vec<f64>> = (0..4)
            .map(|i| m1[i].iter().zip(&m2[i]).map(|(x, y)| a * x + b * y).collect())
            .collect();
        let as4 = |m: &Vec<Vec<f64>>| -> Vec<f64> {
            convolve_means(&k, shifts, [&m[0], &m[1], &m[2], &m[3]]).unwrap()
        };
        let (c1, c2, cm) = (as4(&m1), as4(&m2), as4(&mix));
        for i in 0..256 {
            assert_abs_diff_eq!(cm[i], a * c1[i] + b * c2[i], epsilon = 1e-12 * 200.0);
        }
    }
}
