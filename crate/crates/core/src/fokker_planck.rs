//! Finite-volume time stepping of the four-population Fokker-Planck system
//!
//! ```text
//! τ ∂t f^β + ∂s[(Φ^β(x) - s) f^β] = σ ∂ss f^β,   J = 0 at s = 0 and s = s_max
//! ```
//!
//! Each `(β, x)` column is a 1-D problem on cell-centred `s`-cells. The flux
//! through an interface is the exponentially fitted (Scharfetter-Gummel)
//! combination of drift and diffusion,
//!
//! ```text
//! J_{j+1/2} = u (f_j - e f_{j+1}) / (1 - e),   u = Φ - s_{j+1/2},   e = exp(-u ds/σ)
//! ```
//!
//! which reduces to upwinding at `σ = 0` and to central differencing as
//! `u ds/σ → 0`. Its zero-flux states are exactly the point values of the
//! truncated Gaussian, so stationary states are preserved to rounding.
//! Forward Euler in time; `Φ` is frozen over a step.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::connectivity::{Convolver, Kernel, Orientation, ShiftSet, TorusGrid};
use crate::error::{GridError, Result};
use crate::experiments::Trajectory;

const DUMP_MAGIC: &[u8; 5] = b"GCNF1";
/// Below this |u ds/σ| the Bernoulli factors come from their Taylor series.
const SERIES_CUTOFF: f64 = 1e-2;
/// Largest exponent for which `exp(-Φ ds/σ) · exp(s ds/σ)` is formed as a
/// product of two precomputed exponentials.
const SPLIT_EXP_LIMIT: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverParams {
    /// Relaxation time in ms.
    pub tau: f64,
    pub sigma: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub alpha: f64,
    pub cfl: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub stop_tol: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            tau: 10.0,
            sigma: 0.005,
            b: 3.0,
            alpha: 0.3,
            cfl: 0.9,
            t_min: 2000.0,
            t_max: 6000.0,
            stop_tol: 1e-8,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, name: &'static str, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(GridError::param(name, what.to_string()))
            }
        };
        check(self.tau > 0.0 && self.tau.is_finite(), "solver.tau", "must be positive")?;
        check(self.sigma >= 0.0 && self.sigma.is_finite(), "solver.sigma", "must be >= 0")?;
        check(self.b.is_finite(), "solver.B", "must be finite")?;
        check(self.alpha.is_finite(), "solver.alpha", "must be finite")?;
        check(self.cfl > 0.0 && self.cfl <= 1.0, "solver.cfl", "must lie in (0, 1]")?;
        check(self.t_min >= 0.0, "solver.t_min", "must be >= 0")?;
        check(self.t_max >= self.t_min, "solver.t_max", "must be >= t_min")?;
        check(self.stop_tol > 0.0, "solver.stop_tol", "must be positive")?;
        Ok(())
    }
}

/// Discretisation of one column: cell-centred on `[0, s_max]`.
#[derive(Debug, Clone)]
pub struct ColumnScheme {
    n_s: usize,
    ds: f64,
    sigma: f64,
    /// `exp(s_{j+1/2} ds/σ)` for the interior interfaces, when representable.
    growth: Option<Vec<f64>>,
}

impl ColumnScheme {
    pub fn new(n_s: usize, s_max: f64, sigma: f64) -> Result<Self> {
        if n_s < 2 {
            return Err(GridError::param("grid.n_s", "need at least two s-cells"));
        }
        if !(s_max > 0.0 && s_max.is_finite()) {
            return Err(GridError::param("grid.s_max", "must be positive"));
        }
        if !(sigma >= 0.0) {
            return Err(GridError::param("solver.sigma", "must be >= 0"));
        }
        let ds = s_max / n_s as f64;
        let growth = (sigma > 0.0 && s_max * ds / sigma < SPLIT_EXP_LIMIT)
            .then(|| (1..n_s).map(|j| (j as f64 * ds * ds / sigma).exp()).collect());
        Ok(ColumnScheme { n_s, ds, sigma, growth })
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    pub fn ds(&self) -> f64 {
        self.ds
    }

    /// Largest stable step for rates in `[phi_lo, phi_hi]`:
    /// `cfl τ / (max|u|/ds + 2σ/ds²)`.
    pub fn time_step(&self, tau: f64, cfl: f64, phi_lo: f64, phi_hi: f64) -> f64 {
        let (first, last) = (self.ds, (self.n_s - 1) as f64 * self.ds);
        let umax = (phi_hi - first).abs().max((phi_lo - last).abs()).max((phi_hi - last).abs()).max((phi_lo - first).abs());
        cfl * tau / (umax / self.ds + 2.0 * self.sigma / (self.ds * self.ds))
    }

    /// Writes `f - (dt/τ ds) (J_{j+1/2} - J_{j-1/2})` into `out`.
    pub fn update(&self, phi: f64, f: &[f64], out: &mut [f64], dt_over_tau: f64) {
        let lambda = dt_over_tau / self.ds;
        let ds = self.ds;
        let sigma = self.sigma;
        let split = self
            .growth
            .as_ref()
            .filter(|_| (phi * ds / sigma).abs() < SPLIT_EXP_LIMIT)
            .map(|g| ((-phi * ds / sigma).exp(), g));
        let mut j_left = 0.0;
        for j in 0..self.n_s - 1 {
            let u = phi - (j + 1) as f64 * ds;
            let (fj, fk) = (f[j], f[j + 1]);
            let j_right = if sigma == 0.0 {
                u.max(0.0) * fj + u.min(0.0) * fk
            } else {
                let pe = u * ds / sigma;
                if pe.abs() < SERIES_CUTOFF {
                    let bp = bernoulli_series(pe);
                    sigma / ds * ((bp + pe) * fj - bp * fk)
                } else if let Some((ec, g)) = split {
                    let e = ec * g[j];
                    u * (fj - e * fk) / (1.0 - e)
                } else if pe > 0.0 {
                    let e = (-pe).exp();
                    u * (fj - e * fk) / (1.0 - e)
                } else {
                    let d = pe.exp();
                    u * (d * fj - fk) / (d - 1.0)
                }
            };
            out[j] = fj - lambda * (j_right - j_left);
            j_left = j_right;
        }
        let last = self.n_s - 1;
        out[last] = f[last] + lambda * j_left;
    }

    pub fn mean(&self, f: &[f64]) -> f64 {
        f.iter()
            .enumerate()
            .map(|(j, v)| (j as f64 + 0.5) * v)
            .sum::<f64>()
            * self.ds
            * self.ds
    }

    pub fn mass(&self, f: &[f64]) -> f64 {
        f.iter().sum::<f64>() * self.ds
    }
}

/// `B(x) = x / (e^x - 1)` for small |x|.
#[inline]
fn bernoulli_series(x: f64) -> f64 {
    let x2 = x * x;
    1.0 - 0.5 * x + x2 / 12.0 * (1.0 - x2 / 60.0 * (1.0 - x2 / 42.0))
}

/// Discrete densities of the four populations.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    grid: TorusGrid,
    n_s: usize,
    s_max: f64,
    /// `(β, x, y, s)` row-major.
    pub f: Vec<f64>,
    /// Clock in ms.
    pub t: f64,
}

impl FieldState {
    pub fn zeros(grid: TorusGrid, n_s: usize, s_max: f64) -> Result<Self> {
        if n_s < 2 {
            return Err(GridError::param("grid.n_s", "need at least two s-cells"));
        }
        if !(s_max > 0.0 && s_max.is_finite()) {
            return Err(GridError::param("grid.s_max", "must be positive"));
        }
        Ok(FieldState {
            grid,
            n_s,
            s_max,
            f: vec![0.0; 4 * grid.cells() * n_s],
            t: 0.0,
        })
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    pub fn ds(&self) -> f64 {
        self.s_max / self.n_s as f64
    }

    pub fn s_center(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.ds()
    }

    /// Index of the `s`-cell containing `s` (clamped to the grid).
    pub fn s_cell(&self, s: f64) -> usize {
        ((s / self.ds()).floor().max(0.0) as usize).min(self.n_s - 1)
    }

    pub fn columns(&self) -> usize {
        4 * self.grid.cells()
    }

    /// Column of population `beta` at sheet cell `cell`.
    pub fn column(&self, beta: usize, cell: usize) -> &[f64] {
        let start = (beta * self.grid.cells() + cell) * self.n_s;
        &self.f[start..start + self.n_s]
    }

    pub fn column_mut(&mut self, beta: usize, cell: usize) -> &mut [f64] {
        let start = (beta * self.grid.cells() + cell) * self.n_s;
        &mut self.f[start..start + self.n_s]
    }

    /// Puts all mass of one column into the `s`-cell containing `s`.
    pub fn set_delta(&mut self, beta: usize, cell: usize, s: f64) {
        let j = self.s_cell(s);
        let height = 1.0 / self.ds();
        let col = self.column_mut(beta, cell);
        col.fill(0.0);
        col[j] = height;
    }

    /// Every column set to `profile` (normalised to unit mass on this grid).
    pub fn fill_columns(&mut self, profile: &[f64]) -> Result<()> {
        if profile.len() != self.n_s {
            return Err(GridError::param("profile", "length must equal n_s"));
        }
        let mass: f64 = profile.iter().sum::<f64>() * self.ds();
        if !(mass > 0.0) {
            return Err(GridError::param("profile", "must carry positive mass"));
        }
        for col in self.f.chunks_mut(self.n_s) {
            for (c, p) in col.iter_mut().zip(profile) {
                *c = p / mass;
            }
        }
        Ok(())
    }

    /// `⟨f^β⟩(x) = Σ_j s_j f_j ds`, one field per population.
    pub fn mean_activity(&self) -> [Vec<f64>; 4] {
        let ds = self.ds();
        let cells = self.grid.cells();
        std::array::from_fn(|beta| {
            (0..cells)
                .map(|c| {
                    self.column(beta, c)
                        .iter()
                        .enumerate()
                        .map(|(j, v)| (j as f64 + 0.5) * v)
                        .sum::<f64>()
                        * ds
                        * ds
                })
                .collect()
        })
    }

    /// `⟨f⟩ = Σ_β ⟨f^β⟩`.
    pub fn combined_mean(&self) -> Vec<f64> {
        let means = self.mean_activity();
        (0..self.grid.cells())
            .map(|c| means.iter().map(|m| m[c]).sum())
            .collect()
    }

    /// Mass of every column, in storage order.
    pub fn column_masses(&self) -> Vec<f64> {
        let ds = self.ds();
        self.f.chunks(self.n_s).map(|c| c.iter().sum::<f64>() * ds).collect()
    }

    pub fn min_value(&self) -> f64 {
        self.f.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Block averages over `factor × factor` sheet cells.
    pub fn coarsen(&self, factor: usize) -> Result<FieldState> {
        let n = self.grid.n();
        if factor == 0 || n % factor != 0 {
            return Err(GridError::param("factor", format!("must divide n = {n}")));
        }
        let coarse_grid = TorusGrid::new(n / factor)?;
        let mut out = FieldState::zeros(coarse_grid, self.n_s, self.s_max)?;
        out.t = self.t;
        let w = 1.0 / (factor * factor) as f64;
        for beta in 0..4 {
            for ix in 0..n {
                for iy in 0..n {
                    let src = self.column(beta, self.grid.index(ix, iy)).to_vec();
                    let dst = out.column_mut(beta, coarse_grid.index(ix / factor, iy / factor));
                    for (d, s) in dst.iter_mut().zip(&src) {
                        *d += w * s;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn write_dump(&self, mut w: impl Write) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        let n = self.grid.n() as u32;
        for d in [4, n, n, self.n_s as u32, 0] {
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(8 * (self.f.len() + 1));
        for v in &self.f {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.t.to_le_bytes());
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a dump; the `s`-range is not stored and must be supplied.
    pub fn read_dump(mut r: impl Read, s_max: f64) -> Result<FieldState> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(GridError::Format("bad magic".into()));
        }
        let mut dims = [0u32; 5];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b);
        }
        if dims[0] != 4 || dims[1] != dims[2] {
            return Err(GridError::Format(format!("unexpected dimensions {dims:?}")));
        }
        let grid = TorusGrid::new(dims[1] as usize)
            .map_err(|e| GridError::Format(e.to_string()))?;
        let mut state = FieldState::zeros(grid, dims[3] as usize, s_max)?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != 8 * (state.f.len() + 1) {
            return Err(GridError::Format(format!(
                "expected {} data bytes, found {}",
                8 * (state.f.len() + 1),
                bytes.len()
            )));
        }
        let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for v in state.f.iter_mut() {
            *v = values.next().unwrap();
        }
        state.t = values.next().unwrap();
        Ok(state)
    }

    /// CSV of `f^β(x, y, s*)` over the sheet for every population.
    pub fn slice_csv(&self, s_star: f64, mut w: impl Write) -> Result<()> {
        let j = self.s_cell(s_star);
        writeln!(w, "beta,x,y,f")?;
        let n = self.grid.n();
        for beta in 0..4 {
            for ix in 0..n {
                for iy in 0..n {
                    let v = self.column(beta, self.grid.index(ix, iy))[j];
                    writeln!(w, "{},{},{},{:e}", beta + 1, self.grid.center(ix), self.grid.center(iy), v)?;
                }
            }
        }
        Ok(())
    }
}

/// Initial data of the continuation sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitProtocol {
    RandomDeltas,
    PerturbedHomogeneous,
    StripeSeeded,
}

impl InitProtocol {
    pub fn name(self) -> &'static str {
        match self {
            InitProtocol::RandomDeltas => "random_deltas",
            InitProtocol::PerturbedHomogeneous => "perturbed_homogeneous",
            InitProtocol::StripeSeeded => "stripe_seeded",
        }
    }
}

/// One percent of the cells of each sheet (at least one) start with all
/// their mass at `s = 1`; every other column starts at `s = 0`.
pub fn random_deltas(state: &mut FieldState, rng: &mut impl Rng) {
    let cells = state.grid.cells();
    let active = ((0.01 * cells as f64).round() as usize).max(1);
    for beta in 0..4 {
        for c in 0..cells {
            state.set_delta(beta, c, 0.0);
        }
        for c in sample(rng, cells, active) {
            state.set_delta(beta, c, 1.0);
        }
    }
}

/// Each column is `(1 - δξ) f∞ + δξ δ_{s=1}` with `ξ` uniform on `[0, 1)`.
pub fn perturbed_homogeneous(state: &mut FieldState, profile: &[f64], delta: f64, rng: &mut impl Rng) -> Result<()> {
    state.fill_columns(profile)?;
    let j = state.s_cell(1.0);
    let height = 1.0 / state.ds();
    for col in state.f.chunks_mut(state.n_s) {
        let w = delta * rng.gen::<f64>();
        for v in col.iter_mut() {
            *v *= 1.0 - w;
        }
        col[j] += w * height;
    }
    Ok(())
}

/// A horizontal band of `max(1, n/16)` rows through the sheet centre starts
/// at `s = 1`, everything else at `s = 0`.
pub fn stripe_seeded(state: &mut FieldState) {
    let n = state.grid.n();
    let width = (n / 16).max(1);
    let first = n / 2 - width / 2;
    for beta in 0..4 {
        for ix in 0..n {
            for iy in 0..n {
                let s = if (first..first + width).contains(&iy) { 1.0 } else { 0.0 };
                let c = state.grid.index(ix, iy);
                state.set_delta(beta, c, s);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Stationary,
    MaxTime,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Stationary => "stationary",
            StopReason::MaxTime => "max-time",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunReport {
    pub final_time: f64,
    /// Last measured `‖∂t Σ_β f^β‖_{L¹}`; NaN if never measured.
    pub final_derivative: f64,
    pub stop_reason: StopReason,
    pub steps: usize,
}

/// Explicit solver for the coupled system.
pub struct Solver {
    params: SolverParams,
    activation: Activation,
    convolver: Convolver,
    scheme: ColumnScheme,
    conv: Vec<f64>,
    phi: Vec<f64>,
    next: Vec<f64>,
}

impl Solver {
    pub fn new(
        kernel: Arc<Kernel>,
        shifts: ShiftSet,
        activation: Activation,
        params: SolverParams,
        n_s: usize,
        s_max: f64,
    ) -> Result<Self> {
        params.validate()?;
        let cells = kernel.grid().cells();
        Ok(Solver {
            params,
            activation,
            convolver: Convolver::new(kernel, shifts)?,
            scheme: ColumnScheme::new(n_s, s_max, params.sigma)?,
            conv: vec![0.0; cells],
            phi: vec![0.0; 4 * cells],
            next: Vec::new(),
        })
    }

    pub fn params(&self) -> &SolverParams {
        &self.params
    }

    pub fn activation(&self) -> &Activation {
        &self.activation
    }

    pub fn kernel(&self) -> &Kernel {
        self.convolver.kernel()
    }

    pub fn n_s(&self) -> usize {
        self.scheme.n_s
    }

    pub fn s_max(&self) -> f64 {
        self.scheme.ds * self.scheme.n_s as f64
    }

    /// Changes `σ` in place, keeping the kernel and workspaces.
    pub fn set_sigma(&mut self, sigma: f64) -> Result<()> {
        let params = SolverParams { sigma, ..self.params };
        params.validate()?;
        self.scheme = ColumnScheme::new(self.scheme.n_s, self.scheme.ds * self.scheme.n_s as f64, sigma)?;
        self.params = params;
        Ok(())
    }

    fn check(&self, state: &FieldState) -> Result<()> {
        if state.grid != self.convolver.kernel().grid() || state.n_s != self.scheme.n_s {
            return Err(GridError::param("state", "grid does not match the solver"));
        }
        Ok(())
    }

    /// `¼ Σ_β' W^β' * ⟨f^β'⟩ + B^β` for each population.
    pub fn firing_argument(&mut self, state: &FieldState, b_beta: [f64; 4]) -> Result<[Vec<f64>; 4]> {
        self.check(state)?;
        self.convolve(state);
        Ok(std::array::from_fn(|beta| self.conv.iter().map(|c| c + b_beta[beta]).collect()))
    }

    fn convolve(&mut self, state: &FieldState) {
        let means = state.mean_activity();
        self.convolver
            .convolve_means([&means[0], &means[1], &means[2], &means[3]], &mut self.conv);
    }

    /// Refreshes the per-column rates and returns the CFL step.
    fn prepare(&mut self, state: &FieldState, b_beta: [f64; 4]) -> f64 {
        self.convolve(state);
        let cells = self.conv.len();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for beta in 0..4 {
            for c in 0..cells {
                let p = self.activation.evaluate(self.conv[c] + b_beta[beta]);
                self.phi[beta * cells + c] = p;
                lo = lo.min(p);
                hi = hi.max(p);
            }
        }
        self.scheme.time_step(self.params.tau, self.params.cfl, lo, hi)
    }

    fn advance(&mut self, state: &mut FieldState, dt: f64) -> Result<()> {
        let n_s = self.scheme.n_s;
        self.next.resize(state.f.len(), 0.0);
        let scheme = &self.scheme;
        let phi = &self.phi;
        let ratio = dt / self.params.tau;
        self.next
            .par_chunks_mut(n_s)
            .zip(state.f.par_chunks(n_s))
            .enumerate()
            .for_each(|(c, (out, f))| scheme.update(phi[c], f, out, ratio));
        let t_new = state.t + dt;
        if let Some((index, &value)) = self.next.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
            return Err(if value.is_finite() {
                GridError::NegativeDensity { value, index, t: t_new }
            } else {
                GridError::NonFinite { index, t: t_new }
            });
        }
        std::mem::swap(&mut state.f, &mut self.next);
        state.t = t_new;
        Ok(())
    }

    /// One CFL-limited step with inputs `b_beta`; returns the step taken.
    pub fn step(&mut self, state: &mut FieldState, b_beta: [f64; 4]) -> Result<f64> {
        self.check(state)?;
        let dt = self.prepare(state, b_beta);
        self.advance(state, dt)?;
        Ok(dt)
    }

    /// Steps until `state.t == t_end`, shortening the final step to land on
    /// it exactly. `input` supplies `B^β` at the start of each step.
    pub fn advance_to(
        &mut self,
        state: &mut FieldState,
        t_end: f64,
        mut input: impl FnMut(f64) -> Result<[f64; 4]>,
    ) -> Result<usize> {
        self.check(state)?;
        let mut steps = 0;
        while state.t < t_end {
            let b = input(state.t)?;
            let dt = self.prepare(state, b).min(t_end - state.t);
            self.advance(state, dt)?;
            if t_end - state.t < 1e-12 * t_end.abs().max(1.0) {
                state.t = t_end;
            }
            steps += 1;
        }
        Ok(steps)
    }

    /// Runs with constant `B^β = B` until stationary or `t_max`.
    ///
    /// Stationarity is declared once `t >= t_min` and the discrete time
    /// derivative of `Σ_β f^β`, measured in `L¹(dx dy ds)`, drops to
    /// `stop_tol`.
    pub fn run_to_stationary(&mut self, state: &mut FieldState) -> Result<RunReport> {
        self.run_to_stationary_with(state, |_| Ok(()))
    }

    /// [`Solver::run_to_stationary`] calling `on_step` after every step.
    pub fn run_to_stationary_with(
        &mut self,
        state: &mut FieldState,
        mut on_step: impl FnMut(&FieldState) -> Result<()>,
    ) -> Result<RunReport> {
        self.check(state)?;
        let b = [self.params.b; 4];
        let (t_min, t_max, tol) = (self.params.t_min, self.params.t_max, self.params.stop_tol);
        let cells = state.grid.cells();
        let n_s = self.scheme.n_s;
        let measure = state.grid.dx().powi(2) * self.scheme.ds;
        let start = state.t;
        let mut steps = 0;
        let mut derivative = f64::NAN;
        loop {
            if state.t - start >= t_max - 1e-9 {
                return Ok(RunReport {
                    final_time: state.t - start,
                    final_derivative: derivative,
                    stop_reason: StopReason::MaxTime,
                    steps,
                });
            }
            let dt = self.prepare(state, b).min(start + t_max - state.t);
            self.advance(state, dt)?;
            steps += 1;
            on_step(state)?;
            if state.t - start >= t_min {
                // `next` now holds the previous state.
                let block = cells * n_s;
                let mut sum = 0.0;
                for i in 0..block {
                    let d: f64 = (0..4).map(|b| state.f[b * block + i] - self.next[b * block + i]).sum();
                    sum += d.abs();
                }
                derivative = sum * measure / dt;
                if derivative <= tol {
                    return Ok(RunReport {
                        final_time: state.t - start,
                        final_derivative: derivative,
                        stop_reason: StopReason::Stationary,
                        steps,
                    });
                }
            }
        }
    }
}

/// Spatially homogeneous single-population problem
/// `τ ∂t f + ∂s[(Φ(W0 ⟨f⟩ + B) - s) f] = σ ∂ss f` on one column.
#[derive(Debug, Clone)]
pub struct HomogeneousSolver {
    pub activation: Activation,
    pub w0: f64,
    pub b: f64,
    pub tau: f64,
    pub cfl: f64,
    scheme: ColumnScheme,
    s_max: f64,
    buffer: Vec<f64>,
}

impl HomogeneousSolver {
    pub fn new(
        activation: Activation,
        w0: f64,
        b: f64,
        tau: f64,
        sigma: f64,
        cfl: f64,
        n_s: usize,
        s_max: f64,
    ) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(GridError::param("solver.tau", "must be positive"));
        }
        if !(cfl > 0.0 && cfl <= 1.0) {
            return Err(GridError::param("solver.cfl", "must lie in (0, 1]"));
        }
        Ok(HomogeneousSolver {
            activation,
            w0,
            b,
            tau,
            cfl,
            scheme: ColumnScheme::new(n_s, s_max, sigma)?,
            s_max,
            buffer: vec![0.0; n_s],
        })
    }

    pub fn scheme(&self) -> &ColumnScheme {
        &self.scheme
    }

    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    pub fn rate(&self, f: &[f64]) -> f64 {
        self.activation.evaluate(self.w0 * self.scheme.mean(f) + self.b)
    }

    /// The CFL step at the current rate.
    pub fn time_step(&self, f: &[f64]) -> f64 {
        let phi = self.rate(f);
        self.scheme.time_step(self.tau, self.cfl, phi, phi)
    }

    /// Advances by `dt` (no CFL check).
    pub fn step_by(&mut self, f: &mut [f64], dt: f64) {
        let phi = self.rate(f);
        self.scheme.update(phi, f, &mut self.buffer, dt / self.tau);
        f.copy_from_slice(&self.buffer);
    }

    /// One CFL step; returns its length.
    pub fn step(&mut self, f: &mut [f64]) -> f64 {
        let dt = self.time_step(f);
        self.step_by(f, dt);
        dt
    }
}

/// Converts trajectory velocities (cm/ms) to the m/s the input gain expects.
pub const VELOCITY_TO_M_PER_S: f64 = 10.0;

/// `B^β(t) = B + α v(t) cos(θ(t) - θ^β)` along a trajectory, with `v` in m/s.
pub fn external_input(t: f64, trajectory: &Trajectory, alpha: f64, b: f64) -> Result<[f64; 4]> {
    let (vx, vy) = trajectory.velocity_at(t)?;
    Ok(input_from_velocity(VELOCITY_TO_M_PER_S * vx, VELOCITY_TO_M_PER_S * vy, alpha, b))
}

/// `B + α v cos(θ - θ^β)` written as `B + α (v · e_β)`; `v` in m/s.
pub fn input_from_velocity(vx: f64, vy: f64, alpha: f64, b: f64) -> [f64; 4] {
    std::array::from_fn(|beta| {
        let (ex, ey) = Orientation::ALL[beta].unit();
        b + alpha * (vx * ex as f64 + vy * ey as f64)
    })
}
