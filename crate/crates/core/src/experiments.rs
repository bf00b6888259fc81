//! Numerical studies built on the solvers: continuation sweeps in `σ`,
//! pattern classification, trajectory replay, grid refinement and
//! relaxation rates.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::connectivity::{Fft2, Kernel, ShiftSet, TorusGrid};
use crate::error::{GridError, Result};
use crate::fokker_planck::{
    external_input, perturbed_homogeneous, random_deltas, stripe_seeded, FieldState, HomogeneousSolver, InitProtocol,
    Solver, SolverParams, StopReason,
};
use crate::homogeneous::{discrete_gaussian, solve_discrete};

/// Fewest σ points accepted by [`bifurcation_sweep`].
pub const MIN_SWEEP_POINTS: usize = 20;
/// Sweeps with fewer points than this are desk-scale runs.
pub const REFERENCE_SWEEP_POINTS: usize = 100;
/// Sample spacing of synthetic trajectories.
pub const TRAJECTORY_DT: f64 = 20.0;
/// Largest gap between trajectory samples accepted by [`replay`].
pub const MAX_TRAJECTORY_GAP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    L2r,
    R2l,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::L2r => "l2r",
            Direction::R2l => "r2l",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Homogeneous,
    Stripe,
    Hexagonal,
    Eye,
    Other,
}

impl Pattern {
    pub fn name(self) -> &'static str {
        match self {
            Pattern::Homogeneous => "homogeneous",
            Pattern::Stripe => "stripe",
            Pattern::Hexagonal => "hexagonal",
            Pattern::Eye => "eye",
            Pattern::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatternThresholds {
    /// `(max - min)/max` below which a field counts as homogeneous.
    pub homogeneity: f64,
    /// Share of non-zero-mode power on one direction that makes a stripe.
    pub stripe_power: f64,
    /// Peaks within this factor of the strongest one are comparable.
    pub peak_ratio: f64,
}

impl Default for PatternThresholds {
    fn default() -> Self {
        PatternThresholds {
            homogeneity: 1e-3,
            stripe_power: 0.8,
            peak_ratio: 2.0,
        }
    }
}

/// `(max - min) / max` of a field, 0 for an all-zero field.
pub fn relative_contrast(field: &[f64]) -> f64 {
    let max = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = field.iter().copied().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

/// Primitive direction of a wave vector, sign-normalised so `k` and `-k`
/// (and all harmonics) share it.
fn direction_of(k1: i64, k2: i64) -> (i64, i64) {
    fn gcd(a: i64, b: i64) -> i64 {
        if b == 0 {
            a.abs()
        } else {
            gcd(b, a % b)
        }
    }
    let g = gcd(k1, k2).max(1);
    let (a, b) = (k1 / g, k2 / g);
    if a < 0 || (a == 0 && b < 0) {
        (-a, -b)
    } else {
        (a, b)
    }
}

/// Labels a mean-activity field by its power spectrum.
pub fn classify_pattern(grid: &TorusGrid, field: &[f64], thresholds: &PatternThresholds) -> Pattern {
    if relative_contrast(field) < thresholds.homogeneity {
        return Pattern::Homogeneous;
    }
    let n = grid.n();
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let mut data: Vec<Complex<f64>> = field.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    Fft2::new(n).forward(&mut data);
    let signed = |i: usize| if i <= n / 2 { i as i64 } else { i as i64 - n as i64 };

    // Both k and -k are listed; power shares are unaffected.
    let mut pairs: Vec<((i64, i64), f64)> = Vec::with_capacity(n * n);
    for ix in 0..n {
        for iy in 0..n {
            let (k1, k2) = (signed(ix), signed(iy));
            if (k1, k2) != (0, 0) {
                pairs.push(((k1, k2), data[ix * n + iy].norm_sqr()));
            }
        }
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    if !(total > 0.0) {
        return Pattern::Homogeneous;
    }
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1));
    let top = pairs[0];
    let lead = direction_of(top.0 .0, top.0 .1);
    let along: f64 = pairs
        .iter()
        .filter(|((k1, k2), _)| direction_of(*k1, *k2) == lead)
        .map(|p| p.1)
        .sum();
    if along >= thresholds.stripe_power * total {
        return Pattern::Stripe;
    }
    let mut directions: Vec<(i64, i64)> = Vec::new();
    for ((k1, k2), p) in &pairs {
        if *p * thresholds.peak_ratio < top.1 {
            break;
        }
        let d = direction_of(*k1, *k2);
        if !directions.contains(&d) {
            directions.push(d);
        }
    }
    match directions.len() {
        0 | 1 => Pattern::Other,
        2 => Pattern::Eye,
        _ => Pattern::Hexagonal,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub sigma: f64,
    pub max_mean: f64,
    pub min_mean: f64,
    pub pattern: Pattern,
    pub stop_reason: StopReason,
    pub final_time: f64,
}

impl BranchRecord {
    pub fn amplitude(&self) -> f64 {
        self.max_mean - self.min_mean
    }
}

pub fn write_branch_csv(records: &[BranchRecord], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "sigma,max_mean,min_mean,pattern,stop_reason,final_time")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.sigma,
            r.max_mean,
            r.min_mean,
            r.pattern.name(),
            r.stop_reason.as_str(),
            r.final_time
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub direction: Direction,
    pub sigmas: Vec<f64>,
    pub init: InitProtocol,
    pub seed: u64,
    pub thresholds: PatternThresholds,
}

/// Evenly spaced grid on `[lo, hi]`.
pub fn sigma_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points < 2 {
        return vec![lo];
    }
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

/// Prepares the first state of a sweep.
pub fn initial_state(
    solver: &Solver,
    init: InitProtocol,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<FieldState> {
    let (n_s, s_max) = (solver.n_s(), solver.s_max());
    let mut state = FieldState::zeros(solver.kernel().grid(), n_s, s_max)?;
    match init {
        InitProtocol::RandomDeltas => random_deltas(&mut state, rng),
        InitProtocol::StripeSeeded => stripe_seeded(&mut state),
        InitProtocol::PerturbedHomogeneous => {
            let w0 = solver.kernel().w0();
            let d = solve_discrete(solver.activation(), w0, solver.params().b, sigma, n_s, s_max)?;
            perturbed_homogeneous(&mut state, &d.density, 0.01, rng)?;
        }
    }
    Ok(state)
}

/// Continuation in `σ`: every point starts from the previous steady state.
///
/// `on_point` sees each record together with its final state.
pub fn bifurcation_sweep(
    solver: &mut Solver,
    config: &SweepConfig,
    mut on_point: impl FnMut(&BranchRecord, &FieldState) -> Result<()>,
) -> Result<Vec<BranchRecord>> {
    if config.sigmas.len() < MIN_SWEEP_POINTS {
        return Err(GridError::param(
            "sweep.points",
            format!("need at least {MIN_SWEEP_POINTS} noise values, got {}", config.sigmas.len()),
        ));
    }
    let mut sigmas = config.sigmas.clone();
    sigmas.sort_by(f64::total_cmp);
    if config.direction == Direction::R2l {
        sigmas.reverse();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = initial_state(solver, config.init, sigmas[0], &mut rng)?;
    let grid = state.grid();
    let mut records = Vec::with_capacity(sigmas.len());
    for &sigma in &sigmas {
        solver.set_sigma(sigma)?;
        state.t = 0.0;
        let report = solver.run_to_stationary(&mut state)?;
        let mean = state.combined_mean();
        let record = BranchRecord {
            sigma,
            max_mean: mean.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            min_mean: mean.iter().copied().fold(f64::INFINITY, f64::min),
            pattern: classify_pattern(&grid, &mean, &config.thresholds),
            stop_reason: report.stop_reason,
            final_time: report.final_time,
        };
        on_point(&record, &state)?;
        records.push(record);
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub sigma_star: f64,
    pub jump: f64,
}

/// Largest jump of `max_mean - min_mean` between consecutive records, if it
/// exceeds `factor` times the median jump.
pub fn detect_transition(branch: &[BranchRecord], factor: f64) -> Option<Transition> {
    if branch.len() < 3 {
        return None;
    }
    let jumps: Vec<f64> = branch
        .windows(2)
        .map(|w| (w[1].amplitude() - w[0].amplitude()).abs())
        .collect();
    let mut sorted = jumps.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    let (i, &jump) = jumps
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))?;
    (jump > factor * median && jump > 0.0).then(|| Transition {
        sigma_star: 0.5 * (branch[i].sigma + branch[i + 1].sigma),
        jump,
    })
}

/// Recorded animal path. Times in ms, positions in cm.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    t: Vec<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
    radius: f64,
    /// Central-difference velocities at the samples, cm/ms.
    vx: Vec<f64>,
    vy: Vec<f64>,
}

impl Trajectory {
    pub fn new(samples: Vec<(f64, f64, f64)>, radius: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(GridError::Trajectory("need at least two samples".into()));
        }
        if !(radius > 0.0) {
            return Err(GridError::Trajectory("enclosure radius must be positive".into()));
        }
        for w in samples.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(GridError::Trajectory(format!("times not increasing at t = {}", w[1].0)));
            }
        }
        if let Some(p) = samples.iter().find(|p| p.1.hypot(p.2) > radius * (1.0 + 1e-12)) {
            return Err(GridError::Trajectory(format!(
                "sample at t = {} lies outside the {radius} cm enclosure",
                p.0
            )));
        }
        let t: Vec<f64> = samples.iter().map(|p| p.0).collect();
        let x: Vec<f64> = samples.iter().map(|p| p.1).collect();
        let y: Vec<f64> = samples.iter().map(|p| p.2).collect();
        let m = t.len();
        let diff = |v: &[f64], i: usize| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(m - 1));
            (v[b] - v[a]) / (t[b] - t[a])
        };
        let vx = (0..m).map(|i| diff(&x, i)).collect();
        let vy = (0..m).map(|i| diff(&y, i)).collect();
        Ok(Trajectory { t, x, y, radius, vx, vy })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn start(&self) -> f64 {
        self.t[0]
    }

    pub fn end(&self) -> f64 {
        *self.t.last().unwrap()
    }

    pub fn sample(&self, i: usize) -> (f64, f64, f64) {
        (self.t[i], self.x[i], self.y[i])
    }

    pub fn samples(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        (0..self.len()).map(|i| self.sample(i))
    }

    pub fn max_gap(&self) -> f64 {
        self.t.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        if !(t >= self.start() && t <= self.end()) {
            return Err(GridError::OutsideTrajectory {
                t,
                start: self.start(),
                end: self.end(),
            });
        }
        let i = self.t.partition_point(|&s| s <= t).clamp(1, self.len() - 1) - 1;
        Ok((i, (t - self.t[i]) / (self.t[i + 1] - self.t[i])))
    }

    pub fn position_at(&self, t: f64) -> Result<(f64, f64)> {
        let (i, w) = self.locate(t)?;
        Ok((
            self.x[i] + w * (self.x[i + 1] - self.x[i]),
            self.y[i] + w * (self.y[i + 1] - self.y[i]),
        ))
    }

    /// Velocity in cm/ms, linearly interpolated between the
    /// finite-difference velocities at the samples.
    pub fn velocity_at(&self, t: f64) -> Result<(f64, f64)> {
        let (i, w) = self.locate(t)?;
        Ok((
            self.vx[i] + w * (self.vx[i + 1] - self.vx[i]),
            self.vy[i] + w * (self.vy[i + 1] - self.vy[i]),
        ))
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t_ms", "x_cm", "y_cm"]).map_err(csv_error)?;
        for (t, x, y) in self.samples() {
            out.serialize((t, x, y)).map_err(csv_error)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read, radius: f64) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let headers = reader.headers().map_err(csv_error)?.clone();
        if headers.iter().collect::<Vec<_>>() != ["t_ms", "x_cm", "y_cm"] {
            return Err(GridError::Trajectory(format!("unexpected header {headers:?}")));
        }
        let samples = reader
            .deserialize::<(f64, f64, f64)>()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(csv_error)?;
        Trajectory::new(samples, radius)
    }
}

fn csv_error(e: csv::Error) -> GridError {
    GridError::Trajectory(e.to_string())
}

/// Smooth random path inside a disc of `radius` cm, sampled every 20 ms.
///
/// The heading performs a random walk whose turning rate is an
/// Ornstein-Uhlenbeck process; the speed is a positive OU process around
/// 15 cm/s; velocities hitting the wall are reflected about its normal.
pub fn synth_trajectory(duration: f64, radius: f64, seed: u64) -> Result<Trajectory> {
    if !(duration > 0.0) {
        return Err(GridError::param("duration", "must be positive"));
    }
    if !(radius > 0.0) {
        return Err(GridError::param("radius", "must be positive"));
    }
    const MEAN_SPEED: f64 = 0.015; // cm/ms
    const SPEED_SPREAD: f64 = 0.004;
    const SPEED_FLOOR: f64 = 0.002;
    const TURN_TIME: f64 = 500.0; // ms
    const TURN_SPREAD: f64 = 0.004; // rad/ms
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = TRAJECTORY_DT;
    let steps = (duration / dt).ceil() as usize;
    let decay = (-dt / TURN_TIME).exp();
    let kick = (1.0 - decay * decay).sqrt();
    let (mut x, mut y) = (0.0f64, 0.0f64);
    let mut heading = rng.gen::<f64>() * 2.0 * PI;
    let mut turn = 0.0f64;
    let mut speed = MEAN_SPEED;
    let mut samples = Vec::with_capacity(steps + 1);
    samples.push((0.0, x, y));
    for i in 1..=steps {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        turn = decay * turn + kick * TURN_SPREAD * z1;
        speed = (MEAN_SPEED + decay * (speed - MEAN_SPEED) + kick * SPEED_SPREAD * z2).max(SPEED_FLOOR);
        heading += turn * dt;
        let (mut nx, mut ny) = (x + speed * dt * heading.cos(), y + speed * dt * heading.sin());
        let r = nx.hypot(ny);
        if r > radius * 0.98 {
            // Reflect the heading about the wall normal and pull back inside.
            let (ux, uy) = (nx / r, ny / r);
            let (hx, hy) = (heading.cos(), heading.sin());
            let dot = hx * ux + hy * uy;
            heading = (hy - 2.0 * dot * uy).atan2(hx - 2.0 * dot * ux);
            turn = 0.0;
            nx = x + speed * dt * heading.cos();
            ny = y + speed * dt * heading.sin();
            let r2 = nx.hypot(ny);
            if r2 > radius * 0.98 {
                let scale = radius * 0.98 / r2;
                nx *= scale;
                ny *= scale;
            }
        }
        x = nx;
        y = ny;
        samples.push((i as f64 * dt, x, y));
    }
    Trajectory::new(samples, radius)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiringEvent {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub rate: f64,
}

pub fn write_events_csv(events: &[FiringEvent], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "t_ms,x_cm,y_cm,rate")?;
    for e in events {
        writeln!(w, "{},{},{},{}", e.t, e.x, e.y, e.rate)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutput {
    pub events: Vec<FiringEvent>,
    /// Trajectory samples at which the probe was examined.
    pub samples: usize,
}

impl ReplayOutput {
    pub fn firing_fraction(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.events.len() as f64 / self.samples as f64
        }
    }
}

/// Drives the network along `trajectory` with velocity-modulated input and
/// records the probe cell's firing.
///
/// At every trajectory sample the rate of the probe is
/// `max_β Φ(¼ Σ W^β' * ⟨f^β'⟩ + B^β)`; an event is emitted when it exceeds
/// `threshold`. Between samples the PDE is stepped with `B^β(t)`.
pub fn replay(
    solver: &mut Solver,
    state: &mut FieldState,
    trajectory: &Trajectory,
    probe_cell: usize,
    threshold: f64,
) -> Result<ReplayOutput> {
    if trajectory.max_gap() > MAX_TRAJECTORY_GAP {
        return Err(GridError::Trajectory(format!(
            "gap of {} ms between samples exceeds {MAX_TRAJECTORY_GAP} ms",
            trajectory.max_gap()
        )));
    }
    if probe_cell >= state.grid().cells() {
        return Err(GridError::param("probe_cell", "outside the sheet"));
    }
    let (alpha, b) = (solver.params().alpha, solver.params().b);
    let offset = state.t - trajectory.start();
    let activation = *solver.activation();
    let mut events = Vec::new();
    for i in 0..trajectory.len() {
        let (t, x, y) = trajectory.sample(i);
        let input = external_input(t, trajectory, alpha, b)?;
        let arg = solver.firing_argument(state, input)?;
        let rate = arg
            .iter()
            .map(|a| activation.evaluate(a[probe_cell]))
            .fold(f64::NEG_INFINITY, f64::max);
        if rate > threshold {
            events.push(FiringEvent { t, x, y, rate });
        }
        if i + 1 < trajectory.len() {
            let t_next = trajectory.sample(i + 1).0;
            solver.advance_to(state, t_next + offset, |s| external_input(s - offset, trajectory, alpha, b))?;
        }
    }
    Ok(ReplayOutput {
        events,
        samples: trajectory.len(),
    })
}

/// Number of single-linkage clusters of event positions at link distance
/// `link` (cm).
pub fn count_clusters(events: &[FiringEvent], link: f64) -> usize {
    let m = events.len();
    let mut parent: Vec<usize> = (0..m).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let link2 = link * link;
    for i in 0..m {
        for j in i + 1..m {
            let (dx, dy) = (events[i].x - events[j].x, events[i].y - events[j].y);
            if dx * dx + dy * dy <= link2 {
                let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                if a != b {
                    parent[a] = b;
                }
            }
        }
    }
    (0..m).filter(|&i| root(&mut parent, i) == i).count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementRow {
    pub n: usize,
    pub l1: f64,
    pub l2: f64,
    /// NaN for the coarsest level.
    pub ooc_l1: f64,
    pub ooc_l2: f64,
}

pub fn write_refinement_csv(rows: &[RefinementRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "n,L1,L2,OOC_L1,OOC_L2")?;
    let fmt = |v: f64| if v.is_nan() { String::new() } else { v.to_string() };
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.n, r.l1, r.l2, fmt(r.ooc_l1), fmt(r.ooc_l2))?;
    }
    Ok(())
}

/// Block averages of an x-major field onto a grid `factor` times coarser.
pub fn coarsen_field(field: &[f64], n: usize, factor: usize) -> Vec<f64> {
    let m = n / factor;
    let mut out = vec![0.0; m * m];
    let w = 1.0 / (factor * factor) as f64;
    for ix in 0..n {
        for iy in 0..n {
            out[(ix / factor) * m + iy / factor] += w * field[ix * n + iy];
        }
    }
    out
}

/// Setup of a refinement study.
#[derive(Debug, Clone)]
pub struct RefinementSetup {
    pub kernel: crate::connectivity::KernelParams,
    pub activation: Activation,
    pub params: SolverParams,
    pub s_max: f64,
    pub t_eval: f64,
    pub seed: u64,
    /// Refine `s` together with `x` (`n_s = n`); otherwise `n_s` is fixed.
    pub fixed_n_s: Option<usize>,
}

/// Errors of `⟨f⟩` on each grid of `n_list` against the finest one, all
/// started from block averages of one random-delta initialisation on the
/// finest grid.
pub fn refinement_study(n_list: &[usize], setup: &RefinementSetup) -> Result<Vec<RefinementRow>> {
    let mut ns = n_list.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let &finest = ns.last().ok_or_else(|| GridError::param("n_list", "must not be empty"))?;
    for &n in &ns {
        if finest % n != 0 {
            return Err(GridError::param("n_list", "every n must divide the finest n"));
        }
    }
    let n_s_of = |n: usize| setup.fixed_n_s.unwrap_or(n);
    let fine_grid = TorusGrid::new(finest)?;
    let mut fine = FieldState::zeros(fine_grid, n_s_of(finest), setup.s_max)?;
    random_deltas(&mut fine, &mut ChaCha8Rng::seed_from_u64(setup.seed));

    let evolve = |mut state: FieldState| -> Result<Vec<f64>> {
        let grid = state.grid();
        let kernel = Arc::new(Kernel::sample(grid, setup.kernel)?);
        let mut solver = Solver::new(
            kernel,
            ShiftSet::unit(grid),
            setup.activation,
            setup.params,
            state.n_s(),
            setup.s_max,
        )?;
        let b = setup.params.b;
        solver.advance_to(&mut state, setup.t_eval, |_| Ok([b; 4]))?;
        Ok(state.combined_mean())
    };

    let initial: Vec<FieldState> = ns[..ns.len() - 1]
        .iter()
        .map(|&n| coarsen_state(&fine, finest / n, n_s_of(finest) / n_s_of(n)))
        .collect::<Result<_>>()?;
    let reference = evolve(fine)?;
    let mut rows: Vec<RefinementRow> = Vec::new();
    for (state, &n) in initial.into_iter().zip(&ns) {
        let mean = evolve(state)?;
        let target = coarsen_field(&reference, finest, finest / n);
        let area = 1.0 / (n * n) as f64;
        let l1 = mean.iter().zip(&target).map(|(a, b)| (a - b).abs()).sum::<f64>() * area;
        let l2 = (mean.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() * area).sqrt();
        let (ooc_l1, ooc_l2) = match rows.last() {
            Some(prev) => {
                let r = (n as f64 / prev.n as f64).ln();
                ((prev.l1 / l1).ln() / r, (prev.l2 / l2).ln() / r)
            }
            None => (f64::NAN, f64::NAN),
        };
        rows.push(RefinementRow { n, l1, l2, ooc_l1, ooc_l2 });
    }
    Ok(rows)
}

/// Block averages over `fx × fx` sheet cells and `fs` activity cells.
pub fn coarsen_state(state: &FieldState, fx: usize, fs: usize) -> Result<FieldState> {
    let x_coarse = state.coarsen(fx)?;
    if fs == 1 {
        return Ok(x_coarse);
    }
    let n_s = state.n_s();
    if fs == 0 || n_s % fs != 0 {
        return Err(GridError::param("factor", format!("must divide n_s = {n_s}")));
    }
    let mut out = FieldState::zeros(x_coarse.grid(), n_s / fs, state.s_max())?;
    out.t = state.t;
    for (dst, src) in out.f.chunks_mut(n_s / fs).zip(x_coarse.f.chunks(n_s)) {
        for (d, block) in dst.iter_mut().zip(src.chunks(fs)) {
            *d = block.iter().sum::<f64>() / fs as f64;
        }
    }
    Ok(out)
}

/// Setup of the homogeneous relaxation study.
#[derive(Debug, Clone)]
pub struct RelaxationSetup {
    pub activation: Activation,
    pub w0: f64,
    pub b: f64,
    pub tau: f64,
    pub sigma: f64,
    pub cfl: f64,
    pub n_s: usize,
    pub s_max: f64,
    /// Cells that receive mass initially.
    pub seeded_cells: usize,
    pub t_end: f64,
    /// Errors are sampled at this spacing (ms).
    pub sample_every: f64,
    /// Fit window: errors between these bounds enter the regression.
    pub fit_upper: f64,
    pub fit_lower: f64,
}

impl RelaxationSetup {
    /// 512 cells on `[0, 3]` with 51 seeded cells of height 512/153.
    pub fn reference(activation: Activation, w0: f64, b: f64, sigma: f64) -> Self {
        RelaxationSetup {
            activation,
            w0,
            b,
            tau: 10.0,
            sigma,
            cfl: 0.9,
            n_s: 512,
            s_max: 3.0,
            seeded_cells: 51,
            t_end: 300.0,
            sample_every: 1.0,
            fit_upper: 1e-2,
            fit_lower: 1e-11,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationRun {
    /// `(t, |⟨f⟩ - ⟨f∞⟩|, ‖f - f∞‖_{L¹})` at the sample times.
    pub history: Vec<(f64, f64, f64)>,
    /// Decay rates (positive, per ms) of the two errors.
    pub mean_rate: f64,
    pub l1_rate: f64,
    pub final_l1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationSummary {
    pub runs: Vec<RelaxationRun>,
    pub mean_rate: f64,
    pub l1_rate: f64,
    /// Stationary state used as the reference.
    pub stationary: Vec<f64>,
}

/// Seeded initial data: `seeded_cells` distinct random cells share unit mass.
pub fn relaxation_initial(setup: &RelaxationSetup, rng: &mut impl Rng) -> Vec<f64> {
    let ds = setup.s_max / setup.n_s as f64;
    let height = 1.0 / (setup.seeded_cells as f64 * ds);
    let mut f = vec![0.0; setup.n_s];
    for j in rand::seq::index::sample(rng, setup.n_s, setup.seeded_cells) {
        f[j] = height;
    }
    f
}

/// Least-squares slope of `ln e` against `t` over samples inside the fit
/// window, returned as a positive decay rate.
fn decay_rate(points: impl Iterator<Item = (f64, f64)>, upper: f64, lower: f64) -> f64 {
    let pts: Vec<(f64, f64)> = points
        .filter(|&(_, e)| e <= upper && e >= lower)
        .map(|(t, e)| (t, e.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let m = pts.len() as f64;
    let (st, se) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (tm, em) = (st / m, se / m);
    let (num, den) = pts
        .iter()
        .fold((0.0, 0.0), |a, p| (a.0 + (p.0 - tm) * (p.1 - em), a.1 + (p.0 - tm).powi(2)));
    -num / den
}

/// Relaxes `runs` random initial data towards the discrete stationary state
/// and fits the exponential decay of the mean and `L¹` errors.
pub fn relaxation_study(runs: usize, seed: u64, setup: &RelaxationSetup) -> Result<RelaxationSummary> {
    let d = solve_discrete(&setup.activation, setup.w0, setup.b, setup.sigma, setup.n_s, setup.s_max)?;
    let ds = d.ds;
    let mut out = Vec::with_capacity(runs);
    for run in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(run as u64));
        let mut f = relaxation_initial(setup, &mut rng);
        let mut solver = HomogeneousSolver::new(
            setup.activation,
            setup.w0,
            setup.b,
            setup.tau,
            setup.sigma,
            setup.cfl,
            setup.n_s,
            setup.s_max,
        )?;
        let errors = |f: &[f64], solver: &HomogeneousSolver| {
            let l1 = f.iter().zip(&d.density).map(|(a, b)| (a - b).abs()).sum::<f64>() * ds;
            ((solver.scheme().mean(f) - d.mean).abs(), l1)
        };
        let mut t = 0.0;
        let (e0, l0) = errors(&f, &solver);
        let mut history = vec![(0.0, e0, l0)];
        let mut next_sample = setup.sample_every;
        while t < setup.t_end - 1e-12 {
            let dt = solver.time_step(&f).min(next_sample - t);
            solver.step_by(&mut f, dt);
            t += dt;
            if t >= next_sample - 1e-12 {
                t = next_sample;
                let (e, l) = errors(&f, &solver);
                history.push((t, e, l));
                next_sample += setup.sample_every;
            }
        }
        let mean_rate = decay_rate(history.iter().map(|h| (h.0, h.1)), setup.fit_upper, setup.fit_lower);
        let l1_rate = decay_rate(history.iter().map(|h| (h.0, h.2)), setup.fit_upper, setup.fit_lower);
        let final_l1 = history.last().unwrap().2;
        out.push(RelaxationRun { history, mean_rate, l1_rate, final_l1 });
    }
    let avg = |g: fn(&RelaxationRun) -> f64| out.iter().map(g).sum::<f64>() / out.len().max(1) as f64;
    Ok(RelaxationSummary {
        mean_rate: avg(|r| r.mean_rate),
        l1_rate: avg(|r| r.l1_rate),
        runs: out,
        stationary: d.density,
    })
}

/// Homogeneous discrete profile matching a solver, for seeding states.
pub fn homogeneous_profile(solver: &Solver, sigma: f64) -> Result<Vec<f64>> {
    let d = solve_discrete(solver.activation(), solver.kernel().w0(), solver.params().b, sigma, solver.n_s(), solver.s_max())?;
    Ok(d.density)
}

/// Gaussian profile helper re-exported for callers that seed columns by hand.
pub fn gaussian_profile(phi0: f64, sigma: f64, n_s: usize, s_max: f64) -> Vec<f64> {
    discrete_gaussian(phi0, sigma, n_s, s_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectivity::KernelParams;
    use crate::stability::mode_pattern;
    use approx::assert_relative_eq;

    fn record(sigma: f64, amp: f64) -> BranchRecord {
        BranchRecord {
            sigma,
            max_mean: 1.0 + amp,
            min_mean: 1.0,
            pattern: Pattern::Other,
            stop_reason: StopReason::Stationary,
            final_time: 0.0,
        }
    }

    #[test]
    fn classification_of_synthetic_fields() {
        let grid = TorusGrid::new(32).unwrap();
        let th = PatternThresholds::default();
        assert_eq!(classify_pattern(&grid, &vec![0.7; 1024], &th), Pattern::Homogeneous);
        let shift = |f: Vec<f64>| f.into_iter().map(|v| v + 3.0).collect::<Vec<_>>();
        let stripe = shift(mode_pattern(&grid, &[((4, 0), 1.0)]));
        assert_eq!(classify_pattern(&grid, &stripe, &th), Pattern::Stripe);
        let hex = shift(mode_pattern(&grid, &[((4, 1), 1.0), ((1, 4), 1.0), ((3, -3), 1.0)]));
        assert_eq!(classify_pattern(&grid, &hex, &th), Pattern::Hexagonal);
        let eye = shift(mode_pattern(&grid, &[((4, 0), 1.0), ((0, 4), 1.0)]));
        assert_eq!(classify_pattern(&grid, &eye, &th), Pattern::Eye);
    }

    #[test]
    fn stripe_harmonics_stay_stripes() {
        // A clipped cosine has harmonics along the same direction only.
        let grid = TorusGrid::new(32).unwrap();
        let f: Vec<f64> = mode_pattern(&grid, &[((3, 1), 1.0)]).into_iter().map(|v| v.max(0.2)).collect();
        assert_eq!(classify_pattern(&grid, &f, &PatternThresholds::default()), Pattern::Stripe);
    }

    #[test]
    fn near_homogeneous_contrast() {
        let grid = TorusGrid::new(8).unwrap();
        let mut f = vec![1.0; 64];
        f[3] = 1.0 + 5e-4;
        assert_eq!(classify_pattern(&grid, &f, &PatternThresholds::default()), Pattern::Homogeneous);
        f[3] = 1.01;
        assert_ne!(classify_pattern(&grid, &f, &PatternThresholds::default()), Pattern::Homogeneous);
    }

    #[test]
    fn step_is_detected() {
        let branch: Vec<_> = (0..10).map(|i| record(i as f64 * 0.01, if i < 6 { 0.3 } else { 0.1 })).collect();
        let tr = detect_transition(&branch, 5.0).unwrap();
        assert_relative_eq!(tr.sigma_star, 0.055, max_relative = 1e-12);
        assert_relative_eq!(tr.jump, 0.2, max_relative = 1e-12);
    }

    #[test]
    fn smooth_branch_has_no_transition() {
        let branch: Vec<_> = (0..10).map(|i| record(i as f64 * 0.01, 0.5 - 0.02 * i as f64 - 0.001 * (i * i) as f64)).collect();
        assert!(detect_transition(&branch, 5.0).is_none());
        assert!(detect_transition(&branch[..2], 5.0).is_none());
    }

    #[test]
    fn direction_normalisation() {
        assert_eq!(direction_of(4, 0), (1, 0));
        assert_eq!(direction_of(-8, 0), (1, 0));
        assert_eq!(direction_of(3, -3), (1, -1));
        assert_eq!(direction_of(-3, 3), (1, -1));
        assert_eq!(direction_of(0, -4), (0, 1));
    }

    #[test]
    fn synthetic_trajectory_properties() {
        let a = synth_trajectory(300_000.0, 80.0, 11).unwrap();
        let b = synth_trajectory(300_000.0, 80.0, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.samples().all(|(_, x, y)| x.hypot(y) <= 80.0));
        assert!(a.end() >= 300_000.0);
        let speeds: Vec<f64> = (0..a.len() - 1)
            .map(|i| {
                let (t0, x0, y0) = a.sample(i);
                let (t1, x1, y1) = a.sample(i + 1);
                (x1 - x0).hypot(y1 - y0) / (t1 - t0)
            })
            .collect();
        assert!(speeds.iter().all(|&v| v > 0.0));
        // Unimodal: histogram counts rise to one peak and then fall.
        let mut hist = [0usize; 12];
        for v in &speeds {
            hist[((v / 0.0025) as usize).min(11)] += 1;
        }
        let peak = (0..12).max_by_key(|&i| hist[i]).unwrap();
        let smooth: Vec<usize> = hist.to_vec();
        assert!(smooth[..peak].windows(2).all(|w| w[0] <= w[1] + speeds.len() / 100));
        assert!(smooth[peak..].windows(2).all(|w| w[0] + speeds.len() / 100 >= w[1]));
    }

    #[test]
    fn trajectory_validation_and_kinematics() {
        assert!(Trajectory::new(vec![(0.0, 0.0, 0.0), (0.0, 1.0, 0.0)], 80.0).is_err());
        assert!(Trajectory::new(vec![(0.0, 0.0, 0.0), (1.0, 90.0, 0.0)], 80.0).is_err());
        let tr = Trajectory::new(vec![(0.0, 0.0, 0.0), (10.0, 1.0, 0.0), (20.0, 2.0, 0.0)], 80.0).unwrap();
        let (vx, vy) = tr.velocity_at(5.0).unwrap();
        assert_relative_eq!(vx, 0.1);
        assert_eq!(vy, 0.0);
        assert_eq!(tr.position_at(15.0).unwrap(), (1.5, 0.0));
        assert!(matches!(tr.velocity_at(25.0), Err(GridError::OutsideTrajectory { .. })));
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let tr = synth_trajectory(2000.0, 80.0, 3).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"t_ms,x_cm,y_cm\n"));
        let back = Trajectory::read_csv(&buf[..], 80.0).unwrap();
        assert_eq!(back, tr);
    }

    #[test]
    fn clusters_split_by_distance() {
        let ev = |x: f64, y: f64| FiringEvent { t: 0.0, x, y, rate: 1.0 };
        let events = [ev(0.0, 0.0), ev(1.0, 0.0), ev(2.0, 0.0), ev(20.0, 0.0), ev(40.0, 40.0)];
        assert_eq!(count_clusters(&events, 2.0), 3);
        assert_eq!(count_clusters(&events, 100.0), 1);
        assert_eq!(count_clusters(&[], 1.0), 0);
    }

    #[test]
    fn identical_grids_have_zero_error() {
        let setup = RefinementSetup {
            kernel: KernelParams::reference(),
            activation: Activation::sigmoid(15.0).unwrap(),
            params: SolverParams { sigma: 0.015, ..Default::default() },
            s_max: 1.3,
            t_eval: 1.0,
            seed: 1,
            fixed_n_s: Some(16),
        };
        let rows = refinement_study(&[8, 8], &setup).unwrap();
        assert!(rows.is_empty());
        let rows = refinement_study(&[8, 16], &setup).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].l1 > 0.0 && rows[0].ooc_l1.is_nan());
    }

    #[test]
    fn coarsened_states_keep_mass() {
        let grid = TorusGrid::new(8).unwrap();
        let mut state = FieldState::zeros(grid, 16, 1.3).unwrap();
        random_deltas(&mut state, &mut ChaCha8Rng::seed_from_u64(3));
        let c = coarsen_state(&state, 2, 4).unwrap();
        assert_eq!((c.grid().n(), c.n_s()), (4, 4));
        for m in c.column_masses() {
            assert_relative_eq!(m, 1.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn relaxation_initial_data_has_unit_mass() {
        let setup = RelaxationSetup::reference(Activation::smooth_eps(0.01).unwrap(), -20.6711, 3.0, 0.03);
        let f = relaxation_initial(&setup, &mut ChaCha8Rng::seed_from_u64(1));
        let ds = 3.0 / 512.0;
        assert_relative_eq!(f.iter().sum::<f64>() * ds, 1.0, max_relative = 1e-14);
        assert_eq!(f.iter().filter(|&&v| v > 0.0).count(), 51);
        assert_relative_eq!(f.iter().copied().fold(0.0, f64::max), 512.0 / 153.0, max_relative = 1e-14);
    }

    #[test]
    fn decay_rate_of_an_exponential() {
        let pts = (0..100).map(|i| (i as f64, 0.5 * (-0.3 * i as f64).exp()));
        assert_relative_eq!(decay_rate(pts, 1.0, 1e-12), 0.3, max_relative = 1e-10);
    }

    #[test]
    fn sweep_needs_enough_points() {
        let grid = TorusGrid::new(8).unwrap();
        let kernel = Arc::new(Kernel::sample(grid, KernelParams::reference()).unwrap());
        let mut solver = Solver::new(kernel, ShiftSet::unit(grid), Activation::relu(), SolverParams::default(), 16, 1.3).unwrap();
        let config = SweepConfig {
            direction: Direction::L2r,
            sigmas: sigma_grid(0.01, 0.02, 5),
            init: InitProtocol::RandomDeltas,
            seed: 0,
            thresholds: PatternThresholds::default(),
        };
        assert!(bifurcation_sweep(&mut solver, &config, |_, _| Ok(())).is_err());
    }
}
