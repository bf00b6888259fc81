//! Finite-size particle system whose mean-field limit is the Fokker-Planck
//! model: `M` neurons per column, reflected at `s = 0`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::activation::Activation;
use crate::connectivity::{Convolver, Kernel, ShiftSet};
use crate::error::{GridError, Result};

/// How a column's firing argument is formed from the column means.
#[derive(Clone)]
pub enum Coupling {
    /// One column, all-to-all: `arg = w0 · ¼ Σ_β m^β + B^β`.
    AllToAll { w0: f64 },
    /// Columns on the sheet, coupled by the shifted kernel.
    Sheet { kernel: Arc<Kernel>, shifts: ShiftSet },
}

impl Coupling {
    fn columns(&self) -> usize {
        match self {
            Coupling::AllToAll { .. } => 1,
            Coupling::Sheet { kernel, .. } => kernel.grid().cells(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleParams {
    pub tau: f64,
    pub sigma: f64,
    /// Constant input per orientation.
    pub b: [f64; 4],
}

impl ParticleParams {
    fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(GridError::param("tau", "must be positive"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(GridError::param("sigma", "must be nonnegative"));
        }
        if self.b.iter().any(|v| !v.is_finite()) {
            return Err(GridError::param("B", "must be finite"));
        }
        Ok(())
    }
}

/// Activity of every neuron, laid out as (β, column, particle).
pub struct ParticleEnsemble {
    s: Vec<f64>,
    columns: usize,
    per_column: usize,
    /// Worker `w` owns particle chunk `w` and stream `w` of the base seed.
    rngs: Vec<ChaCha8Rng>,
    chunk: usize,
    pub t: f64,
    coupling: Coupling,
    convolver: Option<Convolver>,
    activation: Activation,
    params: ParticleParams,
    means: Vec<f64>,
    phi: Vec<f64>,
}

impl ParticleEnsemble {
    /// All particles start at `s0`. Randomness is split into `workers`
    /// ChaCha8 streams: stream `w` of `base_seed` drives particle chunk `w`,
    /// so results depend only on `(base_seed, workers)`.
    pub fn new(
        coupling: Coupling,
        activation: Activation,
        params: ParticleParams,
        per_column: usize,
        s0: f64,
        base_seed: u64,
        workers: usize,
    ) -> Result<Self> {
        params.validate()?;
        if per_column == 0 {
            return Err(GridError::param("M", "need at least one particle per column"));
        }
        if workers == 0 {
            return Err(GridError::param("workers", "must be positive"));
        }
        if !(s0 >= 0.0 && s0.is_finite()) {
            return Err(GridError::param("s0", "must be nonnegative"));
        }
        let columns = coupling.columns();
        let total = 4 * columns * per_column;
        let chunk = total.div_ceil(workers);
        let rngs = (0..workers)
            .map(|w| {
                let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
                rng.set_stream(w as u64);
                rng
            })
            .collect();
        let convolver = match &coupling {
            Coupling::Sheet { kernel, shifts } => Some(Convolver::new(kernel.clone(), *shifts)?),
            Coupling::AllToAll { .. } => None,
        };
        Ok(ParticleEnsemble {
            s: vec![s0; total],
            columns,
            per_column,
            rngs,
            chunk,
            t: 0.0,
            coupling,
            convolver,
            activation,
            params,
            means: vec![0.0; 4 * columns],
            phi: vec![0.0; 4 * columns],
        })
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn per_column(&self) -> usize {
        self.per_column
    }

    pub fn values(&self) -> &[f64] {
        &self.s
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.s
    }

    pub fn particles(&self, beta: usize, column: usize) -> &[f64] {
        let start = (beta * self.columns + column) * self.per_column;
        &self.s[start..start + self.per_column]
    }

    /// Column means, laid out as (β, column).
    pub fn column_means(&self) -> Vec<f64> {
        self.s
            .chunks(self.per_column)
            .map(|c| c.iter().sum::<f64>() / self.per_column as f64)
            .collect()
    }

    /// Mean over every particle.
    pub fn mean(&self) -> f64 {
        self.s.iter().sum::<f64>() / self.s.len() as f64
    }

    /// Firing rates `Φ(arg^β_i)` from the current empirical means.
    fn update_rates(&mut self) {
        self.means = self.column_means();
        let n = self.columns;
        match &self.coupling {
            Coupling::AllToAll { w0 } => {
                let avg = 0.25 * self.means.iter().sum::<f64>();
                for beta in 0..4 {
                    self.phi[beta] = self.activation.evaluate(w0 * avg + self.params.b[beta]);
                }
            }
            Coupling::Sheet { .. } => {
                let conv = self.convolver.as_mut().expect("sheet coupling has a convolver");
                let mut out = vec![0.0; n];
                let m = &self.means;
                conv.convolve_means([&m[..n], &m[n..2 * n], &m[2 * n..3 * n], &m[3 * n..]], &mut out);
                for beta in 0..4 {
                    for i in 0..n {
                        self.phi[beta * n + i] = self.activation.evaluate(out[i] + self.params.b[beta]);
                    }
                }
            }
        }
    }

    fn check_dt(&self, dt: f64) -> Result<()> {
        if !(dt > 0.0 && dt <= self.params.tau / 10.0) {
            return Err(GridError::param("dt", format!("must lie in (0, τ/10 = {}]", self.params.tau / 10.0)));
        }
        Ok(())
    }

    /// One Euler-Maruyama step followed by reflection `s ← |s|`.
    pub fn step(&mut self, dt: f64) -> Result<()> {
        self.check_dt(dt)?;
        self.update_rates();
        let h = dt / self.params.tau;
        let amp = (2.0 * self.params.sigma * h).sqrt();
        let (m, phi) = (self.per_column, &self.phi);
        self.s
            .par_chunks_mut(self.chunk)
            .zip(self.rngs.par_iter_mut())
            .enumerate()
            .for_each(|(w, (chunk, rng))| {
                let offset = w * self.chunk;
                for (k, v) in chunk.iter_mut().enumerate() {
                    let xi: f64 = StandardNormal.sample(rng);
                    let rate = phi[(offset + k) / m];
                    *v = (*v + h * (rate - *v) + amp * xi).abs();
                }
            });
        self.t += dt;
        self.check_finite()
    }

    /// Same update with caller-supplied standard normal increments, one per
    /// particle in storage order.
    pub fn step_with_noise(&mut self, dt: f64, noise: &[f64]) -> Result<()> {
        self.check_dt(dt)?;
        if noise.len() != self.s.len() {
            return Err(GridError::param("noise", "needs one value per particle"));
        }
        self.update_rates();
        let h = dt / self.params.tau;
        let amp = (2.0 * self.params.sigma * h).sqrt();
        let m = self.per_column;
        for (idx, (v, xi)) in self.s.iter_mut().zip(noise).enumerate() {
            *v = (*v + h * (self.phi[idx / m] - *v) + amp * xi).abs();
        }
        self.t += dt;
        self.check_finite()
    }

    fn check_finite(&self) -> Result<()> {
        match self.s.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(GridError::NonFinite { index, t: self.t }),
            None => Ok(()),
        }
    }

    /// Steps until `t_end`, calling `observe` after every step.
    pub fn run(&mut self, dt: f64, t_end: f64, mut observe: impl FnMut(&Self)) -> Result<usize> {
        let mut steps = 0;
        while self.t < t_end - 1e-9 * dt {
            self.step(dt.min(t_end - self.t))?;
            steps += 1;
            observe(self);
        }
        Ok(steps)
    }
}

/// Normalised histograms per (β, column) on `[0, s_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bins: usize,
    pub s_max: f64,
    pub columns: usize,
    /// Densities laid out as (β, column, bin); each row integrates to one.
    pub values: Vec<f64>,
}

impl Histogram {
    pub fn width(&self) -> f64 {
        self.s_max / self.bins as f64
    }

    pub fn row(&self, beta: usize, column: usize) -> &[f64] {
        let start = (beta * self.columns + column) * self.bins;
        &self.values[start..start + self.bins]
    }
}

/// Histogram of every column. Particles above `s_max` are counted in the
/// last bin so each row keeps unit mass.
pub fn empirical_density(ensemble: &ParticleEnsemble, bins: usize, s_max: f64) -> Result<Histogram> {
    if bins == 0 {
        return Err(GridError::param("bins", "must be positive"));
    }
    if !(s_max > 0.0) {
        return Err(GridError::param("s_max", "must be positive"));
    }
    let width = s_max / bins as f64;
    let weight = 1.0 / (ensemble.per_column as f64 * width);
    let mut values = vec![0.0; 4 * ensemble.columns * bins];
    for (row, particles) in values.chunks_mut(bins).zip(ensemble.s.chunks(ensemble.per_column)) {
        for &v in particles {
            row[((v / width) as usize).min(bins - 1)] += weight;
        }
    }
    Ok(Histogram {
        bins,
        s_max,
        columns: ensemble.columns,
        values,
    })
}

/// Kolmogorov-Smirnov distance between a sample and a continuous CDF.
pub fn ks_distance(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = cdf(v);
            (c - i as f64 / m).abs().max((c - (i + 1) as f64 / m).abs())
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectivity::{KernelParams, TorusGrid};
    use crate::special::half_normal_cdf;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn params(sigma: f64) -> ParticleParams {
        ParticleParams { tau: 10.0, sigma, b: [3.0; 4] }
    }

    #[test]
    fn noiseless_constant_rate_is_a_linear_ode() {
        let act = Activation::constant(0.7).unwrap();
        let mut e = ParticleEnsemble::new(Coupling::AllToAll { w0: -20.0 }, act, params(0.0), 1, 0.1, 1, 1).unwrap();
        let dt = 0.01;
        e.run(dt, 50.0, |_| {}).unwrap();
        let exact = 0.7 + (0.1 - 0.7) * (-5.0f64).exp();
        for &v in e.values() {
            assert!((v - exact).abs() < 0.6 * dt / 10.0, "{v} vs {exact}");
        }
    }

    #[test]
    fn zero_rate_relaxes_to_the_half_normal() {
        let act = Activation::constant(0.0).unwrap();
        let mut e = ParticleEnsemble::new(Coupling::AllToAll { w0: 0.0 }, act, params(0.02), 5000, 0.5, 7, 2).unwrap();
        e.run(0.1, 80.0, |_| {}).unwrap();
        let d = ks_distance(e.values(), |s| half_normal_cdf(s, 0.02));
        assert!(d < 0.03, "{d}");
    }

    #[test]
    fn runs_are_reproducible_for_fixed_seed_and_workers() {
        let act = Activation::relu();
        let run = |workers| {
            let mut e =
                ParticleEnsemble::new(Coupling::AllToAll { w0: -20.6711 }, act, params(0.03), 500, 0.0, 3, workers).unwrap();
            e.run(0.1, 5.0, |_| {}).unwrap();
            e.values().to_vec()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn permuting_a_column_leaves_the_means_unchanged() {
        let grid = TorusGrid::new(8).unwrap();
        let kernel = Arc::new(Kernel::sample(grid, KernelParams::reference()).unwrap());
        let coupling = Coupling::Sheet { kernel, shifts: ShiftSet::unit(grid) };
        let act = Activation::relu();
        let m = 16;
        let mut a = ParticleEnsemble::new(coupling.clone(), act, params(0.03), m, 0.0, 1, 1).unwrap();
        let mut b = ParticleEnsemble::new(coupling, act, params(0.03), m, 0.0, 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let total = a.values().len();
        let init: Vec<f64> = (0..total).map(|_| rng.gen::<f64>()).collect();
        // Reverse every column in `b`, together with its noise.
        let permute = |v: &[f64]| -> Vec<f64> {
            v.chunks(m).flat_map(|c| c.iter().rev().copied().collect::<Vec<_>>()).collect()
        };
        a.values_mut().copy_from_slice(&init);
        b.values_mut().copy_from_slice(&permute(&init));
        for _ in 0..50 {
            let noise: Vec<f64> = (0..total).map(|_| StandardNormal.sample(&mut rng)).collect();
            a.step_with_noise(0.1, &noise).unwrap();
            b.step_with_noise(0.1, &permute(&noise)).unwrap();
        }
        for (x, y) in a.column_means().iter().zip(b.column_means()) {
            assert_relative_eq!(*x, y, max_relative = 1e-12);
        }
        assert_eq!(permute(b.values()), a.values());
    }

    #[test]
    fn histogram_of_a_point_mass() {
        let act = Activation::relu();
        let e = ParticleEnsemble::new(Coupling::AllToAll { w0: -1.0 }, act, params(0.0), 100, 0.5, 1, 1).unwrap();
        let h = empirical_density(&e, 13, 1.3).unwrap();
        for beta in 0..4 {
            let row = h.row(beta, 0);
            assert_eq!(row.iter().filter(|&&v| v > 0.0).count(), 1);
            assert_relative_eq!(row[5] * h.width(), 1.0, max_relative = 1e-12);
        }
        assert!(empirical_density(&e, 0, 1.3).is_err());
    }

    #[test]
    fn histogram_of_a_uniform_sample_is_flat() {
        let act = Activation::relu();
        let m = 100_000;
        let mut e = ParticleEnsemble::new(Coupling::AllToAll { w0: -1.0 }, act, params(0.0), m, 0.0, 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in e.values_mut() {
            *v = rng.gen::<f64>();
        }
        let h = empirical_density(&e, 10, 1.0).unwrap();
        // Binomial standard deviation of a bin density: sqrt(0.09 / m) / 0.1.
        let sd = (0.09 / m as f64).sqrt() / 0.1;
        assert!(h.values.iter().all(|v| (v - 1.0).abs() < 5.0 * sd));
    }

    #[test]
    fn ks_distance_of_exact_quantiles_is_small() {
        let m = 1000;
        let sample: Vec<f64> = (0..m).map(|i| (i as f64 + 0.5) / m as f64).collect();
        assert_relative_eq!(ks_distance(&sample, |s| s), 0.5 / m as f64, max_relative = 1e-9);
    }

    #[test]
    fn bad_time_steps_are_rejected() {
        let act = Activation::relu();
        let mut e = ParticleEnsemble::new(Coupling::AllToAll { w0: -1.0 }, act, params(0.01), 4, 0.0, 1, 1).unwrap();
        assert!(e.step(2.0).is_err());
        assert!(e.step(0.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn reflection_keeps_activity_nonnegative(seed in any::<u64>(), sigma in 0.0f64..0.5, s0 in 0.0f64..2.0) {
            let act = Activation::relu();
            let mut e = ParticleEnsemble::new(Coupling::AllToAll { w0: -20.6711 }, act, params(sigma), 64, s0, seed, 2).unwrap();
            for _ in 0..50 {
                e.step(1.0).unwrap();
                prop_assert!(e.values().iter().all(|&v| v >= 0.0));
            }
        }
    }
}
