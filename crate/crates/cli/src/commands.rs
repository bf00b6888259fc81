use std::io::Write;
use std::sync::Arc;

use gridfield_core::experiments::{
    bifurcation_sweep, classify_pattern, count_clusters, detect_transition, initial_state, refinement_study,
    relative_contrast, relaxation_study, replay as replay_trajectory, sigma_grid, synth_trajectory, write_branch_csv,
    write_events_csv, write_refinement_csv, Direction, RefinementSetup, RelaxationSetup, SweepConfig, Trajectory,
    MIN_SWEEP_POINTS, REFERENCE_SWEEP_POINTS,
};
use gridfield_core::fokker_planck::{FieldState, InitProtocol, Solver, StopReason};
use gridfield_core::homogeneous::solve_stationary;
use gridfield_core::microscopic::{empirical_density, Coupling, ParticleEnsemble, ParticleParams};
use gridfield_core::stability::{critical_sigma, dispersion, zero_noise_dispersion, zero_noise_stable};
use gridfield_core::{Activation, GridError, Kernel, ShiftSet, TorusGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::output::Outputs;
use crate::{BifurcateArgs, CliError, ParticlesArgs, RefineArgs, RelaxArgs, ReplayArgs, SimulateArgs, StabilityArgs, StationaryArgs};

type CmdResult = Result<(), CliError>;

/// Accuracy requested from the homogeneous root finder.
const ROOT_TOL: f64 = 1e-13;
/// Accuracy of the critical noise strength.
const SIGMA_C_TOL: f64 = 1e-9;

struct Model {
    grid: TorusGrid,
    kernel: Arc<Kernel>,
    shifts: ShiftSet,
    activation: Activation,
}

fn model(config: &RunConfig) -> Result<Model, CliError> {
    let grid = TorusGrid::new(config.grid.n)?;
    let kernel = Arc::new(Kernel::sample(grid, config.kernel)?);
    let shifts = ShiftSet::new(grid, config.shift.z_cells)?;
    let activation = config.activation.build()?;
    Ok(Model { grid, kernel, shifts, activation })
}

fn solver(config: &RunConfig, m: &Model) -> Result<Solver, CliError> {
    Ok(Solver::new(
        m.kernel.clone(),
        m.shifts,
        m.activation,
        config.solver,
        config.grid.n_s,
        config.grid.s_max,
    )?)
}

fn dump(out: &mut Outputs, name: &str, state: &FieldState) -> Result<(), GridError> {
    let mut w = out.file(name, "state")?;
    state.write_dump(&mut w)?;
    w.flush()?;
    Ok(())
}

fn extrema(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::NEG_INFINITY, f64::INFINITY), |(hi, lo), &v| (hi.max(v), lo.min(v)))
}

/// `σ_c` over the sweep range, `None` when the indicator does not cross.
fn sigma_c(config: &RunConfig, m: &Model, k_max: usize) -> Result<Option<f64>, CliError> {
    match critical_sigma(
        &m.kernel,
        &m.shifts,
        &m.activation,
        config.solver.b,
        config.sweep.sigma_lo,
        config.sweep.sigma_hi,
        SIGMA_C_TOL,
        k_max,
    ) {
        Ok(s) => Ok(Some(s)),
        Err(GridError::NoCrossing { lo, hi }) => {
            eprintln!("gridfield: note: stability indicator does not change sign on [{lo}, {hi}]");
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn stationary(config: &RunConfig, args: &StationaryArgs, out: &mut Outputs) -> CmdResult {
    let m = model(config)?;
    let sigmas = if args.sigmas.is_empty() {
        sigma_grid(config.sweep.sigma_lo, config.sweep.sigma_hi, config.sweep.points)
    } else {
        args.sigmas.clone()
    };
    let mut text = String::from("sigma,m,phi0,Z,M_inf\n");
    for sigma in sigmas {
        let h = solve_stationary(&m.activation, m.kernel.w0(), config.solver.b, sigma, ROOT_TOL)?;
        text.push_str(&format!("{},{},{},{},{}\n", h.sigma, h.mean, h.phi0, h.z, h.m_inf));
    }
    print!("{text}");
    out.write_text("stationary.csv", "table", &text)?;
    Ok(())
}

pub fn stability(config: &RunConfig, args: &StabilityArgs, out: &mut Outputs) -> CmdResult {
    let m = model(config)?;
    let (b, sigma) = (config.solver.b, config.solver.sigma);
    let hom = solve_stationary(&m.activation, m.kernel.w0(), b, sigma, ROOT_TOL)?;
    let table = dispersion(&m.kernel, &m.shifts, &hom, &m.activation, args.k_max)?;
    let mut w = out.file("dispersion.csv", "table")?;
    table.to_csv(&mut w)?;
    w.flush()?;
    let zero = zero_noise_dispersion(&m.kernel, &m.shifts, &m.activation, b, args.k_max)?;
    let (zero_stable, _) = zero_noise_stable(&zero);
    let threshold = hom.sigma / hom.m_inf;
    let sigma_c = sigma_c(config, &m, args.k_max)?;
    let modes: Vec<String> = table.dominant_modes().iter().map(|(a, b)| format!("{a}:{b}")).collect();
    let text = format!(
        "sigma,max_F,threshold,stable,dominant_modes,zero_noise_max_F,zero_noise_stable,sigma_c\n{},{},{},{},{},{},{},{}\n",
        sigma,
        table.max_f(),
        threshold,
        table.max_f() < threshold,
        modes.join(" "),
        zero.max_f(),
        zero_stable,
        opt(sigma_c)
    );
    print!("{text}");
    out.write_text("stability.csv", "table", &text)?;
    Ok(())
}

pub fn simulate(config: &RunConfig, args: &SimulateArgs, out: &mut Outputs) -> CmdResult {
    let m = model(config)?;
    let mut solver = solver(config, &m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = initial_state(&solver, args.init.into(), config.solver.sigma, &mut rng)?;
    if let Some(every) = args.dump_every {
        if !(every > 0.0) {
            return Err(CliError::Config("--dump-every: must be positive".into()));
        }
    }
    let mut dumps = 0usize;
    let mut next_dump = args.dump_every.unwrap_or(f64::INFINITY);
    let (stop, steps, derivative) = match args.t_end {
        Some(t_end) => {
            let mut steps = 0;
            loop {
                let target = t_end.min(next_dump);
                steps += solver.advance_to(&mut state, target, |_| Ok([config.solver.b; 4]))?;
                if state.t >= next_dump {
                    dump(out, &format!("dumps/state_{dumps:05}.gcnf"), &state)?;
                    dumps += 1;
                    next_dump += args.dump_every.unwrap();
                }
                if state.t >= t_end {
                    break;
                }
            }
            ("t_end", steps, f64::NAN)
        }
        None => {
            let every = args.dump_every;
            let report = solver.run_to_stationary_with(&mut state, |s| {
                if s.t >= next_dump {
                    dump(out, &format!("dumps/state_{dumps:05}.gcnf"), s)?;
                    dumps += 1;
                    next_dump += every.unwrap();
                }
                Ok(())
            })?;
            (report.stop_reason.as_str(), report.steps, report.final_derivative)
        }
    };
    dump(out, "final_state.gcnf", &state)?;
    for &s in &args.slice_s {
        let mut w = out.file(&format!("slice_s{s}.csv"), "table")?;
        state.slice_csv(s, &mut w)?;
        w.flush()?;
    }
    let means = state.mean_activity();
    let total = state.combined_mean();
    let mut w = out.file("mean.csv", "table")?;
    writeln!(w, "x,y,mean_1,mean_2,mean_3,mean_4,mean")?;
    let n = m.grid.n();
    for ix in 0..n {
        for iy in 0..n {
            let c = m.grid.index(ix, iy);
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                m.grid.center(ix),
                m.grid.center(iy),
                means[0][c],
                means[1][c],
                means[2][c],
                means[3][c],
                total[c]
            )?;
        }
    }
    w.flush()?;
    let (hi, lo) = extrema(&total);
    let pattern = classify_pattern(&m.grid, &total, &config.pattern);
    let text = format!(
        "final_time,steps,stop_reason,final_derivative,max_mean,min_mean,pattern\n{},{},{},{},{},{},{}\n",
        state.t,
        steps,
        stop,
        derivative,
        hi,
        lo,
        pattern.name()
    );
    print!("{text}");
    out.write_text("simulate.csv", "table", &text)?;
    Ok(())
}

pub fn bifurcate(config: &RunConfig, args: &BifurcateArgs, out: &mut Outputs) -> CmdResult {
    let m = model(config)?;
    let direction: Direction = args.direction.map_or(config.sweep.direction, Into::into);
    let init: InitProtocol = args.init.map_or(config.sweep.init, Into::into);
    let points = config.sweep.points;
    if points < MIN_SWEEP_POINTS {
        return Err(CliError::Config(format!("sweep.points: need at least {MIN_SWEEP_POINTS}, got {points}")));
    }
    let desk = points < REFERENCE_SWEEP_POINTS;
    if desk {
        eprintln!("gridfield: note: desk-scale sweep with {points} < {REFERENCE_SWEEP_POINTS} noise values");
    }
    let mut solver = solver(config, &m)?;
    let sweep = SweepConfig {
        direction,
        sigmas: sigma_grid(config.sweep.sigma_lo, config.sweep.sigma_hi, points),
        init,
        seed: config.seed,
        thresholds: config.pattern,
    };
    let mut index = 0usize;
    let records = bifurcation_sweep(&mut solver, &sweep, |r, state| {
        eprintln!(
            "gridfield: sigma={} max={} min={} pattern={} stop={}",
            r.sigma,
            r.max_mean,
            r.min_mean,
            r.pattern.name(),
            r.stop_reason.as_str()
        );
        if !args.no_dumps {
            dump(out, &format!("states/{}_{index:03}.gcnf", direction.name()), state)?;
        }
        index += 1;
        Ok(())
    })?;
    let mut w = out.file(&format!("branch_{}.csv", direction.name()), "table")?;
    write_branch_csv(&records, &mut w)?;
    w.flush()?;

    // Homogeneous reference branch of ⟨f⟩ = Σ_β ⟨f^β⟩.
    let mut text = String::from("sigma,mean\n");
    for r in &records {
        let h = solve_stationary(&m.activation, m.kernel.w0(), config.solver.b, r.sigma, ROOT_TOL)?;
        text.push_str(&format!("{},{}\n", r.sigma, 4.0 * h.mean));
    }
    out.write_text("homogeneous_branch.csv", "table", &text)?;

    let transition = detect_transition(&records, 5.0);
    let sigma_c = sigma_c(config, &m, (m.grid.n() / 2 - 1).min(10))?;
    let unconverged = records.iter().filter(|r| r.stop_reason == StopReason::MaxTime).count();
    let text = format!(
        "direction,points,desk_scale,max_time_points,sigma_c,sigma_star,jump\n{},{},{},{},{},{},{}\n",
        direction.name(),
        points,
        desk,
        unconverged,
        opt(sigma_c),
        opt(transition.map(|t| t.sigma_star)),
        opt(transition.map(|t| t.jump))
    );
    print!("{text}");
    out.write_text(&format!("bifurcate_{}.csv", direction.name()), "table", &text)?;
    Ok(())
}

pub fn replay(config: &RunConfig, args: &ReplayArgs, out: &mut Outputs) -> CmdResult {
    let m = model(config)?;
    let trajectory = match &args.trajectory {
        Some(path) => Trajectory::read_csv(std::fs::File::open(path)?, args.radius)?,
        None => synth_trajectory(args.duration, args.radius, config.seed)?,
    };
    let mut w = out.file("trajectory.csv", "table")?;
    trajectory.write_csv(&mut w)?;
    w.flush()?;
    let mut solver = solver(config, &m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = initial_state(&solver, InitProtocol::RandomDeltas, config.solver.sigma, &mut rng)?;
    solver.advance_to(&mut state, args.warmup, |_| Ok([config.solver.b; 4]))?;
    let result = replay_trajectory(&mut solver, &mut state, &trajectory, m.grid.origin(), args.threshold)?;
    let mut w = out.file("events.csv", "table")?;
    write_events_csv(&result.events, &mut w)?;
    w.flush()?;
    dump(out, "final_state.gcnf", &state)?;
    let contrast = relative_contrast(&state.combined_mean());
    let text = format!(
        "sigma,samples,events,firing_fraction,clusters,final_contrast\n{},{},{},{},{},{}\n",
        config.solver.sigma,
        result.samples,
        result.events.len(),
        result.firing_fraction(),
        count_clusters(&result.events, args.link),
        contrast
    );
    print!("{text}");
    out.write_text("replay.csv", "table", &text)?;
    Ok(())
}

pub fn particles(config: &RunConfig, args: &ParticlesArgs, out: &mut Outputs) -> CmdResult {
    let m = model(config)?;
    let coupling = if args.columns == 1 {
        Coupling::AllToAll { w0: m.kernel.w0() }
    } else {
        let n = (args.columns as f64).sqrt().round() as usize;
        if n * n != args.columns {
            return Err(CliError::Config(format!("--columns: {} is neither 1 nor a square", args.columns)));
        }
        let grid = TorusGrid::new(n)?;
        Coupling::Sheet {
            kernel: Arc::new(Kernel::sample(grid, config.kernel)?),
            shifts: ShiftSet::new(grid, config.shift.z_cells)?,
        }
    };
    let params = ParticleParams { tau: config.solver.tau, sigma: config.solver.sigma, b: [config.solver.b; 4] };
    let seed = args.seed.unwrap_or(config.seed);
    let mut ensemble =
        ParticleEnsemble::new(coupling, m.activation, params, args.per_column, args.s0, seed, args.workers)?;
    if !(args.record_every > 0.0) {
        return Err(CliError::Config("--record-every: must be positive".into()));
    }
    let mut rows = String::from("t,mean_1,mean_2,mean_3,mean_4,mean\n");
    let mut record = |e: &ParticleEnsemble| {
        let means = e.column_means();
        let per = e.columns();
        let beta: Vec<f64> = (0..4).map(|b| means[b * per..(b + 1) * per].iter().sum::<f64>() / per as f64).collect();
        rows.push_str(&format!("{},{},{},{},{},{}\n", e.t, beta[0], beta[1], beta[2], beta[3], e.mean()));
    };
    record(&ensemble);
    let mut next = args.record_every;
    ensemble.run(args.dt, args.t_end, |e| {
        if e.t >= next - 1e-9 {
            record(e);
            next += args.record_every;
        }
    })?;
    out.write_text("particle_means.csv", "table", &rows)?;

    let hist = empirical_density(&ensemble, args.bins, config.grid.s_max)?;
    let rows_n = (4 * hist.columns) as f64;
    let mut text = String::from("s_lo,s_hi,density\n");
    for bin in 0..hist.bins {
        let d: f64 = hist.values.iter().skip(bin).step_by(hist.bins).sum::<f64>() / rows_n;
        text.push_str(&format!("{},{},{}\n", bin as f64 * hist.width(), (bin + 1) as f64 * hist.width(), d));
    }
    out.write_text("histogram.csv", "table", &text)?;

    let values = ensemble.values();
    let count = values.len() as f64;
    let mean = ensemble.mean();
    let se = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1.0).max(1.0)).sqrt() / count.sqrt();
    let reference = if args.columns == 1 && config.solver.sigma > 0.0 {
        Some(solve_stationary(&m.activation, m.kernel.w0(), config.solver.b, config.solver.sigma, ROOT_TOL)?.mean)
    } else {
        None
    };
    let text = format!(
        "t,N,M,mean,standard_error,stationary_mean,z_score\n{},{},{},{},{},{},{}\n",
        ensemble.t,
        args.columns,
        args.per_column,
        mean,
        se,
        opt(reference),
        opt(reference.map(|r| (mean - r) / se))
    );
    print!("{text}");
    out.write_text("particles.csv", "table", &text)?;
    Ok(())
}

pub fn refine(config: &RunConfig, args: &RefineArgs, out: &mut Outputs) -> CmdResult {
    let setup = RefinementSetup {
        kernel: config.kernel,
        activation: config.activation.build()?,
        params: config.solver,
        s_max: config.grid.s_max,
        t_eval: args.t_eval,
        seed: config.seed,
        fixed_n_s: args.fixed_n_s.then_some(config.grid.n_s),
    };
    let rows = refinement_study(&args.n_list, &setup)?;
    let mut buf = Vec::new();
    write_refinement_csv(&rows, &mut buf)?;
    let text = String::from_utf8(buf).expect("ascii output");
    print!("{text}");
    out.write_text("refinement.csv", "table", &text)?;
    Ok(())
}

pub fn relax(config: &RunConfig, args: &RelaxArgs, out: &mut Outputs) -> CmdResult {
    let m = model(config)?;
    let mut setup = RelaxationSetup::reference(m.activation, m.kernel.w0(), config.solver.b, config.solver.sigma);
    setup.tau = config.solver.tau;
    setup.cfl = config.solver.cfl;
    setup.n_s = args.n_s;
    setup.s_max = args.s_max;
    setup.t_end = args.t_end;
    setup.seeded_cells = args.seeded_cells;
    if args.seeded_cells == 0 || args.seeded_cells > args.n_s {
        return Err(CliError::Config("--seeded-cells: must lie in [1, n_s]".into()));
    }
    let summary = relaxation_study(args.runs, config.seed, &setup)?;
    let mut history = String::from("run,t,mean_error,l1_error\n");
    let mut runs = String::from("run,mean_rate,l1_rate,final_l1\n");
    for (i, r) in summary.runs.iter().enumerate() {
        runs.push_str(&format!("{i},{},{},{}\n", r.mean_rate, r.l1_rate, r.final_l1));
        for (t, e, l) in &r.history {
            history.push_str(&format!("{i},{t},{e},{l}\n"));
        }
    }
    out.write_text("relaxation.csv", "table", &runs)?;
    out.write_text("relaxation_history.csv", "table", &history)?;
    let ds = setup.s_max / setup.n_s as f64;
    let mut text = String::from("s,density\n");
    for (j, v) in summary.stationary.iter().enumerate() {
        text.push_str(&format!("{},{}\n", (j as f64 + 0.5) * ds, v));
    }
    out.write_text("relaxation_stationary.csv", "table", &text)?;
    println!("mean_rate,l1_rate\n{},{}", summary.mean_rate, summary.l1_rate);
    Ok(())
}
