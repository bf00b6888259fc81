mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gridfield_core::experiments::Direction;
use gridfield_core::fokker_planck::InitProtocol;
use gridfield_core::GridError;

use crate::config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Model(GridError),
    Io(std::io::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Model(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        match e {
            GridError::InvalidParameter { .. } => CliError::Config(e.to_string()),
            GridError::Io(io) => CliError::Io(io),
            other => CliError::Model(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Model(e) if e.is_convergence_failure() => 4,
            CliError::Model(_) | CliError::Io(_) => 3,
        }
    }
}

/// Noisy grid-cell neural field: stationary states, stability, simulation
/// and numerical experiments.
#[derive(Parser, Debug)]
#[command(name = "gridfield", version)]
struct Cli {
    /// TOML configuration file; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set solver.sigma=0.02`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Worker threads for the solvers.
    #[arg(long, env = "GRIDFIELD_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Homogeneous stationary states over a range of noise strengths.
    Stationary(StationaryArgs),
    /// Dispersion table and critical noise strength.
    Stability(StabilityArgs),
    /// Time evolution of the full four-population system.
    Simulate(SimulateArgs),
    /// Continuation sweep in sigma.
    Bifurcate(BifurcateArgs),
    /// Drive the network along an animal trajectory and record firing.
    Replay(ReplayArgs),
    /// Interacting particle system.
    Particles(ParticlesArgs),
    /// Grid refinement study.
    Refine(RefineArgs),
    /// Relaxation of the homogeneous problem to its stationary state.
    Relax(RelaxArgs),
}

#[derive(Args, Debug)]
pub struct StationaryArgs {
    /// Noise strengths; defaults to the sweep range of the configuration.
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct StabilityArgs {
    /// Largest |k1|, |k2| in the dispersion table.
    #[arg(long, default_value_t = 10)]
    pub k_max: usize,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = InitArg::RandomDeltas)]
    pub init: InitArg,
    /// Run to this time (ms) instead of until stationary.
    #[arg(long)]
    pub t_end: Option<f64>,
    /// Write a state dump every this many ms.
    #[arg(long)]
    pub dump_every: Option<f64>,
    /// Also write `f(x, y, s*)` slices of the final state at these activity levels.
    #[arg(long, value_delimiter = ',')]
    pub slice_s: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct BifurcateArgs {
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    /// Skip the state dumps per sigma.
    #[arg(long)]
    pub no_dumps: bool,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    /// Trajectory CSV (`t_ms,x_cm,y_cm`); a synthetic one is generated otherwise.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// Length of the synthetic trajectory (ms).
    #[arg(long, default_value_t = 300_000.0)]
    pub duration: f64,
    /// Enclosure radius (cm).
    #[arg(long, default_value_t = 80.0)]
    pub radius: f64,
    /// Firing threshold on the probe's rate.
    #[arg(long, default_value_t = 0.0)]
    pub threshold: f64,
    /// Time (ms) with constant input before the replay starts.
    #[arg(long, default_value_t = 2000.0)]
    pub warmup: f64,
    /// Link distance (cm) for grouping firing events into fields.
    #[arg(long, default_value_t = 5.0)]
    pub link: f64,
}

#[derive(Args, Debug)]
pub struct ParticlesArgs {
    /// Number of columns N: 1 for all-to-all coupling, otherwise n² with the
    /// sheet coupled by the configured kernel.
    #[arg(long = "columns", short = 'N', default_value_t = 1)]
    pub columns: usize,
    /// Particles per column M.
    #[arg(long = "per-column", short = 'M', default_value_t = 10_000)]
    pub per_column: usize,
    /// Time step (ms).
    #[arg(long, default_value_t = 0.05)]
    pub dt: f64,
    /// Final time T (ms).
    #[arg(long = "t-end", short = 'T', default_value_t = 500.0)]
    pub t_end: f64,
    /// Seed; defaults to the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Independent random streams.
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    /// Spacing (ms) of the mean-vs-time rows.
    #[arg(long, default_value_t = 1.0)]
    pub record_every: f64,
    /// Histogram bins on [0, s_max].
    #[arg(long, default_value_t = 100)]
    pub bins: usize,
    /// Initial activity of every particle.
    #[arg(long, default_value_t = 0.0)]
    pub s0: f64,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
    pub n_list: Vec<usize>,
    /// Comparison time (ms).
    #[arg(long, default_value_t = 50.0)]
    pub t_eval: f64,
    /// Keep n_s fixed at `grid.n_s` instead of refining it with n.
    #[arg(long)]
    pub fixed_n_s: bool,
}

#[derive(Args, Debug)]
pub struct RelaxArgs {
    #[arg(long, default_value_t = 20)]
    pub runs: usize,
    #[arg(long, default_value_t = 512)]
    pub n_s: usize,
    #[arg(long, default_value_t = 3.0)]
    pub s_max: f64,
    #[arg(long, default_value_t = 300.0)]
    pub t_end: f64,
    /// Cells receiving mass initially.
    #[arg(long, default_value_t = 51)]
    pub seeded_cells: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum InitArg {
    RandomDeltas,
    PerturbedHomogeneous,
    StripeSeeded,
}

impl From<InitArg> for InitProtocol {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::RandomDeltas => InitProtocol::RandomDeltas,
            InitArg::PerturbedHomogeneous => InitProtocol::PerturbedHomogeneous,
            InitArg::StripeSeeded => InitProtocol::StripeSeeded,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DirectionArg {
    L2r,
    R2l,
}

impl From<DirectionArg> for Direction {
    fn from(a: DirectionArg) -> Self {
        match a {
            DirectionArg::L2r => Direction::L2r,
            DirectionArg::R2l => Direction::R2l,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(dir) = cli.output_dir {
        config.output_dir = dir;
    }
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::Config("--threads: must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let mut out = output::Outputs::create(&config.output_dir)?;
    out.write_text("config.toml", "config", &config.to_toml())?;
    let result = match &cli.command {
        Command::Stationary(a) => commands::stationary(&config, a, &mut out),
        Command::Stability(a) => commands::stability(&config, a, &mut out),
        Command::Simulate(a) => commands::simulate(&config, a, &mut out),
        Command::Bifurcate(a) => commands::bifurcate(&config, a, &mut out),
        Command::Replay(a) => commands::replay(&config, a, &mut out),
        Command::Particles(a) => commands::particles(&config, a, &mut out),
        Command::Refine(a) => commands::refine(&config, a, &mut out),
        Command::Relax(a) => commands::relax(&config, a, &mut out),
    };
    let manifest = out.finish();
    result.and(manifest.map_err(CliError::from))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gridfield: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
