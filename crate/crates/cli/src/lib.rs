//! The `damm` command: learn, extend, roll out and benchmark stable motion
//! policies from demonstration files.

pub mod model_file;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use damm_ds::eval::benchmark::{mean_std, EvalReport};
use damm_ds::eval::io::{load_trajectories, write_trace_csv, TrajectoryFormat};
use damm_ds::eval::{benchmark, edot, rmse, BenchmarkConfig, Method};
use damm_ds::lpvds::{rollout, Integrator, RolloutConfig, RolloutFailure};
use damm_ds::pipeline::{learn, learn_incremental};
use damm_ds::{Demonstration, Error, LearnConfig, PriorOptions, Result, SamplerConfig};
use nalgebra::DVector;
use serde_json::json;

use model_file::{write_atomic, ModelFile};

#[derive(Debug, Parser)]
#[command(name = "damm", version, about = "Learn stable dynamical systems from demonstrations")]
pub struct Cli {
    /// Worker threads (defaults to the available parallelism).
    #[arg(long, global = true, env = "DAMM_WORKERS")]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cluster a demonstration with DAMM, fit LPV-DS, write a model file.
    Learn(LearnArgs),
    /// Add a new batch of demonstrations to an existing model.
    Incremental(IncrementalArgs),
    /// Integrate a model and write the trace as CSV.
    Rollout(RolloutArgs),
    /// Learn and score one or more methods over several seeds.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for TrajectoryFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => TrajectoryFormat::Csv,
            FormatArg::Json => TrajectoryFormat::Json,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Input format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Sampling period, used to differentiate positions when the file has
    /// no velocity columns.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Attractor as comma-separated coordinates (defaults to the mean final
    /// position).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub attractor: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Args)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sampler iterations.
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    /// Restricted Gibbs scans used to build each split/merge launch state.
    #[arg(long, default_value_t = 5)]
    pub launch_scans: usize,
}

#[derive(Debug, Clone, Args)]
pub struct PriorArgs {
    /// Dirichlet process concentration.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Prior degrees of freedom of the position covariance (default d + 3).
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub kappa: f64,
    /// Scale of the data variance used as the prior position covariance.
    #[arg(long, default_value_t = 0.2)]
    pub psi_scale: f64,
    /// Prior mean of the directional variance in rad^2.
    #[arg(long, default_value_t = 0.1)]
    pub dir_var_prior: f64,
    /// Speed under which a sample keeps the previous direction (default: a
    /// millionth of the median speed).
    #[arg(long)]
    pub velocity_floor: Option<f64>,
}

impl PriorArgs {
    fn options(&self) -> PriorOptions {
        PriorOptions {
            psi_scale: self.psi_scale,
            nu: self.nu,
            kappa: self.kappa,
            dir_var_prior: self.dir_var_prior,
            alpha: self.alpha,
            ..PriorOptions::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct LearnArgs {
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub prior: PriorArgs,
    /// Store wall-clock timings in the model file (makes it run dependent).
    #[arg(long)]
    pub record_timings: bool,
}

#[derive(Debug, Args)]
pub struct IncrementalArgs {
    /// Model file written by `learn` or `incremental`.
    #[arg(long)]
    pub model: PathBuf,
    /// Data the model was learned from.
    #[arg(long)]
    pub old: PathBuf,
    /// New demonstrations.
    #[arg(long)]
    pub new: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long)]
    pub record_timings: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum IntegratorArg {
    Rk4,
    Euler,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Start state as comma-separated coordinates.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub start: Option<Vec<f64>>,
    /// Roll out from the first sample of every trajectory in this file
    /// when no start is given.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<FormatArg>,
    /// Trajectory CSV to write.
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub dt: f64,
    #[arg(long, default_value_t = 10_000)]
    pub steps: usize,
    /// Stop once this close to the attractor.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    #[arg(long, value_enum, default_value_t = IntegratorArg::Rk4)]
    pub integrator: IntegratorArg,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    pub input: PathBuf,
    /// Methods to run, comma separated: damm, gmm-p, gmm-pv.
    #[arg(long, value_delimiter = ',', default_value = "damm")]
    pub method: Vec<String>,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub prior: PriorArgs,
    /// Rollout step for the DTW score (default: the data's sampling period).
    #[arg(long)]
    pub rollout_dt: Option<f64>,
}

/// Exit status for an error: 2 for numerical failures, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numerical(_) | Error::Degenerate(_) => 2,
        _ => 1,
    }
}

/// Parse arguments, run, and return the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(match cli.workers {
            Some(0) => return Err(Error::Usage("--workers must be at least 1".into())),
            Some(n) => n,
            None => 0,
        })
        .build()
        .map_err(|e| Error::Usage(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Learn(a) => cmd_learn(&a),
        Command::Incremental(a) => cmd_incremental(&a),
        Command::Rollout(a) => cmd_rollout(&a),
        Command::Benchmark(a) => cmd_benchmark(&a),
    })
}

fn load(path: &Path, data: &DataArgs) -> Result<Demonstration> {
    let mut demo = load_trajectories(path, data.format.map(Into::into), data.dt)?;
    if let Some(a) = &data.attractor {
        demo.set_attractor(DVector::from_column_slice(a))?;
    }
    Ok(demo)
}

fn sampler_config(seed: u64, iters: usize, launch_scans: usize) -> SamplerConfig {
    SamplerConfig {
        iterations: iters,
        launch_scans,
        seed,
        ..SamplerConfig::default()
    }
}

fn print_line(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{value}")?;
    Ok(())
}

fn summary(learned: &damm_ds::Learned) -> Result<serde_json::Value> {
    Ok(json!({
        "K": learned.state.num_components(),
        "N": learned.demo.len(),
        "J": learned.fit.objective,
        "J_init": learned.fit.objective_init,
        "fit_iterations": learned.fit.iterations,
        "fit_converged": learned.fit.converged,
        "rmse": rmse(&learned.lpvds, &learned.demo)?,
        "edot": edot(&learned.lpvds, &learned.demo)?,
        "wall_time_cluster_s": learned.wall_time_cluster_s,
        "wall_time_fit_s": learned.wall_time_fit_s,
    }))
}

pub fn cmd_learn(args: &LearnArgs) -> Result<()> {
    let demo = load(&args.input, &args.data)?;
    let sampler = sampler_config(args.sampler.seed, args.sampler.iters, args.sampler.launch_scans);
    let config = LearnConfig {
        prior: args.prior.options(),
        sampler: sampler.clone(),
        velocity_floor: args.prior.velocity_floor,
        ..LearnConfig::default()
    };
    let learned = learn(&demo, &config)?;
    let file = ModelFile::from_learned(&learned, &sampler, args.record_timings);
    write_atomic(&args.output, file.to_json()?.as_bytes())?;
    print_line(&summary(&learned)?)
}

pub fn cmd_incremental(args: &IncrementalArgs) -> Result<()> {
    let file = ModelFile::read(&args.model)?;
    let loaded = file.decode()?;
    let mut old = load_trajectories(&args.old, args.data.format.map(Into::into), args.data.dt)?;
    old.set_attractor(loaded.lpvds.attractor().clone())?;
    let new = load_trajectories(&args.new, args.data.format.map(Into::into), args.data.dt)?;
    if let Some(a) = &args.data.attractor {
        old.set_attractor(DVector::from_column_slice(a))?;
    }
    let sampler = sampler_config(args.seed, args.iters, loaded.launch_scans);
    let config = LearnConfig {
        sampler: sampler.clone(),
        ..LearnConfig::default()
    };
    let learned = learn_incremental(&old, &new, &loaded.state, &loaded.prior, loaded.velocity_floor, &config)?;
    let out = ModelFile::from_learned(&learned, &sampler, args.record_timings);
    write_atomic(&args.output, out.to_json()?.as_bytes())?;
    let mut s = summary(&learned)?;
    s["K_previous"] = json!(loaded.state.num_components());
    print_line(&s)
}

pub fn cmd_rollout(args: &RolloutArgs) -> Result<()> {
    let model = ModelFile::read(&args.model)?.decode()?.lpvds;
    let starts: Vec<DVector<f64>> = match (&args.start, &args.data) {
        (Some(s), _) => vec![DVector::from_column_slice(s)],
        (None, Some(path)) => {
            let demo = load_trajectories(path, args.format.map(Into::into), Some(args.dt))?;
            demo.trajectories().iter().map(|r| demo.position(r.start)).collect()
        }
        (None, None) => return Err(Error::Usage("give --start or --data".into())),
    };
    let mut config = RolloutConfig::new(args.dt, args.steps, args.tol);
    config.integrator = match args.integrator {
        IntegratorArg::Rk4 => Integrator::Rk4,
        IntegratorArg::Euler => Integrator::Euler,
    };
    let mut traces = Vec::with_capacity(starts.len());
    for s in &starts {
        match rollout(&model, s, &config) {
            Ok(t) => traces.push(t),
            Err(RolloutFailure::NonFinite(e)) => {
                return Err(Error::Numerical(format!("{e} (start {:?})", s.as_slice())))
            }
            Err(RolloutFailure::Invalid(e)) => return Err(e),
        }
    }
    let mut buf = Vec::new();
    write_trace_csv(&traces, &mut buf)?;
    write_atomic(&args.output, &buf)?;
    print_line(&json!({
        "converged": traces.iter().all(|t| t.converged),
        "trajectories": traces.iter().map(|t| json!({"steps": t.len() - 1, "converged": t.converged})).collect::<Vec<_>>(),
    }))
}

pub fn cmd_benchmark(args: &BenchmarkArgs) -> Result<()> {
    let methods: Vec<Method> = args.method.iter().map(|m| m.parse()).collect::<Result<_>>()?;
    if args.seeds == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()));
    }
    let demo = load(&args.input, &args.data)?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for &method in &methods {
        for seed in args.sampler.seed..args.sampler.seed + args.seeds {
            let learn = LearnConfig {
                prior: args.prior.options(),
                sampler: sampler_config(seed, args.sampler.iters, args.sampler.launch_scans),
                velocity_floor: args.prior.velocity_floor,
                ..LearnConfig::default()
            };
            let mut config = BenchmarkConfig::new(method, learn);
            config.rollout_dt = args.rollout_dt;
            reports.push(benchmark(&demo, &config)?);
        }
    }
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(&reports)?)?;
    writeln!(out, "{:<8} {:>18} {:>18} {:>18} {:>8}", "method", "rmse", "edot", "dtwd", "K")?;
    for &method in &methods {
        let rs: Vec<&EvalReport> = reports.iter().filter(|r| r.method == method).collect();
        let col = |f: fn(&EvalReport) -> f64| {
            let (m, s) = mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            format!("{m:.4} ± {s:.4}")
        };
        writeln!(
            out,
            "{:<8} {:>18} {:>18} {:>18} {:>8}",
            method.name(),
            col(|r| r.rmse),
            col(|r| r.edot),
            col(|r| r.dtwd),
            col(|r| r.k_final as f64)
        )?;
    }
    Ok(())
}
