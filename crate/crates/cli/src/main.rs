use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gridreserve::dispatch::{solve_baseline_with, BaselineOptions, DispatchError, DispatchSolution};
use gridreserve::dro::{build_ambiguity_set, label_spec, solve_dro, AmbiguityConfig, AmbiguitySet, DroError, SampleSet};
use gridreserve::events::{EventError, EventModel};
use gridreserve::netmodel::{load_case_with, CaseError, GridCase, LoadOptions};
use gridreserve::powerflow::FlowModel;
use gridreserve::robust::{
    feasibility_radius, solve_robust_with, tune_reserve_gain, DisturbanceSpec, RecoursePolicy, ReserveOptions,
    ReserveSchedule, RobustError,
};
use gridreserve::simharness::{pareto_csv, pareto_sweep, validate, GaussianSampler, ImbalanceSampler, SweepMethod};
use gridreserve::stochastic::{solve_chance_with, solve_cvar, GaussianModel, StochasticError};

#[derive(Parser)]
#[command(name = "gridreserve", version, about = "Reserve scheduling and resilience studies for distribution grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (default: available cores).
    #[arg(long, global = true, env = "GRIDRESERVE_THREADS")]
    threads: Option<usize>,
    /// Output directory; reports go to stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Ignore unknown keys in the case file.
    #[arg(long, global = true)]
    lenient: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Model {
    Linear,
    Socp,
}

impl From<Model> for FlowModel {
    fn from(m: Model) -> Self {
        match m {
            Model::Linear => FlowModel::Linear,
            Model::Socp => FlowModel::Socp,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Baseline,
    Robust,
    Chance,
    Dro,
    Cvar,
}

#[derive(Args)]
struct CaseArgs {
    #[arg(long)]
    case: PathBuf,
    #[arg(long, value_enum, default_value_t = Model::Linear)]
    model: Model,
}

#[derive(Subcommand)]
enum Command {
    /// Cost-minimal dispatch without reserves.
    Baseline {
        #[command(flatten)]
        case: CaseArgs,
        /// Also write the standard-form program listing.
        #[arg(long)]
        dump_lp: bool,
    },
    /// Reserves covering every vertex of a disturbance box.
    Robust {
        #[command(flatten)]
        case: CaseArgs,
        #[arg(long)]
        spec: PathBuf,
    },
    /// Reserves sized by a Gaussian chance constraint.
    Chance {
        #[command(flatten)]
        case: CaseArgs,
        #[arg(long)]
        gaussian: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    #[command(subcommand)]
    Dro(DroCommand),
    #[command(subcommand)]
    Verify(VerifyCommand),
    /// Monte-Carlo validation of one reserve method.
    Simulate(SimArgs),
    /// Cost versus resilience across a grid of risk levels.
    Pareto {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.05, 0.1, 0.2])]
        grid: Vec<f64>,
    },
    /// Operating mode per time window from an event catalog.
    Modes {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        events: PathBuf,
    },
}

#[derive(Subcommand)]
enum DroCommand {
    /// Certified ambiguity set from historical samples.
    BuildSet {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        rho: f64,
    },
    /// Reserves covering the ambiguity set built from the samples.
    Solve {
        #[command(flatten)]
        case: CaseArgs,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        rho: f64,
    },
}

#[derive(Subcommand)]
enum VerifyCommand {
    /// Per-direction feasibility radii around the nominal disturbance.
    Radius {
        #[command(flatten)]
        case: CaseArgs,
        #[arg(long)]
        spec: PathBuf,
        /// Restrict recourse to robust reserve bands instead of free redispatch.
        #[arg(long)]
        bands: bool,
    },
    /// Largest disturbance along one direction absorbed by a reserve gain.
    Gain {
        #[command(flatten)]
        case: CaseArgs,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        direction: usize,
    },
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[arg(long, value_enum)]
    method: Method,
    /// Event catalog driving the scenarios (takes precedence over --gaussian).
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long)]
    gaussian: Option<PathBuf>,
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    rho: f64,
    /// Chance-constraint level; defaults to --rho.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Bad input; maps to exit code 2.
#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(InputError(msg.into()))
}

fn is_input_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        if e.is::<InputError>() || e.is::<CaseError>() || e.is::<EventError>() || e.is::<std::io::Error>() {
            return true;
        }
        if let Some(e) = e.downcast_ref::<RobustError>() {
            return matches!(e, RobustError::Spec(_) | RobustError::VertexBudgetExceeded { .. });
        }
        if let Some(e) = e.downcast_ref::<DroError>() {
            return matches!(e, DroError::Samples(_) | DroError::Domain(_) | DroError::VertexBudgetExceeded { .. });
        }
        if let Some(e) = e.downcast_ref::<StochasticError>() {
            return !matches!(e, StochasticError::Robust(_));
        }
        if let Some(e) = e.downcast_ref::<DispatchError>() {
            return matches!(e, DispatchError::NegativeCost { .. });
        }
        false
    })
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Ok,
    /// Completed, but the checked property does not hold.
    Failed(String),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_input_error(&e) { 2 } else { 1 })
        }
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(input(format!("{name} must be in (0,1)")))
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_case(cli: &Cli, path: &Path) -> Result<GridCase> {
    Ok(load_case_with(path, LoadOptions { lenient: cli.lenient })?)
}

fn load_spec(path: &Path) -> Result<DisturbanceSpec> {
    Ok(DisturbanceSpec::from_json(&read(path)?)?)
}

fn load_samples(path: &Path) -> Result<SampleSet> {
    Ok(SampleSet::from_json(&read(path)?)?)
}

fn load_gaussian(path: &Path) -> Result<GaussianModel> {
    Ok(GaussianModel::from_json(&read(path)?)?)
}

fn reserve_opts(case: &CaseArgs) -> ReserveOptions {
    ReserveOptions { model: case.model.into(), ..ReserveOptions::default() }
}

/// Writes `contents` to `dir/name` through a temporary file in the same
/// directory, so readers never observe a partial report.
fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(dir.join(name)).map_err(|e| e.error)?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Emits one report: both forms to `--out`, or the selected form to stdout.
fn emit(cli: &Cli, stem: &str, json: &str, csv: &str) -> Result<()> {
    match &cli.out {
        Some(dir) => {
            write_atomic(dir, &format!("{stem}.json"), json)?;
            write_atomic(dir, &format!("{stem}.csv"), csv)
        }
        None => {
            let text = if cli.format == Format::Json { json } else { csv };
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct ReserveRun<'a> {
    method: &'static str,
    solution: &'a DispatchSolution,
    reserves: &'a ReserveSchedule,
}

fn emit_reserve_run(cli: &Cli, method: &'static str, sol: &DispatchSolution, sched: &ReserveSchedule) -> Result<()> {
    let json = to_json(&ReserveRun { method, solution: sol, reserves: sched });
    if let Some(dir) = &cli.out {
        write_atomic(dir, "solution.csv", &sol.to_csv())?;
    }
    emit(cli, method, &json, &sched.to_csv())
}

fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Baseline { case, dump_lp } => {
            let grid = load_case(cli, &case.case)?;
            let opts = BaselineOptions { model: case.model.into(), dump_lp: *dump_lp, ..BaselineOptions::default() };
            let run = solve_baseline_with(&grid, &opts)?;
            if let (Some(dir), Some(lp)) = (&cli.out, &run.program) {
                write_atomic(dir, "program.lp", lp)?;
            }
            emit(cli, "solution", &to_json(&run.solution), &run.solution.to_csv())?;
        }
        Command::Robust { case, spec } => {
            let grid = load_case(cli, &case.case)?;
            let spec = load_spec(spec)?;
            let (sol, sched) = solve_robust_with(&grid, &spec, &reserve_opts(case))?;
            emit_reserve_run(cli, "robust", &sol, &sched)?;
        }
        Command::Chance { case, gaussian, alpha } => {
            check_unit("alpha", *alpha)?;
            let grid = load_case(cli, &case.case)?;
            let model = load_gaussian(gaussian)?;
            let (sol, sched) = solve_chance_with(&grid, &model, *alpha, &reserve_opts(case))?;
            emit_reserve_run(cli, "chance", &sol, &sched)?;
        }
        Command::Dro(DroCommand::BuildSet { samples, rho }) => {
            check_unit("rho", *rho)?;
            let set = build_ambiguity_set(&load_samples(samples)?, &AmbiguityConfig::new(*rho))?;
            emit(cli, "ambiguity_set", &to_json(&set), &vertices_csv(&set))?;
        }
        Command::Dro(DroCommand::Solve { case, samples, rho }) => {
            check_unit("rho", *rho)?;
            let grid = load_case(cli, &case.case)?;
            let set = build_ambiguity_set(&load_samples(samples)?, &AmbiguityConfig::new(*rho))?;
            let spec = label_spec(&grid, &set)?;
            let (sol, sched) = solve_dro(&grid, &set, &spec)?;
            emit_reserve_run(cli, "dro", &sol, &sched)?;
        }
        Command::Verify(VerifyCommand::Radius { case, spec, bands }) => {
            let grid = load_case(cli, &case.case)?;
            let spec = load_spec(spec)?;
            spec.validate(&grid)?;
            let (sol, sched) = if *bands {
                solve_robust_with(&grid, &spec, &reserve_opts(case))?
            } else {
                let sol = solve_baseline_with(&grid, &BaselineOptions { model: case.model.into(), ..Default::default() })?
                    .solution;
                let sched = ReserveSchedule::from_solution(&grid, &sol);
                (sol, sched)
            };
            let policy = if *bands {
                RecoursePolicy::Bands(&sched)
            } else {
                RecoursePolicy::Free { schedule: &sched, allow_load_shed: false }
            };
            let rep = feasibility_radius(&grid, &sol, &spec, &spec.nominal(), None, policy)?;
            let mut csv = String::from("direction,r\n");
            for d in &rep.per_direction {
                let dir: Vec<String> = d.dir.iter().map(|v| v.to_string()).collect();
                csv.push_str(&format!("{},{}\n", dir.join(" "), d.r));
            }
            emit(cli, "radius", &to_json(&rep), &csv)?;
        }
        Command::Verify(VerifyCommand::Gain { case, spec, direction }) => {
            let grid = load_case(cli, &case.case)?;
            let spec = load_spec(spec)?;
            if *direction >= spec.len() {
                return Err(input(format!("direction {direction} out of range for {} dimensions", spec.len())));
            }
            let (sol, sched) = solve_robust_with(&grid, &spec, &reserve_opts(case))?;
            let tuning = tune_reserve_gain(&grid, &sol, &sched, &spec, *direction)?;
            let mut csv = String::from("control,delta_u\n");
            for (name, du) in tuning.control_names.iter().zip(&tuning.delta_u) {
                csv.push_str(&format!("{name},{du}\n"));
            }
            emit(cli, "gain", &to_json(&tuning), &csv)?;
        }
        Command::Simulate(sim) => {
            check_unit("rho", sim.rho)?;
            let alpha = sim.alpha.unwrap_or(sim.rho);
            check_unit("alpha", alpha)?;
            let grid = load_case(cli, &sim.case.case)?;
            let sampler = load_sampler(&grid, sim)?;
            let (sol, sched) = solve_method(&grid, sim, alpha)?;
            let rep = validate(&grid, &sol, &sched, sampler.as_ref(), sim.n, sim.seed, sim.rho);
            emit(cli, "validation", &rep.to_json_string(), &rep.to_csv())?;
            if !rep.pass {
                return Ok(Outcome::Failed(format!(
                    "validation failed: violation probability {} exceeds {}",
                    rep.violation_probability, rep.rho
                )));
            }
        }
        Command::Pareto { sim, grid: values } => {
            if values.is_empty() {
                bail!(InputError("grid must not be empty".into()));
            }
            if sim.method != Method::Robust {
                for &v in values {
                    check_unit("grid value", v)?;
                }
            }
            let case = load_case(cli, &sim.case.case)?;
            let sampler = load_sampler(&case, sim)?;
            let spec;
            let model;
            let samples;
            let method = match sim.method {
                Method::Robust => {
                    spec = load_spec(need(&sim.spec, "--spec")?)?;
                    SweepMethod::Robust(&spec)
                }
                Method::Chance => {
                    model = load_gaussian(need(&sim.gaussian, "--gaussian")?)?;
                    SweepMethod::Chance(&model)
                }
                Method::Dro => {
                    samples = load_samples(need(&sim.samples, "--samples")?)?;
                    SweepMethod::Dro(&samples)
                }
                Method::Cvar => {
                    samples = load_samples(need(&sim.samples, "--samples")?)?;
                    SweepMethod::Cvar(&samples)
                }
                Method::Baseline => return Err(input("pareto needs a reserve method")),
            };
            let points = pareto_sweep(&case, &method, values, sampler.as_ref(), sim.n, sim.seed);
            for p in points.iter().filter(|p| p.error.is_some()) {
                eprintln!("warning: grid point {} failed: {}", p.rho, p.error.as_deref().unwrap_or_default());
            }
            emit(cli, "pareto", &to_json(&points), &pareto_csv(&points))?;
        }
        Command::Modes { case, events } => {
            let grid = load_case(cli, case)?;
            let model = EventModel::load(&grid, events)?;
            let mut csv = String::from("from,to,mode,value\n");
            for w in &model.schedule.windows {
                csv.push_str(&format!("{},{},{},{}\n", w.from, w.to, w.mode, w.value));
            }
            emit(cli, "modes", &to_json(&model.schedule), &csv)?;
        }
    }
    Ok(Outcome::Ok)
}

fn need<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    path.as_ref().ok_or_else(|| input(format!("{flag} is required for this method")))
}

fn vertices_csv(set: &AmbiguitySet) -> String {
    let labels: Vec<String> =
        (0..set.mean.len()).map(|j| set.labels.get(j).cloned().unwrap_or_else(|| format!("w{j}"))).collect();
    let mut out = format!("vertex,{}\n", labels.join(","));
    for (i, v) in set.vertices.iter().enumerate() {
        let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        out.push_str(&format!("{i},{}\n", vals.join(",")));
    }
    out
}

fn load_sampler(case: &GridCase, sim: &SimArgs) -> Result<Box<dyn ImbalanceSampler>> {
    if let Some(path) = &sim.events {
        return Ok(Box::new(EventModel::load(case, path)?));
    }
    if let Some(path) = &sim.gaussian {
        return Ok(Box::new(GaussianSampler::new(load_gaussian(path)?)?));
    }
    Err(input("scenarios need --events or --gaussian"))
}

fn solve_method(case: &GridCase, sim: &SimArgs, alpha: f64) -> Result<(DispatchSolution, ReserveSchedule)> {
    let opts = reserve_opts(&sim.case);
    Ok(match sim.method {
        Method::Baseline => {
            let sol = solve_baseline_with(case, &BaselineOptions { model: opts.model, ..Default::default() })?.solution;
            let sched = ReserveSchedule::from_solution(case, &sol);
            (sol, sched)
        }
        Method::Robust => solve_robust_with(case, &load_spec(need(&sim.spec, "--spec")?)?, &opts)?,
        Method::Chance => solve_chance_with(case, &load_gaussian(need(&sim.gaussian, "--gaussian")?)?, alpha, &opts)?,
        Method::Dro => {
            let set = build_ambiguity_set(&load_samples(need(&sim.samples, "--samples")?)?, &AmbiguityConfig::new(sim.rho))?;
            let spec = label_spec(case, &set)?;
            solve_dro(case, &set, &spec)?
        }
        Method::Cvar => {
            let samples = load_samples(need(&sim.samples, "--samples")?)?;
            let agg: Vec<f64> = samples.samples.iter().map(|s| s.iter().sum()).collect();
            solve_cvar(case, &agg, sim.rho)?
        }
    })
}
