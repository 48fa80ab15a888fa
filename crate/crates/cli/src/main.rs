//! `saedesign`: allocate, select, report, simulate and generate from a
//! frame or an experiment preset.
//!
//! Exit codes: 0 optimal, 2 infeasible, 3 iteration cap or divergence,
//! 1 for any other error (reported as JSON on stderr).

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use saedesign::allocate::{Initialization, SolverKind};
use saedesign::estimator::{monte_carlo_mse, McConfig};
use saedesign::frame::{generate_population, load_frame, write_frame, FrameSchema, SyntheticSpec};
use saedesign::presets::{self, Preset};
use saedesign::report::{report_table, write_convergence};
use saedesign::sampler::{self, ssrswor_select, CubeOptions};
use saedesign::{AllocationResult, DesignProblem, Error, ProblemSpec, Status, UnitFrame};

#[derive(Parser)]
#[command(name = "saedesign", version, about = "Minimum-cost sample designs for small-area estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the allocation problem; writes allocation.json and trace.csv.
    Allocate(AllocateArgs),
    /// Draw a sample realizing an allocation; writes sample.csv and manifest.json.
    Select(SelectArgs),
    /// Class summary against the proportional allocation; writes report.csv and convergence.csv.
    Report(ReportArgs),
    /// Monte Carlo check of the MSE; writes simulate.json.
    Simulate(SimulateArgs),
    /// Write a preset's synthetic frame as frame.csv and schema.json.
    Generate(GenerateArgs),
}

#[derive(Args, Clone)]
struct Input {
    #[arg(long, value_enum)]
    preset: Option<PresetName>,
    #[arg(long, requires = "schema")]
    frame: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Problem JSON; overrides the preset's.
    #[arg(long)]
    problem: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PresetName {
    Exp1,
    Exp2,
    Exp3,
    Exp4,
    Infeasible,
}

impl PresetName {
    fn key(self) -> &'static str {
        match self {
            PresetName::Exp1 => "exp1",
            PresetName::Exp2 => "exp2",
            PresetName::Exp3 => "exp3",
            PresetName::Exp4 => "exp4",
            PresetName::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Solver {
    Direct,
    FixedPoint,
    CobylaCheck,
}

impl From<Solver> for SolverKind {
    fn from(s: Solver) -> Self {
        match s {
            Solver::Direct => SolverKind::Direct,
            Solver::FixedPoint => SolverKind::FixedPoint,
            Solver::CobylaCheck => SolverKind::CobylaCheck,
        }
    }
}

#[derive(Args)]
struct SolverArgs {
    /// Defaults to the preset's solver, or fixed-point.
    #[arg(long, value_enum)]
    solver: Option<Solver>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Args)]
struct AllocateArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Method {
    /// Balanced selection (two-stage designs select clusters first).
    Cube,
    Ssrswor,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    input: Input,
    /// Defaults to allocation.json under --out.
    #[arg(long)]
    allocation: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "cube")]
    method: Method,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    input: Input,
    #[arg(long)]
    allocation: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    input: Input,
    /// Synthetic population JSON; overrides the preset's.
    #[arg(long)]
    population: Option<PathBuf>,
    #[arg(long)]
    allocation: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the fixed sample; defaults to --seed.
    #[arg(long)]
    sample_seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    input: Input,
    #[arg(long)]
    population: Option<PathBuf>,
}

/// Frame, problem and (for presets) the population spec behind them.
struct Loaded {
    frame: UnitFrame,
    problem: ProblemSpec,
    preset: Option<Preset>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

fn load(input: &Input) -> anyhow::Result<Loaded> {
    let preset = input.preset.map(|p| presets::preset(p.key())).transpose()?;
    let frame = match (&input.frame, &preset) {
        (Some(path), _) => {
            let schema = FrameSchema::load(input.schema.as_ref().context("--frame needs --schema")?)?;
            load_frame(path, &schema)?
        }
        (None, Some(p)) => p.population()?.frame,
        (None, None) => bail!("give --preset or --frame with --schema"),
    };
    let problem = match (&input.problem, &preset) {
        (Some(path), _) => ProblemSpec::load(path)?,
        (None, Some(p)) => p.problem.clone(),
        (None, None) => bail!("give --problem or --preset"),
    };
    Ok(Loaded { frame, problem, preset })
}

fn design_problem(loaded: &Loaded, args: &SolverArgs) -> anyhow::Result<(DesignProblem, SolverKind)> {
    let mut spec = loaded.problem.clone();
    if let Some(e) = args.epsilon {
        spec.options.epsilon = e;
    }
    if let Some(m) = args.max_iter {
        spec.options.max_iterations = m;
    }
    let solver = args
        .solver
        .map(SolverKind::from)
        .or(loaded.preset.as_ref().map(|p| p.solver))
        .unwrap_or(SolverKind::FixedPoint);
    Ok((DesignProblem::from_frame(&loaded.frame, &spec)?, solver))
}

fn create(out: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("writing {}", path.display()))?))
}

fn write_json<T: serde::Serialize>(out: &Path, name: &str, value: &T) -> anyhow::Result<()> {
    let mut w = create(out, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

fn exit_code(status: Status) -> u8 {
    match status {
        Status::Optimal => 0,
        Status::Infeasible => 2,
        Status::MaxIterations | Status::Diverged => 3,
    }
}

fn allocation_path(out: &Path, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| out.join("allocation.json"))
}

fn cmd_allocate(args: &AllocateArgs) -> anyhow::Result<u8> {
    let loaded = load(&args.input)?;
    let (problem, solver) = design_problem(&loaded, &args.solver)?;
    let result = saedesign::solve(&problem, solver)?;
    let out = &args.input.out;
    write_json(out, "allocation.json", &result)?;
    result.write_trace(create(out, "trace.csv")?)?;
    if result.status == Status::Infeasible {
        eprintln!(
            "{}",
            json!({ "status": "infeasible", "violations": result.violations })
        );
    }
    println!(
        "{:?}: cost {:.3}, total n {:.3}, {} iterations",
        result.status, result.cost, result.total_n, result.iterations
    );
    Ok(exit_code(result.status))
}

fn cmd_select(args: &SelectArgs) -> anyhow::Result<u8> {
    let loaded = load(&args.input)?;
    let out = &args.input.out;
    let allocation = AllocationResult::load(allocation_path(out, &args.allocation))?;
    let draw = match args.method {
        Method::Cube => sampler::select(&loaded.frame, &allocation, args.seed, CubeOptions::default())?,
        Method::Ssrswor => ssrswor_select(&loaded.frame, &allocation, args.seed)?,
    };
    draw.write_csv(create(out, "sample.csv")?)?;
    draw.write_manifest(create(out, "manifest.json")?)?;
    println!("selected {} units (seed {})", draw.units.len(), args.seed);
    Ok(0)
}

fn start_label(start: &Initialization) -> String {
    match start {
        Initialization::Fraction(f) => format!("fraction={f}"),
        Initialization::Uniform(c) => format!("uniform={c}"),
        Initialization::Explicit(_) => "explicit".into(),
    }
}

fn cmd_report(args: &ReportArgs) -> anyhow::Result<u8> {
    let loaded = load(&args.input)?;
    let out = &args.input.out;
    let (mut problem, solver) = design_problem(&loaded, &args.solver)?;
    let path = allocation_path(out, &args.allocation);
    let allocation = if path.exists() {
        AllocationResult::load(&path)?
    } else {
        saedesign::solve(&problem, solver)?
    };
    let proportional = problem.proportional(allocation.total_n)?;
    let classed = loaded.frame.domains().partitions()[0].name.clone();
    let table = report_table(&allocation, &proportional, 0, &classed)?;
    table.write_csv(create(out, "report.csv")?)?;

    let starts = loaded.preset.as_ref().map(|p| p.starts.clone()).unwrap_or_default();
    let runs: Vec<(String, AllocationResult)> = if starts.is_empty() {
        // A direct solve has no iterations to show.
        let traced = if allocation.trace.is_empty() {
            saedesign::allocate::solve_fixed_point(&problem)?
        } else {
            allocation.clone()
        };
        vec![(start_label(&problem.options.init), traced)]
    } else {
        let mut runs = Vec::new();
        for s in &starts {
            problem.options.init = s.clone();
            runs.push((start_label(s), saedesign::allocate::solve_fixed_point(&problem)?));
        }
        runs
    };
    let refs: Vec<(String, &AllocationResult)> = runs.iter().map(|(l, r)| (l.clone(), r)).collect();
    write_convergence(&refs, create(out, "convergence.csv")?)?;
    for r in &table.rows {
        println!(
            "{:<3} {:<12} n_opt {:>9.2}  RAP {:>6}  Eff {:>6}",
            r.partition,
            r.label,
            r.n_opt,
            r.rap.map_or("-".into(), |v| format!("{v:.3}")),
            r.eff.map_or("-".into(), |v| format!("{v:.3}")),
        );
    }
    Ok(0)
}

fn population_spec(input: &Input, given: &Option<PathBuf>) -> anyhow::Result<SyntheticSpec> {
    match (given, input.preset) {
        (Some(path), _) => read_json(path),
        (None, Some(p)) => Ok(presets::preset(p.key())?.population),
        (None, None) => bail!("give --population or --preset"),
    }
}

fn cmd_simulate(args: &SimulateArgs) -> anyhow::Result<u8> {
    let spec = population_spec(&args.input, &args.population)?;
    let out = &args.input.out;
    let path = allocation_path(out, &args.allocation);
    let allocation = if path.exists() {
        AllocationResult::load(&path)?
    } else {
        let loaded = load(&args.input)?;
        let (problem, solver) = design_problem(&loaded, &SolverArgs { solver: None, epsilon: None, max_iter: None })?;
        saedesign::solve(&problem, solver)?.into_result()?
    };
    let config = McConfig {
        replicates: args.replicates,
        seed: args.seed,
        sample_seed: args.sample_seed,
    };
    let report = monte_carlo_mse(&spec, &allocation, &config)?;
    write_json(out, "simulate.json", &report)?;
    let ratios: Vec<f64> = report.eligible(30.0).filter_map(|e| e.ratio).collect();
    if !ratios.is_empty() {
        let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        println!("{} domains with n_d >= 30: MSE/(g1+g2) in [{lo:.3}, {hi:.3}]", ratios.len());
    }
    Ok(0)
}

fn cmd_generate(args: &GenerateArgs) -> anyhow::Result<u8> {
    let spec = population_spec(&args.input, &args.population)?;
    let pop = generate_population(&spec)?;
    let out = &args.input.out;
    let schema = write_frame(&pop.frame, create(out, "frame.csv")?)?;
    write_json(out, "schema.json", &schema)?;
    println!("{} units in {} domains", pop.frame.len(), pop.frame.domains().len());
    Ok(0)
}

/// The error chain joined with `: `, skipping causes their parent already quotes.
fn message(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if parts.last().map_or(true, |p| !p.ends_with(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn run(cli: &Cli) -> anyhow::Result<u8> {
    match &cli.command {
        Command::Allocate(a) => cmd_allocate(a),
        Command::Select(a) => cmd_select(a),
        Command::Report(a) => cmd_report(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Generate(a) => cmd_generate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "Usage", "message": e.to_string().trim() }));
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let (kind, code) = match e.downcast_ref::<Error>() {
                Some(err @ (Error::Infeasible(_) | Error::InfeasibleDomain(_))) => (err.kind(), 2),
                Some(err @ (Error::MaxIterations(_) | Error::DivergenceDetected(_))) => (err.kind(), 3),
                Some(err) => (err.kind(), 1),
                None => ("Io", 1),
            };
            eprintln!("{}", json!({ "error": kind, "message": message(&e) }));
            ExitCode::from(code)
        }
    }
}
