//! `gridverify` command-line front end.
//!
//! Every command writes a JSON report (to `--output` or stdout). Failures
//! also produce a JSON report with a machine-readable `code`; exit status is
//! 0 on success, 2 for bad input and 3 when a solver gives up.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use gridverify::eval::{
    compare_topologies, format_records_csv, format_roc_csv, format_summary_csv, inverse_covariance_topology,
    monte_carlo, random_feasible_topology, roc_curve, summarize, switchable_mask, MonteCarloConfig, Scheme,
    VerificationMetrics,
};
use gridverify::io::{read_grid, read_priors, read_stats, read_status, read_text, read_voltages, write_file};
use gridverify::pipeline::{verify_map, verify_ml, MapConfig, VerifyConfig};
use gridverify::round::RoundingMethod;
use gridverify::solve::{ConvexSolver, SolverResult};
use gridverify::stats::{sample_covariance, simulate_voltages};
use gridverify::{Error, GridModel, Mode, ModelKind, VoltageDataset};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(
    name = "gridverify",
    version,
    about = "Verify which lines of a distribution grid are energized"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize voltage magnitudes for a known topology.
    Simulate(SimulateArgs),
    /// Maximum-likelihood topology verification.
    Verify(VerifyArgs),
    /// Maximum-a-posteriori verification with per-line priors.
    VerifyMap(VerifyMapArgs),
    /// Seeded Monte-Carlo evaluation on random topologies.
    Montecarlo(MonteCarloArgs),
    /// Reference schemes: random admissible topology and inverse covariance.
    Baselines(BaselinesArgs),
}

#[derive(Args)]
struct Common {
    /// Seed for every random choice; falls back to GRIDVERIFY_SEED.
    #[arg(long, env = "GRIDVERIFY_SEED", default_value_t = 0)]
    seed: u64,
    /// JSON report path (stdout when absent).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Leave the timestamp and wall-clock fields out of all outputs.
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Args)]
struct Inputs {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    stats: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Radial,
    Meshed,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Detailed,
    Simplified,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Pgd,
    Fw,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoundingArg {
    Topl,
    Forest,
    Bernoulli,
}

#[derive(Args)]
struct SolverFlags {
    /// Step size μ (defaults depend on grid size).
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Line status CSV (`line_id,status`) of the true topology.
    #[arg(long)]
    status: PathBuf,
    /// Number of voltage differences T; T+1 rows are written.
    #[arg(long, short = 't')]
    samples: usize,
    #[arg(long, value_enum, default_value = "radial")]
    mode: ModeArg,
    /// Voltage CSV to write; the manifest goes next to it as `<stem>.manifest.json`.
    #[arg(long)]
    voltages: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    voltages: PathBuf,
    #[arg(long, value_enum, default_value = "detailed")]
    model: ModelArg,
    #[arg(long, value_enum, default_value = "radial")]
    mode: ModeArg,
    /// Relaxed solver; `fw` requires `--model simplified`. The detailed model
    /// always finishes with PGD.
    #[arg(long, value_enum)]
    solver: Option<SolverArg>,
    #[arg(long, value_enum, default_value = "forest")]
    rounding: RoundingArg,
    /// Number of energized lines L (defaults to the number of load buses).
    #[arg(long = "lines", visible_alias = "L")]
    lines: Option<usize>,
    /// Samples drawn by Bernoulli rounding.
    #[arg(long, default_value_t = 2000)]
    bernoulli_samples: usize,
    #[command(flatten)]
    solver_flags: SolverFlags,
    /// Optional true line status CSV; adds error metrics to the report.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Also write `line_id,b_relaxed,b_hat` to this CSV.
    #[arg(long)]
    table: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct VerifyMapArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    voltages: PathBuf,
    /// Prior CSV (`line_id,prior`); lines missing from it use the grid file
    /// prior or 0.5.
    #[arg(long)]
    priors: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "detailed")]
    model: ModelArg,
    #[arg(long, value_enum, default_value = "radial")]
    mode: ModeArg,
    /// Relaxed entries at or above this value are declared energized.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[command(flatten)]
    solver_flags: SolverFlags,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    table: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct MonteCarloArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, default_value_t = 30)]
    runs: usize,
    /// Comma-separated sample counts.
    #[arg(long, value_delimiter = ',', default_value = "10,50,200,500")]
    samples: Vec<usize>,
    /// Comma-separated schemes: ml_detailed, ml_simplified, map, random,
    /// inverse_covariance.
    #[arg(long, value_delimiter = ',', default_value = "ml_detailed,random")]
    schemes: Vec<Scheme>,
    /// Lines added to each random spanning forest.
    #[arg(long, default_value_t = 0)]
    extra_lines: usize,
    #[arg(long, value_enum, default_value = "radial")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "forest")]
    rounding: RoundingArg,
    /// Use the ensemble covariance instead of simulated samples.
    #[arg(long)]
    asymptotic: bool,
    #[arg(long)]
    priors: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Directory for records.csv, summary.csv and roc.csv.
    #[arg(long)]
    output_dir: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BaselinesArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    voltages: PathBuf,
    #[arg(long = "lines", visible_alias = "L")]
    lines: Option<usize>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Radial => Mode::Radial,
            ModeArg::Meshed => Mode::Meshed,
        }
    }
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Detailed => ModelKind::Detailed,
            ModelArg::Simplified => ModelKind::Simplified,
        }
    }
}

impl From<RoundingArg> for RoundingMethod {
    fn from(r: RoundingArg) -> Self {
        match r {
            RoundingArg::Topl => RoundingMethod::TopL,
            RoundingArg::Forest => RoundingMethod::SpanningForest,
            RoundingArg::Bernoulli => RoundingMethod::Bernoulli,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::StepSizeCollapse { .. } => 3,
        _ => 2,
    }
}

fn error_code(e: &Error) -> &'static str {
    match e {
        Error::InvalidGrid(_) => "invalid_grid",
        Error::LengthMismatch { .. } => "length_mismatch",
        Error::SingularTopology => "singular_topology",
        Error::SingularSigmaAlpha => "singular_sigma_alpha",
        Error::InsufficientData(_) => "insufficient_data",
        Error::StepSizeCollapse { .. } => "step_size_collapse",
        Error::DisconnectedInfrastructure => "disconnected_infrastructure",
        Error::InvalidInput(_) => "invalid_input",
        Error::Parse { .. } => "parse_error",
        Error::Io { .. } => "io_error",
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

fn stamp(report: &mut Value, common: &Common, started: Instant) {
    if common.no_timestamp {
        return;
    }
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    report["timestamp_unix"] = json!(now);
    report["wall_time_ms"] = json!(started.elapsed().as_secs_f64() * 1e3);
}

fn emit(report: &Value, output: Option<&Path>) -> gridverify::Result<()> {
    let mut report = report.clone();
    report["status"] = json!("ok");
    let text = serde_json::to_string_pretty(&report).expect("reports are plain JSON") + "\n";
    match output {
        Some(path) => write_file(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn per_line(grid: &GridModel, b: &DVector<f64>) -> Value {
    Value::Object(grid.lines().iter().map(|l| (l.label.clone(), json!(b[l.id]))).collect())
}

fn metrics_json(m: &VerificationMetrics) -> Value {
    json!({
        "line_errors": m.line_errors,
        "error_probability": m.error_probability,
        "true_positive_rate": m.true_positive_rate,
        "false_positive_rate": m.false_positive_rate,
    })
}

fn solver_json(r: &SolverResult) -> Value {
    json!({
        "objective": r.objective,
        "iterations": r.iterations_used,
        "converged": r.converged,
        "grad_norm_final": r.grad_norm_final,
        "stationarity_residual": r.stationarity_residual,
    })
}

fn truth_metrics(grid: &GridModel, truth: Option<&PathBuf>, b_hat: &DVector<f64>) -> gridverify::Result<Value> {
    match truth {
        Some(path) => {
            let b_true = read_status(path, grid)?;
            Ok(metrics_json(&compare_topologies(
                b_hat,
                &b_true,
                &switchable_mask(grid),
            )?))
        }
        None => Ok(Value::Null),
    }
}

fn line_table(grid: &GridModel, relaxed: &DVector<f64>, b_hat: &DVector<f64>) -> String {
    let mut out = String::from("line_id,b_relaxed,b_hat\n");
    for l in grid.lines() {
        out.push_str(&format!("{},{},{}\n", l.label, relaxed[l.id], b_hat[l.id]));
    }
    out
}

fn load_dataset(grid: &GridModel, path: &Path) -> gridverify::Result<VoltageDataset> {
    sample_covariance(&read_voltages(path, grid)?)
}

fn target_lines(grid: &GridModel, lines: Option<usize>) -> gridverify::Result<usize> {
    let total = lines.unwrap_or(grid.n());
    if total == 0 || total > grid.num_lines() {
        return Err(invalid(format!("--L {total} must lie in 1..={}", grid.num_lines())));
    }
    Ok(total)
}

fn apply_solver_flags(cfg: &mut gridverify::solve::SolverConfig, flags: &SolverFlags) {
    if let Some(step) = flags.step {
        cfg.step_size = step;
    }
    if let Some(n) = flags.max_iters {
        cfg.max_iters = n;
    }
    if let Some(tol) = flags.tol {
        cfg.tol = tol;
    }
}

fn simulate(args: &SimulateArgs) -> gridverify::Result<()> {
    let started = Instant::now();
    let grid = read_grid(&args.inputs.grid)?;
    let stats_text = read_text(&args.inputs.stats)?;
    let stats = read_stats(&args.inputs.stats, &grid)?;
    let b_true = read_status(&args.status, &grid)?;
    if args.samples == 0 {
        return Err(invalid("--samples must be positive"));
    }
    let v = simulate_voltages(&grid, &b_true, &stats, args.samples, args.common.seed, args.mode.into())?;
    write_file(&args.voltages, gridverify::io::format_voltages(&grid, &v).as_bytes())?;

    let mut manifest = json!({
        "command": "simulate",
        "voltages": args.voltages.display().to_string(),
        "seed": args.common.seed,
        "samples": args.samples,
        "mode": Mode::from(args.mode),
        "b_true": per_line(&grid, &b_true),
        "stats_sha256": hex_digest(stats_text.as_bytes()),
    });
    stamp(&mut manifest, &args.common, started);
    emit(&manifest, Some(&args.voltages.with_extension("manifest.json")))?;
    emit(&manifest, args.common.output.as_deref())
}

fn verify(args: &VerifyArgs) -> gridverify::Result<()> {
    let started = Instant::now();
    let grid = read_grid(&args.inputs.grid)?;
    let stats = read_stats(&args.inputs.stats, &grid)?;
    let dataset = load_dataset(&grid, &args.voltages)?;
    let total = target_lines(&grid, args.lines)?;

    let model = ModelKind::from(args.model);
    let solver = match (args.solver, model) {
        (Some(SolverArg::Fw), ModelKind::Detailed) => {
            return Err(invalid(
                "--solver fw needs --model simplified (the detailed objective is not convex)",
            ))
        }
        (Some(SolverArg::Pgd), ModelKind::Simplified) => ConvexSolver::Pgd,
        _ => ConvexSolver::Fw,
    };
    let mut cfg = VerifyConfig {
        model,
        mode: args.mode.into(),
        convex_solver: solver,
        rounding: args.rounding.into(),
        bernoulli_samples: args.bernoulli_samples,
        ..VerifyConfig::for_grid(&grid)
    }
    .with_total_lines(total)
    .with_seed(args.common.seed);
    apply_solver_flags(&mut cfg.convex, &args.solver_flags);
    apply_solver_flags(&mut cfg.detailed, &args.solver_flags);

    let v = verify_ml(&grid, &stats, &dataset, &cfg)?;
    let relaxed = &v.relaxed().b_relaxed;
    let mut report = json!({
        "command": "verify",
        "model": model,
        "solver": match solver { ConvexSolver::Fw => "fw", ConvexSolver::Pgd => "pgd" },
        "rounding": v.rounding.method,
        "lines_target": total,
        "samples": dataset.t(),
        "seed": args.common.seed,
        "b_hat": per_line(&grid, v.b_hat()),
        "b_relaxed": per_line(&grid, relaxed),
        "objective_relaxed": v.objective_relaxed,
        "objective_binary": v.rounding.objective_at_binary,
        "rounding_feasible": v.rounding.feasible,
        "convex_stage": solver_json(&v.convex),
        "detailed_stage": v.detailed.as_ref().map_or(Value::Null, solver_json),
        "metrics": truth_metrics(&grid, args.truth.as_ref(), v.b_hat())?,
    });
    if let Some(path) = &args.table {
        write_file(path, line_table(&grid, relaxed, v.b_hat()).as_bytes())?;
    }
    stamp(&mut report, &args.common, started);
    emit(&report, args.common.output.as_deref())
}

fn verify_map_cmd(args: &VerifyMapArgs) -> gridverify::Result<()> {
    let started = Instant::now();
    let grid = read_grid(&args.inputs.grid)?;
    let stats = read_stats(&args.inputs.stats, &grid)?;
    let dataset = load_dataset(&grid, &args.voltages)?;
    let priors = read_priors(args.priors.as_deref(), &grid)?;
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(invalid("--threshold must lie in [0, 1]"));
    }
    let mut cfg = MapConfig {
        model: args.model.into(),
        mode: args.mode.into(),
        threshold: args.threshold,
        ..MapConfig::for_grid(&grid, dataset.t())
    };
    cfg.solver.seed = args.common.seed;
    apply_solver_flags(&mut cfg.solver, &args.solver_flags);

    let m = verify_map(&grid, &stats, &dataset, &priors, &cfg)?;
    let mut report = json!({
        "command": "verify-map",
        "model": cfg.model,
        "threshold": args.threshold,
        "samples": dataset.t(),
        "seed": args.common.seed,
        "b_hat": per_line(&grid, &m.b_hat),
        "b_relaxed": per_line(&grid, &m.b_relaxed),
        "objective_relaxed": m.objective_relaxed,
        "objective_binary": m.objective_binary,
        "free_lines": m.free_lines.iter().map(|&l| grid.lines()[l].label.clone()).collect::<Vec<_>>(),
        "solver": solver_json(&m.result),
        "metrics": truth_metrics(&grid, args.truth.as_ref(), &m.b_hat)?,
    });
    if let Some(path) = &args.table {
        write_file(path, line_table(&grid, &m.b_relaxed, &m.b_hat).as_bytes())?;
    }
    stamp(&mut report, &args.common, started);
    emit(&report, args.common.output.as_deref())
}

fn montecarlo(args: &MonteCarloArgs) -> gridverify::Result<()> {
    let started = Instant::now();
    let grid = read_grid(&args.inputs.grid)?;
    let stats = read_stats(&args.inputs.stats, &grid)?;
    if args.runs == 0 {
        return Err(invalid("--runs must be positive"));
    }
    let mut cfg = MonteCarloConfig {
        runs: args.runs,
        t_grid: args.samples.clone(),
        schemes: args.schemes.clone(),
        extra_lines: args.extra_lines,
        seed: args.common.seed,
        jobs: args.jobs,
        asymptotic: args.asymptotic,
        priors: read_priors(args.priors.as_deref(), &grid)?,
        ..MonteCarloConfig::for_grid(&grid)
    };
    cfg.verify.mode = args.mode.into();
    cfg.verify.rounding = args.rounding.into();
    cfg.map.mode = args.mode.into();
    if grid.n() + args.extra_lines > grid.num_lines() {
        return Err(invalid("--extra-lines exceeds the available lines"));
    }

    let result = monte_carlo(&grid, &stats, &cfg)?;
    let timed = !args.common.no_timestamp;
    let summary = summarize(&result.records);
    let roc = roc_curve(&result.roc);
    let dir = &args.output_dir;
    write_file(
        &dir.join("records.csv"),
        format_records_csv(&result.records, timed).as_bytes(),
    )?;
    write_file(&dir.join("summary.csv"), format_summary_csv(&summary, timed).as_bytes())?;
    if !roc.is_empty() {
        write_file(&dir.join("roc.csv"), format_roc_csv(&roc).as_bytes())?;
    }

    let mut report = json!({
        "command": "montecarlo",
        "runs": args.runs,
        "samples": args.samples,
        "schemes": args.schemes.iter().map(|s| s.name()).collect::<Vec<_>>(),
        "seed": args.common.seed,
        "failed_runs": result.records.iter().filter(|r| r.error.is_some()).count(),
        "summary": summary.iter().map(|r| json!({
            "scheme": r.scheme.name(),
            "T": r.t,
            "runs_ok": r.runs_ok,
            "error_probability": r.mean_error_probability,
            "tpr": r.mean_tpr,
            "fpr": r.mean_fpr,
        })).collect::<Vec<_>>(),
        "output_dir": dir.display().to_string(),
    });
    stamp(&mut report, &args.common, started);
    emit(&report, args.common.output.as_deref())
}

fn baselines(args: &BaselinesArgs) -> gridverify::Result<()> {
    let started = Instant::now();
    let grid = read_grid(&args.inputs.grid)?;
    let dataset = load_dataset(&grid, &args.voltages)?;
    let total = target_lines(&grid, args.lines)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.common.seed);
    let random = random_feasible_topology(&grid, total, &mut rng)?;
    let inverse = inverse_covariance_topology(&grid, dataset.sample_cov(), total)?;
    let mut report = json!({
        "command": "baselines",
        "lines_target": total,
        "samples": dataset.t(),
        "seed": args.common.seed,
        "random": {
            "b_hat": per_line(&grid, &random),
            "metrics": truth_metrics(&grid, args.truth.as_ref(), &random)?,
        },
        "inverse_covariance": {
            "b_hat": per_line(&grid, &inverse),
            "metrics": truth_metrics(&grid, args.truth.as_ref(), &inverse)?,
        },
    });
    stamp(&mut report, &args.common, started);
    emit(&report, args.common.output.as_deref())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let report = json!({ "status": "error", "code": "usage", "message": e.to_string().trim() });
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    let outcome = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Verify(a) => verify(a),
        Command::VerifyMap(a) => verify_map_cmd(a),
        Command::Montecarlo(a) => montecarlo(a),
        Command::Baselines(a) => baselines(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = json!({ "status": "error", "code": error_code(&e), "message": e.to_string() });
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
