use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use symcov::fpca::{fit_pipeline, predict_scores, reconstruct};
use symcov::funcdata::{center_responses, load_long_table, write_long_table, Method, ModelSpec, PveBase};
use symcov::output;
use symcov::simlab::{generate_replicate, run_benchmark, truncation_tally, ScenarioSpec};
use symcov::SymCovError;

/// Symmetric covariance smoothing and FPCA for sparse multilevel functional data.
#[derive(Parser)]
#[command(name = "symcov", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit mean, covariances, eigenfunctions and scores.
    Fit(FitArgs),
    /// Predict scores for new curves with a saved model.
    Predict(PredictArgs),
    /// Write a simulated dataset with its truth.
    Simulate(SimulateArgs),
    /// Compare smoothing methods on simulated replicates.
    Bench(BenchArgs),
}

#[derive(Args)]
struct Threads {
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model specification JSON (default: independent curves, 10 basis functions).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// tri-constr | tri-constr-w | tri | whole
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    pve: Option<f64>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    diag_weight: Option<f64>,
    /// process | observation
    #[arg(long)]
    pve_base: Option<String>,
    #[arg(long)]
    dump_matrices: bool,
    #[arg(long)]
    weighted_refit: bool,
    #[command(flatten)]
    threads: Threads,
}

#[derive(Args)]
struct PredictArgs {
    /// model.json written by `fit`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    threads: Threads,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1)]
    scenario: u8,
    #[arg(long, default_value_t = 1)]
    setting: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of replicate datasets.
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 1)]
    scenario: u8,
    #[arg(long, default_value_t = 1)]
    setting: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    /// Comma separated list of methods.
    #[arg(long, default_value = "tri-constr,tri-constr-w,tri,whole")]
    methods: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    threads: Threads,
}

enum Failure {
    Error(SymCovError),
    NotConverged(String),
}

impl From<SymCovError> for Failure {
    fn from(e: SymCovError) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

fn kind(e: &SymCovError) -> &'static str {
    match e {
        SymCovError::Schema(_) => "schema",
        SymCovError::Parse { .. } => "parse",
        SymCovError::EmptyInput(_) => "empty_input",
        SymCovError::InvalidSpec(_) => "invalid_spec",
        SymCovError::Domain { .. } => "domain",
        SymCovError::Extrapolation { .. } => "extrapolation",
        SymCovError::Dimension(_) => "dimension",
        SymCovError::RankDeficient { .. } => "rank_deficient",
        SymCovError::NonFinite(_) => "non_finite",
        SymCovError::Degenerate(_) => "degenerate",
        SymCovError::Config(_) => "config",
        SymCovError::UndefinedMetric(_) => "undefined_metric",
        SymCovError::Io(_) => "io",
        SymCovError::Csv(_) => "csv",
        SymCovError::Json(_) => "json",
    }
}

fn report(f: Failure) -> ExitCode {
    let (code, body) = match f {
        Failure::Error(e) => {
            let code = if e.is_input_error() { 2 } else { 3 };
            let mut body = json!({ "kind": kind(&e), "message": e.to_string() });
            if let SymCovError::Parse { row, .. } = &e {
                body["row"] = json!(row);
            }
            (code, body)
        }
        Failure::NotConverged(msg) => (4, json!({ "kind": "not_converged", "message": msg })),
    };
    eprintln!("{}", json!({ "error": body, "exit_code": code }));
    ExitCode::from(code)
}

fn set_threads(t: &Threads) -> Result<(), Failure> {
    if let Some(n) = t.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| SymCovError::Config(e.to_string()))?;
    }
    Ok(())
}

fn read_table(path: &Path) -> Result<symcov::funcdata::ObservationTable, Failure> {
    Ok(load_long_table(BufReader::new(File::open(path)?), None, None)?)
}

fn cmd_fit(a: FitArgs) -> Result<(), Failure> {
    set_threads(&a.threads)?;
    let table = read_table(&a.data)?;
    let mut spec = match &a.model {
        Some(p) => ModelSpec::from_json(&fs::read_to_string(p)?)?,
        None => ModelSpec::independent(10),
    };
    if let Some(m) = &a.method {
        spec.method = Method::parse(m)?;
    }
    if let Some(v) = a.pve {
        spec.pve = v;
    }
    if let Some(v) = a.grid {
        spec.grid_size = v;
    }
    if let Some(v) = a.diag_weight {
        spec.diag_weight = v;
    }
    if let Some(v) = &a.pve_base {
        spec.pve_base = PveBase::parse(v)?;
    }
    spec.weighted_refit |= a.weighted_refit;
    let fit = fit_pipeline(&table, &spec)?;
    output::write_fit(&a.out, &fit, &table)?;
    if a.dump_matrices {
        output::dump_matrices(&a.out, &fit)?;
    }
    log::info!("wrote fit to {}", a.out.display());
    if !fit.model.fit.converged {
        return Err(Failure::NotConverged(format!(
            "smoothing parameter search stopped after {} iterations",
            fit.model.fit.iterations
        )));
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<(), Failure> {
    set_threads(&a.threads)?;
    let model = output::load_model(&a.model)?;
    let table = read_table(&a.data)?.with_domain(model.domain)?;
    model.spec.check_against(&table)?;
    let centered = center_responses(&table, &model.mean)?;
    let scores = predict_scores(&model, &centered)?;
    fs::create_dir_all(&a.out)?;
    output::write_scores(&a.out, &scores.sets)?;
    let grid = model.domain.midpoint_grid(model.spec.grid_size);
    let fitted = reconstruct(&model, &table, &scores.sets, &grid)?;
    output::write_fitted(&a.out.join("fitted.csv"), &table, &grid, &fitted)?;
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), Failure> {
    let spec = if a.scenario == 2 {
        ScenarioSpec::scenario2(a.seed, a.reps)
    } else {
        ScenarioSpec { scenario: a.scenario, ..ScenarioSpec::scenario1(a.setting, a.seed, a.reps) }
    };
    spec.validate()?;
    fs::create_dir_all(&a.out)?;
    for rep in 0..a.reps {
        let (table, truth) = generate_replicate(&spec, rep)?;
        let stem = if a.reps == 1 { "data".to_string() } else { format!("data_rep{rep:03}") };
        write_long_table(&table, File::create(a.out.join(format!("{stem}.csv")))?)?;
        let truth_name = if a.reps == 1 { "truth.json".to_string() } else { format!("truth_rep{rep:03}.json") };
        fs::write(a.out.join(truth_name), serde_json::to_string(&truth).map_err(SymCovError::from)?)?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<(), Failure> {
    set_threads(&a.threads)?;
    let methods = a.methods.split(',').map(Method::parse).collect::<Result<Vec<_>, _>>()?;
    let spec = if a.scenario == 2 {
        ScenarioSpec::scenario2(a.seed, a.reps)
    } else {
        ScenarioSpec { scenario: a.scenario, ..ScenarioSpec::scenario1(a.setting, a.seed, a.reps) }
    };
    let rep = run_benchmark(&spec, &methods)?;
    fs::create_dir_all(&a.out)?;
    rep.write_csvs(&a.out)?;
    for ((method, term), tally) in truncation_tally(&rep) {
        log::info!("{method} {term}: {tally:?}");
    }
    for (r, m, msg) in &rep.failures {
        log::warn!("replicate {r} {m} failed: {msg}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}
