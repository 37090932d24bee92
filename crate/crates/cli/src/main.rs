use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use npgmm::bench::{run_estimate, run_montecarlo, run_scaling, simulate, thread_sweep, MonteCarloConfig};
use npgmm::dgp::{generate_dataset, DgpConfig};
use npgmm::estimators::{Method, SolverConfig};
use npgmm::gmm::drop_collinear_instruments;
use npgmm::inference::{OmegaEstimator, VarianceOptions};
use npgmm::io::{load_config, load_dataset_with, save_dataset, write_json, write_text, IngestOptions};
use npgmm::{BlpError, Executor, MarketDataset};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_SCHEMA: u8 = 3;
const EXIT_NOT_CONVERGED: u8 = 4;
const EXIT_NUMERICAL: u8 = 5;

#[derive(Parser)]
#[command(name = "npgmm", version, about = "Random-coefficients logit demand estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate from CSV data.
    Estimate(EstimateArgs),
    /// Replicate estimation on simulated datasets.
    Montecarlo(MonteCarloArgs),
    /// Time criterion and gradient evaluations across thread counts.
    ThreadSweep(SweepArgs),
    /// Time per inner iteration as the number of products grows.
    Scaling(ScalingArgs),
    /// Write a simulated dataset as CSV.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Npgmm,
    Ablp,
    Nfxp,
    All,
}

fn expand(methods: &[MethodArg]) -> Vec<Method> {
    let mut out = Vec::new();
    for m in methods {
        let add: &[Method] = match m {
            MethodArg::Npgmm => &[Method::Npgmm],
            MethodArg::Ablp => &[Method::Ablp],
            MethodArg::Nfxp => &[Method::Nfxp],
            MethodArg::All => &Method::ALL,
        };
        for &a in add {
            if !out.contains(&a) {
                out.push(a);
            }
        }
    }
    out
}

#[derive(Args)]
struct SolverArgs {
    /// TOML file with solver settings; flags override it.
    #[arg(long, env = "NPGMM_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "NPGMM_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "NPGMM_STARTS")]
    starts: Option<usize>,
    #[arg(long, env = "NPGMM_THREADS")]
    threads: Option<usize>,
    #[arg(long, env = "NPGMM_TOL_OUTER")]
    tol_outer: Option<f64>,
    #[arg(long, env = "NPGMM_MAX_OUTER")]
    max_outer: Option<usize>,
    #[arg(long, env = "NPGMM_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
}

impl SolverArgs {
    fn solver(&self) -> Result<SolverConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path).map_err(Failure::config)?,
            None => SolverConfig::default(),
        };
        if let Some(v) = self.starts {
            cfg.n_starts = v;
        }
        if let Some(v) = self.threads {
            cfg.threads = v;
        }
        if let Some(v) = self.tol_outer {
            cfg.tol_outer = v;
        }
        if let Some(v) = self.max_outer {
            cfg.max_outer = v;
        }
        cfg.validate().map_err(Failure::config)?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path, Failure> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Failure::from(BlpError::from(e)))?;
        Ok(&self.out_dir)
    }
}

#[derive(Args)]
struct DataArgs {
    /// products.csv
    #[arg(long, env = "NPGMM_DATA")]
    data: PathBuf,
    /// draws.csv
    #[arg(long, env = "NPGMM_DRAWS")]
    draws: PathBuf,
    /// products.csv column with group labels for group-mean instruments.
    #[arg(long, env = "NPGMM_GROUP_COLUMN")]
    group_column: Option<String>,
    /// Characteristic column whose leave-one-out group mean becomes an
    /// instrument; repeatable.
    #[arg(long = "group-mean", env = "NPGMM_GROUP_MEAN", value_delimiter = ',')]
    group_mean: Vec<String>,
    /// Drop instrument columns spanned by earlier ones instead of failing.
    #[arg(long, env = "NPGMM_DROP_COLLINEAR")]
    drop_collinear: bool,
}

impl DataArgs {
    fn load(&self) -> Result<MarketDataset, Failure> {
        let options = IngestOptions {
            group_column: self.group_column.clone(),
            group_mean_of: self.group_mean.clone(),
        };
        let loaded = load_dataset_with(&self.data, &self.draws, &options)?;
        for w in &loaded.warnings {
            eprintln!("warning: {w}");
        }
        if !self.drop_collinear {
            return Ok(loaded.dataset);
        }
        let (ds, dropped) = drop_collinear_instruments(&loaded.dataset)?;
        if !dropped.is_empty() {
            let names: Vec<String> = dropped.iter().map(|c| format!("z_{}", c + 1)).collect();
            eprintln!("dropped collinear instruments: {}", names.join(", "));
        }
        Ok(ds)
    }
}

#[derive(Args)]
struct SimArgs {
    /// Products per market.
    #[arg(long, env = "NPGMM_PRODUCTS", default_value_t = 25)]
    products: usize,
    #[arg(long, env = "NPGMM_MARKETS", default_value_t = 50)]
    markets: usize,
    /// Simulated consumers per market.
    #[arg(long, env = "NPGMM_CONSUMERS", default_value_t = 200)]
    consumers: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OmegaArg {
    OuterProduct,
    SecondDerivative,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long, env = "NPGMM_METHOD", value_enum, value_delimiter = ',', default_value = "npgmm")]
    method: Vec<MethodArg>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, env = "NPGMM_OMEGA", value_enum, default_value = "outer-product")]
    omega: OmegaArg,
}

#[derive(Args)]
struct MonteCarloArgs {
    #[arg(long, env = "NPGMM_METHOD", value_enum, value_delimiter = ',', default_value = "npgmm,ablp")]
    method: Vec<MethodArg>,
    #[arg(long, env = "NPGMM_REPLICATIONS", default_value_t = 10)]
    replications: usize,
    #[command(flatten)]
    sim: SimArgs,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, env = "NPGMM_METHOD", value_enum, value_delimiter = ',', default_value = "npgmm,ablp")]
    method: Vec<MethodArg>,
    /// Thread counts to time.
    #[arg(long, env = "NPGMM_THREAD_LIST", value_delimiter = ',', default_value = "1,2,4")]
    thread_list: Vec<usize>,
    #[arg(long, env = "NPGMM_EVALUATIONS", default_value_t = 1000)]
    evaluations: usize,
    /// Use CSV data instead of a simulated dataset.
    #[arg(long, env = "NPGMM_DATA", requires = "draws")]
    data: Option<PathBuf>,
    #[arg(long, env = "NPGMM_DRAWS", requires = "data")]
    draws: Option<PathBuf>,
    #[command(flatten)]
    sim: SimArgs,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct ScalingArgs {
    #[arg(long, env = "NPGMM_METHOD", value_enum, value_delimiter = ',', default_value = "npgmm,ablp")]
    method: Vec<MethodArg>,
    /// Values of J.
    #[arg(long, env = "NPGMM_PRODUCT_LIST", value_delimiter = ',', default_value = "25,50,100,200")]
    product_list: Vec<usize>,
    #[arg(long, env = "NPGMM_MARKETS", default_value_t = 50)]
    markets: usize,
    #[arg(long, env = "NPGMM_CONSUMERS", default_value_t = 200)]
    consumers: usize,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, env = "NPGMM_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "NPGMM_THREADS")]
    threads: Option<usize>,
    #[arg(long, env = "NPGMM_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(e: BlpError) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: e.to_string(),
        }
    }
}

impl From<BlpError> for Failure {
    fn from(e: BlpError) -> Self {
        let code = match &e {
            BlpError::Schema(_) => EXIT_SCHEMA,
            BlpError::Config(_) | BlpError::InvalidInput(_) | BlpError::DimensionMismatch { .. } => EXIT_CONFIG,
            BlpError::NonConvergence { .. } => EXIT_NOT_CONVERGED,
            BlpError::Numerical { .. } | BlpError::SingularJacobian { .. } | BlpError::Singular(_) => EXIT_NUMERICAL,
            BlpError::Io(_) | BlpError::Csv(_) | BlpError::Json(_) => EXIT_FAILURE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn emit(out_dir: &Path, stem: &str, text: &str, json: &impl serde::Serialize) -> Result<(), Failure> {
    write_text(text, &out_dir.join(format!("{stem}.txt")))?;
    write_json(json, &out_dir.join(format!("{stem}.json")))?;
    print!("{text}");
    Ok(())
}

fn estimate(args: &EstimateArgs) -> Result<(), Failure> {
    let cfg = args.solver.solver()?;
    let ds = args.data.load()?;
    let variance = VarianceOptions {
        omega: match args.omega {
            OmegaArg::OuterProduct => OmegaEstimator::OuterProduct,
            OmegaArg::SecondDerivative => OmegaEstimator::SecondDerivative,
        },
        ..Default::default()
    };
    let report = run_estimate(&ds, &cfg, &expand(&args.method), args.solver.seed, variance)?;
    emit(args.solver.out_dir()?, "report", &report.to_text(), &report)?;
    let failed: Vec<String> = report
        .methods
        .iter()
        .filter(|m| !m.any_converged())
        .map(|m| m.method.to_string())
        .collect();
    if !failed.is_empty() {
        return Err(Failure {
            code: EXIT_NOT_CONVERGED,
            message: format!("no start converged for {}", failed.join(", ")),
        });
    }
    Ok(())
}

fn montecarlo(args: &MonteCarloArgs) -> Result<(), Failure> {
    let solver = args.solver.solver()?;
    let config = MonteCarloConfig {
        dgp: DgpConfig::sized(args.sim.products, args.sim.markets, args.sim.consumers, args.solver.seed),
        replications: args.replications,
        methods: expand(&args.method),
        solver,
        seed: args.solver.seed,
    };
    let report = run_montecarlo(&config)?;
    let dir = args.solver.out_dir()?;
    // One row per replication and method for recomputing the summaries.
    let mut w = csv::Writer::from_path(dir.join("replications.csv")).map_err(BlpError::from)?;
    let mut header = vec!["replication".to_string(), "method".into(), "converged".into()];
    header.extend(report.parameter_names.iter().map(|n| format!("{n}_hat")));
    header.extend(report.parameter_names.iter().map(|n| format!("{n}_true")));
    w.write_record(&header).map_err(BlpError::from)?;
    for r in &report.records {
        let mut rec = vec![r.replication.to_string(), r.method.to_string(), r.converged.to_string()];
        if r.theta_hat.is_empty() {
            rec.extend(r.truth.iter().map(|_| String::new()));
        } else {
            rec.extend(r.theta_hat.iter().map(f64::to_string));
        }
        rec.extend(r.truth.iter().map(f64::to_string));
        w.write_record(&rec).map_err(BlpError::from)?;
    }
    w.flush().map_err(BlpError::from)?;
    emit(dir, "montecarlo", &report.to_text(), &report)
}

fn sweep(args: &SweepArgs) -> Result<(), Failure> {
    let cfg = args.solver.solver()?;
    let ds = match (&args.data, &args.draws) {
        (Some(data), Some(draws)) => load_dataset_with(data, draws, &IngestOptions::default())?.dataset,
        _ => {
            let dgp = DgpConfig::sized(args.sim.products, args.sim.markets, args.sim.consumers, args.solver.seed);
            simulate(&dgp, &Executor::new(cfg.threads)?)?.0.dataset
        }
    };
    let report = thread_sweep(&ds, &cfg, &expand(&args.method), &args.thread_list, args.evaluations, args.solver.seed)?;
    emit(args.solver.out_dir()?, "thread_sweep", &report.to_text(), &report)
}

fn scaling(args: &ScalingArgs) -> Result<(), Failure> {
    let cfg = args.solver.solver()?;
    let dgp = DgpConfig::sized(0, args.markets, args.consumers, args.solver.seed);
    let report = run_scaling(&dgp, &args.product_list, &cfg, &expand(&args.method), args.solver.seed)?;
    emit(args.solver.out_dir()?, "scaling", &report.to_text(), &report)
}

fn generate(args: &GenerateArgs) -> Result<(), Failure> {
    let dgp = DgpConfig::sized(args.sim.products, args.sim.markets, args.sim.consumers, args.seed);
    let exec = Executor::new(args.threads.unwrap_or_else(npgmm::parallel::default_threads))?;
    let g = generate_dataset(&dgp, &exec)?;
    std::fs::create_dir_all(&args.out_dir).map_err(BlpError::from)?;
    save_dataset(&g.dataset, &args.out_dir.join("products.csv"), &args.out_dir.join("draws.csv"))?;
    write_json(&dgp, &args.out_dir.join("dgp.json"))?;
    write_json(&g.truth.to_vec(), &args.out_dir.join("truth.json"))?;
    println!(
        "wrote {} markets x {} products with {} consumers to {}",
        dgp.markets,
        dgp.products,
        dgp.draws,
        args.out_dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Estimate(a) => estimate(a),
        Command::Montecarlo(a) => montecarlo(a),
        Command::ThreadSweep(a) => sweep(a),
        Command::Scaling(a) => scaling(a),
        Command::Generate(a) => generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
