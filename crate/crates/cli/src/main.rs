use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use robrad::covariance::{bootstrap_cov, write_draws_csv};
use robrad::cstest::{build_system, run_test, DfConvention, PreparedProblem, TestOptions, Variant};
use robrad::data::{order_main_first, Dataset};
use robrad::error::{Error, Result};
use robrad::exchange::{read_cov_csv, read_estimates_csv, write_cov_csv, write_estimates_csv, EstimatesTable};
use robrad::radius::{robustness_radius, write_trace_csv, RadiusOptions};
use robrad::sensitivity::{sensitivity_block, SensitivityInputs};
use robrad::simlab::SimulationSpec;
use robrad::study::{run_study, StudyConfig};

/// Robustness radius for regression robustness checks.
#[derive(Parser, Debug)]
#[command(name = "robrad", version)]
struct Cli {
    /// Worker threads for bootstrap and simulation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Full pipeline from a study config, or the radius from precomputed inputs.
    Radius(RadiusArgs),
    /// Single test of the null that every check is within b of the main estimate.
    Test(TestArgs),
    /// Monte Carlo runs from a scenario file.
    Simulate(SimulateArgs),
    /// Sensitivity parameter implied by a radius.
    Sensitivity(SensitivityArgs),
    /// Bootstrap covariance of the stacked estimates.
    BootstrapCov(BootstrapArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum VariantArg {
    Cc,
    Rcc,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Cc => Variant::Cc,
            VariantArg::Rcc => Variant::Rcc,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum DfArg {
    Rank,
    Rows,
}

impl From<DfArg> for DfConvention {
    fn from(v: DfArg) -> Self {
        match v {
            DfArg::Rank => DfConvention::Rank,
            DfArg::Rows => DfConvention::Rows,
        }
    }
}

#[derive(Args, Debug)]
struct TestingArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long = "df-convention", value_enum)]
    df_convention: Option<DfArg>,
}

#[derive(Args, Debug)]
struct PrecomputedArgs {
    /// CSV with columns label,estimate[,must_equal]; main specification first.
    #[arg(long)]
    estimates: Option<PathBuf>,
    /// Covariance CSV: header row of labels, then the square matrix.
    #[arg(long)]
    cov: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RadiusArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the data path in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Skip the data pipeline and use --estimates and --cov.
    #[arg(long)]
    precomputed: bool,
    #[command(flatten)]
    inputs: PrecomputedArgs,
    #[command(flatten)]
    testing: TestingArgs,
    /// Overrides the bootstrap seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Report destination (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Writes the search trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Writes estimates.csv, cov.csv and draws.csv to this directory.
    #[arg(long)]
    intermediates: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TestArgs {
    #[command(flatten)]
    inputs: PrecomputedArgs,
    #[arg(long)]
    b: f64,
    #[command(flatten)]
    testing: TestingArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Scenario file (JSON, tagged by "kind").
    #[arg(long, alias = "config")]
    scenario: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Plot data (histogram, table or curve points) as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SensitivityArgs {
    /// Study report produced by `robrad radius`.
    #[arg(long, conflicts_with_all = ["b_rr", "var_ratio", "r2"])]
    report: Option<PathBuf>,
    #[arg(long = "b-rr")]
    b_rr: Option<f64>,
    /// var(e_D) / var(e_y) from the main specification.
    #[arg(long = "var-ratio")]
    var_ratio: Option<f64>,
    /// R² of the treatment on the main specification's controls.
    #[arg(long)]
    r2: Option<f64>,
    #[arg(long = "tau-bar")]
    tau_bar: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BootstrapArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replications: Option<usize>,
    /// Covariance CSV destination (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replicate draws as CSV.
    #[arg(long)]
    draws: Option<PathBuf>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn emit_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{text}")?;
            w.flush()?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn load_config(path: &Path, data: Option<&PathBuf>, seed: Option<u64>) -> Result<StudyConfig> {
    let mut cfg = StudyConfig::from_path(path)?;
    if let Some(d) = data {
        cfg.data_path = d.clone();
    }
    if let Some(s) = seed {
        cfg.bootstrap.seed = s;
    }
    Ok(cfg)
}

fn apply_testing(t: &TestingArgs, alpha: &mut f64, variant: &mut Variant, df: &mut DfConvention) {
    if let Some(a) = t.alpha {
        *alpha = a;
    }
    if let Some(v) = t.variant {
        *variant = v.into();
    }
    if let Some(d) = t.df_convention {
        *df = d.into();
    }
}

fn load_precomputed(inputs: &PrecomputedArgs) -> Result<(EstimatesTable, nalgebra::DMatrix<f64>)> {
    let (Some(est), Some(cov)) = (&inputs.estimates, &inputs.cov) else {
        return Err(Error::InvalidInput("--estimates and --cov are both required".into()));
    };
    let table = read_estimates_csv(File::open(est)?)?;
    let (labels, matrix) = read_cov_csv(File::open(cov)?)?;
    if labels != table.labels {
        return Err(Error::InvalidInput(format!(
            "covariance labels {labels:?} do not match estimate labels {:?}",
            table.labels
        )));
    }
    Ok((table, matrix))
}

fn cmd_radius(args: &RadiusArgs) -> Result<()> {
    if args.precomputed {
        let (table, cov) = load_precomputed(&args.inputs)?;
        let mut opts = RadiusOptions { must_equal: table.must_equal.clone().split_off(1), ..Default::default() };
        apply_testing(&args.testing, &mut opts.alpha, &mut opts.variant, &mut opts.df_convention);
        let report = robustness_radius(&table.theta, &cov, &opts)?;
        if let Some(path) = &args.trace {
            write_trace_csv(&report, create(path)?)?;
        }
        return emit_json(&report, args.out.as_deref());
    }
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("either --config or --precomputed is required".into()))?;
    let mut cfg = load_config(path, args.data.as_ref(), args.seed)?;
    apply_testing(&args.testing, &mut cfg.alpha, &mut cfg.variant, &mut cfg.df_convention);
    let (mut report, artifacts) = run_study(&cfg)?;
    if report.radius.non_monotone {
        log::warn!("reject decision is not monotone in b; reporting the first accepted grid cell");
    }
    report.generated_at = Some(chrono::Utc::now().to_rfc3339());
    if let Some(path) = &args.trace {
        write_trace_csv(&report.radius, create(path)?)?;
    }
    if let Some(dir) = &args.intermediates {
        let specs = order_main_first(&cfg.specifications)?;
        let mut must_equal = vec![false];
        must_equal.extend(specs[1..].iter().map(|s| s.must_equal_main));
        let table = EstimatesTable { labels: artifacts.labels.clone(), theta: artifacts.theta.clone(), must_equal };
        write_estimates_csv(&table, create(&dir.join("estimates.csv"))?)?;
        write_cov_csv(&artifacts.labels, &artifacts.covariance.matrix, create(&dir.join("cov.csv"))?)?;
        write_draws_csv(&artifacts.covariance, &artifacts.labels, create(&dir.join("draws.csv"))?)?;
    }
    let out = args.out.clone().or_else(|| cfg.output_path.clone());
    emit_json(&report, out.as_deref())
}

fn cmd_test(args: &TestArgs) -> Result<()> {
    let (table, cov) = load_precomputed(&args.inputs)?;
    let mut opts = TestOptions::default();
    apply_testing(&args.testing, &mut opts.alpha, &mut opts.variant, &mut opts.df_convention);
    let system = build_system(table.theta.len() - 1, args.b, &table.must_equal[1..])?;
    let problem = PreparedProblem::new(&table.theta, &cov, &system.a)?;
    let outcome = run_test(&problem, &system, opts)?;
    emit_json(&outcome, args.out.as_deref())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.scenario)?;
    let mut spec: SimulationSpec = serde_json::from_str(&text)?;
    if let Some(s) = args.seed {
        spec.set_seed(s);
    }
    let output = spec.run()?;
    if let Some(path) = &args.csv {
        output.write_csv(create(path)?)?;
    }
    emit_json(&output, args.out.as_deref())
}

fn cmd_sensitivity(args: &SensitivityArgs) -> Result<()> {
    let inputs = match &args.report {
        Some(path) => {
            let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            let inputs = &report["sensitivity"]["inputs"];
            let field = |name: &str| {
                inputs[name]
                    .as_f64()
                    .ok_or_else(|| Error::InvalidInput(format!("report has no sensitivity input \"{name}\"")))
            };
            let b_rr = if report["radius"]["b_rr"].is_null() { f64::INFINITY } else { field("b_rr")? };
            SensitivityInputs { b_rr, var_ratio: field("var_ratio")?, r2_dx: field("r2_dx")? }
        }
        None => {
            let need = |v: Option<f64>, flag: &str| v.ok_or_else(|| Error::InvalidInput(format!("{flag} is required")));
            SensitivityInputs {
                b_rr: need(args.b_rr, "--b-rr")?,
                var_ratio: need(args.var_ratio, "--var-ratio")?,
                r2_dx: need(args.r2, "--r2")?,
            }
        }
    };
    emit_json(&sensitivity_block(inputs, args.tau_bar)?, args.out.as_deref())
}

fn cmd_bootstrap(args: &BootstrapArgs) -> Result<()> {
    let mut cfg = load_config(&args.config, args.data.as_ref(), args.seed)?;
    if let Some(r) = args.replications {
        cfg.bootstrap.replications = r;
    }
    cfg.validate()?;
    if cfg.bootstrap.cluster_column.is_none() {
        cfg.bootstrap.cluster_column = cfg.cluster_column.clone();
    }
    let specs = order_main_first(&cfg.specifications)?;
    let ds = Dataset::from_csv_path(&cfg.data_path)?;
    let est = bootstrap_cov(&ds, &specs, &cfg.bootstrap)?;
    let labels: Vec<String> = specs.iter().map(|s| s.label.clone()).collect();
    log::info!("{} draws trimmed at threshold {}", est.n_trimmed, est.trim_threshold);
    if let Some(path) = &args.draws {
        write_draws_csv(&est, &labels, create(path)?)?;
    }
    match &args.out {
        Some(path) => write_cov_csv(&labels, &est.matrix, create(path)?),
        None => write_cov_csv(&labels, &est.matrix, std::io::stdout().lock()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Radius(a) => cmd_radius(a),
        Command::Test(a) => cmd_test(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sensitivity(a) => cmd_sensitivity(a),
        Command::BootstrapCov(a) => cmd_bootstrap(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
