//! Command-line front end for the occupancy-model fitters: single-dataset
//! fits, replicated simulation studies, and dispersion-bias curves.
//!
//! Exit codes: 0 success, 2 usage or validation failure, 3 non-convergence
//! (outputs are still written with their flags set).

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgMatches, Args, ColorChoice, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use occufit_core::data::load_dataset;
use occufit_core::model::{DetectionComponent, Formula, OccurrenceComponent};
use occufit_core::sim::{
    log_grid, write_curve_csv, write_records_csv, write_summary_csv, Scenario, ScenarioConfig,
    SummaryTable,
};
use occufit_core::{
    bias_rho, fit, BiasReport, ColumnSchema, Error, Family, FitResult, HtEstimate, Method,
    ModelSpec, Result,
};

const EXIT_USAGE: u8 = 2;
const EXIT_NONCONVERGENCE: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "occufit",
    version,
    about = "Zero-inflated occupancy models: fitting, robust presence estimation, simulation studies"
)]
struct Cli {
    /// Worker threads for replicated computations (1 = fully serial).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit one model to a CSV dataset and print the result as JSON.
    Fit(FitArgs),
    /// Run a replicated simulation study from a TOML config.
    Simulate(SimulateArgs),
    /// Empirical vs asymptotic presence-probability bias over a dispersion grid.
    BiasCurve(BiasCurveArgs),
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Count family: poisson or binomial.
    #[arg(long, value_parser = parse_family)]
    family: Family,

    /// CSV file with a header row.
    #[arg(long)]
    data: PathBuf,

    /// Column holding the per-site total count.
    #[arg(long, conflicts_with = "visits")]
    y: Option<String>,

    /// Comma-separated per-visit detection columns (summed per site).
    #[arg(long, value_delimiter = ',')]
    visits: Vec<String>,

    /// Visit count when --y holds presummed binomial detections.
    #[arg(long, conflicts_with = "visits")]
    t: Option<u32>,

    /// Detection formula: "1" or "1 + col [+ col ...]".
    #[arg(long, default_value = "1", value_parser = parse_formula)]
    detection: Formula,

    /// Occurrence formula: "1" or "1 + col [+ col ...]".
    #[arg(long, default_value = "1", value_parser = parse_formula)]
    occurrence: Formula,

    /// Estimation method: ml (full likelihood) or cl (two-stage conditional).
    #[arg(long, value_parser = parse_method)]
    method: Method,

    /// Detection mixture: none, gamma, finite:C, or beta.
    #[arg(long, default_value = "none", value_parser = parse_mixture)]
    mixture: Mixture,

    /// Also report the inverse detection-probability weighted presence
    /// estimate (requires --method cl).
    #[arg(long)]
    ht: bool,

    /// Output file for the fit JSON (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Study config (TOML).
    #[arg(long)]
    config: PathBuf,

    /// Expected scenario; must match the config when given.
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<Scenario>,

    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the config's replicate count.
    #[arg(long)]
    replicates: Option<usize>,

    /// Output directory for records.csv, summary.csv, summary.json,
    /// manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BiasCurveArgs {
    /// Optional TOML config supplying defaults for the other flags.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Mean detection rate of the mixing distribution.
    #[arg(long)]
    mu: Option<f64>,

    /// True presence probability.
    #[arg(long)]
    psi: Option<f64>,

    /// Sites per replicate.
    #[arg(long)]
    n: Option<usize>,

    /// Dispersion grid "lo:hi:points", log-spaced.
    #[arg(long)]
    kappa_grid: Option<String>,

    /// Replicates per grid point.
    #[arg(long)]
    replicates: Option<usize>,

    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Output CSV file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mixture {
    None,
    Gamma,
    Finite(usize),
    Beta,
}

impl std::fmt::Display for Mixture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mixture::None => write!(f, "none"),
            Mixture::Gamma => write!(f, "gamma"),
            Mixture::Finite(c) => write!(f, "finite:{c}"),
            Mixture::Beta => write!(f, "beta"),
        }
    }
}

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    match s {
        "poisson" => Ok(Family::Poisson),
        "binomial" => Ok(Family::Binomial),
        _ => Err(format!("unknown family '{s}' (expected poisson or binomial)")),
    }
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    match s {
        "ml" => Ok(Method::Ml),
        "cl" => Ok(Method::Cl),
        _ => Err(format!("unknown method '{s}' (expected ml or cl)")),
    }
}

fn parse_formula(s: &str) -> std::result::Result<Formula, String> {
    Formula::parse(s).map_err(|e| e.to_string())
}

fn parse_scenario(s: &str) -> std::result::Result<Scenario, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mixture(s: &str) -> std::result::Result<Mixture, String> {
    match s {
        "none" => Ok(Mixture::None),
        "gamma" => Ok(Mixture::Gamma),
        "beta" => Ok(Mixture::Beta),
        _ => match s.strip_prefix("finite:") {
            Some(c) => c
                .parse::<usize>()
                .ok()
                .filter(|&c| c >= 1)
                .map(Mixture::Finite)
                .ok_or_else(|| format!("bad component count in '{s}'")),
            None => Err(format!(
                "unknown mixture '{s}' (expected none, gamma, finite:C, or beta)"
            )),
        },
    }
}

/// Provenance record emitted with every run.
#[derive(Debug, Serialize)]
struct RunManifest {
    subcommand: String,
    config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    artifact_version: String,
    input_digest: String,
    timestamp: String,
}

impl RunManifest {
    fn new(subcommand: &str, config: serde_json::Value, seed: Option<u64>, digest: String) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            config,
            seed,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            input_digest: digest,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("sha256:{:x}", Sha256::digest(&bytes)))
}

fn sha256_bytes(bytes: &[u8]) -> String {
    format!("sha256:{:x}", Sha256::digest(bytes))
}

/// Complete output document of a `fit` run.
#[derive(Debug, Serialize)]
struct FitDocument {
    manifest: RunManifest,
    fit: FitResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias_analysis: Option<BiasReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ht_estimate: Option<HtEstimate>,
}

fn cmd_fit(args: &FitArgs) -> Result<u8> {
    if args.y.is_none() && args.visits.is_empty() {
        return Err(Error::config("one of --y or --visits is required"));
    }
    if args.ht && args.method != Method::Cl {
        return Err(Error::config(
            "--ht uses the conditional-likelihood detection stage; pass --method cl",
        ));
    }
    if args.ht && args.mixture != Mixture::None {
        return Err(Error::config(
            "--ht needs a regression detection component, not a mixture",
        ));
    }
    if args.mixture != Mixture::None && !args.detection.columns().is_empty() {
        return Err(Error::config(
            "mixture models take no detection covariates; use --detection 1",
        ));
    }

    let schema = ColumnSchema {
        site_id: None,
        y: args.y.clone(),
        visit_columns: args.visits.clone(),
        detection_columns: args.detection.columns().to_vec(),
        occurrence_columns: args.occurrence.columns().to_vec(),
        visits: args.t,
    };
    let dataset = load_dataset(&args.data, &schema, args.family)?;

    let regression_needed = args.ht
        || !args.detection.columns().is_empty()
        || !args.occurrence.columns().is_empty();
    let detection = match args.mixture {
        Mixture::None if regression_needed => {
            DetectionComponent::Regression(args.detection.clone())
        }
        Mixture::None => DetectionComponent::Constant,
        Mixture::Gamma => DetectionComponent::GammaMixture,
        Mixture::Finite(c) => DetectionComponent::FiniteMixture(c),
        Mixture::Beta => DetectionComponent::BetaMixture,
    };
    let occurrence = if args.occurrence.columns().is_empty() {
        OccurrenceComponent::Constant
    } else {
        OccurrenceComponent::Regression(args.occurrence.clone())
    };
    let spec = ModelSpec {
        family: args.family,
        detection,
        occurrence,
        method: args.method,
    };

    let fitted = fit(&dataset, &spec)?;
    let bias_analysis = mixing_moments(&fitted).map(|(mu, s2)| bias_rho(mu, s2)).transpose()?;
    let ht_estimate = if args.ht {
        Some(occufit_core::ht_psi_bar(&dataset, &fitted, args.family)?)
    } else {
        None
    };

    let config = serde_json::json!({
        "family": args.family,
        "data": args.data,
        "y": args.y,
        "visits": args.visits,
        "t": args.t,
        "detection": args.detection.to_string(),
        "occurrence": args.occurrence.to_string(),
        "method": args.method,
        "mixture": args.mixture.to_string(),
        "ht": args.ht,
    });
    let manifest = RunManifest::new("fit", config, None, sha256_file(&args.data)?);
    let converged = fitted.converged;
    let doc = FitDocument {
        manifest,
        fit: fitted,
        bias_analysis,
        ht_estimate,
    };
    let json = serde_json::to_string_pretty(&doc).expect("fit document serializes");
    match &args.out {
        Some(path) => std::fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(if converged { 0 } else { EXIT_NONCONVERGENCE })
}

/// Mixing-distribution mean and variance of a fitted rate mixture, when the
/// model has one (used for the closed-form bias report).
fn mixing_moments(fitted: &FitResult) -> Option<(f64, f64)> {
    match fitted.model.as_str() {
        "zip-gamma-mixture" => {
            let mu = fitted.theta_hat[0];
            let kappa = fitted.theta_hat[1];
            Some((mu, mu * mu / kappa))
        }
        "zip-finite-mixture" => {
            let c = fitted.theta_hat.len() / 2;
            let (lambdas, weights) = fitted.theta_hat.split_at(c);
            let mean: f64 = lambdas.iter().zip(weights).map(|(l, w)| l * w).sum();
            let second: f64 = lambdas.iter().zip(weights).map(|(l, w)| l * l * w).sum();
            Some((mean, second - mean * mean))
        }
        _ => None,
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<u8> {
    let raw = std::fs::read_to_string(&args.config)?;
    let mut config: ScenarioConfig =
        toml::from_str(&raw).map_err(|e| Error::config(format!("bad config: {e}")))?;
    if let Some(scenario) = args.scenario {
        if scenario != config.scenario {
            return Err(Error::config(format!(
                "--scenario {scenario} does not match the config's '{}'",
                config.scenario
            )));
        }
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(replicates) = args.replicates {
        config.replicates = replicates;
    }
    config.validate()?;

    let output = occufit_core::run_study(&config)?;

    std::fs::create_dir_all(&args.out)?;
    let mut records = Vec::new();
    write_records_csv(&mut records, &output.records)?;
    std::fs::write(args.out.join("records.csv"), records)?;
    let mut summary = Vec::new();
    write_summary_csv(&mut summary, &output.summary)?;
    std::fs::write(args.out.join("summary.csv"), summary)?;
    let summary_json =
        serde_json::to_string_pretty(&output.summary).expect("summary serializes");
    std::fs::write(args.out.join("summary.json"), summary_json + "\n")?;

    let manifest = RunManifest::new(
        "simulate",
        serde_json::to_value(&config).expect("config serializes"),
        Some(config.seed),
        sha256_file(&args.config)?,
    );
    let manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(args.out.join("manifest.json"), manifest_json + "\n")?;

    print_summary(&output.summary);
    println!("wrote records.csv, summary.csv, summary.json, manifest.json to {}", args.out.display());
    Ok(0)
}

fn print_summary(table: &SummaryTable) {
    println!(
        "{:<16} {:<12} {:>6} {:>5} {:>5} {:>9} {:>9} {:>9} {:>9} {:>7}",
        "fitter", "estimand", "used", "excl", "bnd", "AVE", "SD", "A.SE", "RMSE", "CP%"
    );
    for r in &table.rows {
        println!(
            "{:<16} {:<12} {:>6} {:>5} {:>5} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>7.2}",
            r.fitter,
            r.estimand,
            r.used,
            r.excluded,
            r.boundary_count,
            r.ave,
            r.sd,
            r.a_se,
            r.rmse,
            r.cp_pct
        );
    }
}

/// Bias-curve parameters; flags override file values.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CurveConfig {
    mu: Option<f64>,
    psi: Option<f64>,
    n: Option<usize>,
    kappa_grid: Option<String>,
    replicates: Option<usize>,
    seed: Option<u64>,
}

fn cmd_bias_curve(args: &BiasCurveArgs) -> Result<u8> {
    let mut config = match &args.config {
        Some(path) => {
            let raw = std::fs::read_to_string(path)?;
            toml::from_str::<CurveConfig>(&raw)
                .map_err(|e| Error::config(format!("bad config: {e}")))?
        }
        None => CurveConfig::default(),
    };
    if args.mu.is_some() {
        config.mu = args.mu;
    }
    if args.psi.is_some() {
        config.psi = args.psi;
    }
    if args.n.is_some() {
        config.n = args.n;
    }
    if args.kappa_grid.is_some() {
        config.kappa_grid = args.kappa_grid.clone();
    }
    if args.replicates.is_some() {
        config.replicates = args.replicates;
    }
    if args.seed.is_some() {
        config.seed = args.seed;
    }
    let missing = |what: &str| Error::config(format!("--{what} is required (flag or config)"));
    let mu = config.mu.ok_or_else(|| missing("mu"))?;
    let psi = config.psi.ok_or_else(|| missing("psi"))?;
    let n = config.n.ok_or_else(|| missing("n"))?;
    let grid_spec = config.kappa_grid.clone().ok_or_else(|| missing("kappa-grid"))?;
    let replicates = config.replicates.ok_or_else(|| missing("replicates"))?;
    let seed = config.seed.ok_or_else(|| missing("seed"))?;

    let grid = parse_grid(&grid_spec)?;
    let rows = occufit_core::bias_curve(mu, psi, n, &grid, replicates, seed)?;

    let digest = match &args.config {
        Some(path) => sha256_file(path)?,
        None => sha256_bytes(
            serde_json::to_string(&config).expect("curve config serializes").as_bytes(),
        ),
    };
    let manifest = RunManifest::new(
        "bias-curve",
        serde_json::to_value(&config).expect("curve config serializes"),
        Some(seed),
        digest,
    );
    let manifest_json = serde_json::to_string(&manifest).expect("manifest serializes");

    let mut csv = Vec::new();
    write_curve_csv(&mut csv, &rows)?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, csv)?;
            let sibling = path.with_extension("manifest.json");
            std::fs::write(sibling, manifest_json + "\n")?;
        }
        None => {
            std::io::stdout().write_all(&csv)?;
            eprintln!("{manifest_json}");
        }
    }
    Ok(0)
}

/// Parse "lo:hi:points" into a log-spaced grid.
fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::config(format!(
            "grid '{spec}' must look like lo:hi:points"
        )));
    }
    let lo: f64 = parts[0]
        .parse()
        .map_err(|_| Error::config(format!("bad grid lower bound '{}'", parts[0])))?;
    let hi: f64 = parts[1]
        .parse()
        .map_err(|_| Error::config(format!("bad grid upper bound '{}'", parts[1])))?;
    let points: usize = parts[2]
        .parse()
        .map_err(|_| Error::config(format!("bad grid point count '{}'", parts[2])))?;
    log_grid(lo, hi, points)
}

fn parse_cli() -> Cli {
    // Honor the NO_COLOR convention for help and error rendering.
    let color = match std::env::var_os("NO_COLOR") {
        Some(v) if !v.is_empty() => ColorChoice::Never,
        _ => ColorChoice::Auto,
    };
    let matches: ArgMatches = Cli::command().color(color).get_matches();
    Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit())
}

fn main() -> ExitCode {
    let cli = parse_cli();
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(EXIT_USAGE);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .expect("thread pool initializes once");

    let result = match &cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::BiasCurve(args) => cmd_bias_curve(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Numerical(_) => EXIT_NONCONVERGENCE,
                _ => EXIT_USAGE,
            };
            ExitCode::from(code)
        }
    }
}
