//! `reefgauge`: fit, report, diagnose and power-simulate reef abundance data.

mod plots;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reefgauge_core::diagnostics::{self, TABLE_PARAMETERS};
use reefgauge_core::indicators::{render_report, ReportStyle};
use reefgauge_core::powersim::{self, RunOptions};
use reefgauge_core::synthetic::{self, GeneratingValues};
use reefgauge_core::{
    aggregate, parse_deployments, CategoryScheme, ColumnMap, Error, IndicatorList, ObservationTable, PosteriorDraws,
    PriorConfig, SamplerConfig, ScenarioGrid, StatusReport,
};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NONCONVERGENCE: u8 = 4;
const EXIT_SIMULATION: u8 = 5;
const RHAT_LIMIT: f64 = 1.05;

#[derive(Parser)]
#[command(name = "reefgauge", version, about = "Hierarchical abundance modelling for reef monitoring")]
struct Cli {
    /// Worker threads for chains and replicates (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model and write draws plus a summary table.
    Fit(FitArgs),
    /// Baseline-relative status report in three styles.
    Report(ReportArgs),
    /// Posterior predictive checks, dispersion check and R-hat listing.
    Diagnose(DiagnoseArgs),
    /// Monitoring-design power simulation over a decline x effort grid.
    Simulate(SimulateArgs),
    /// Write a synthetic deployment CSV and indicator list.
    Synth(SynthArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Deployment CSV.
    #[arg(long)]
    data: PathBuf,
    /// Indicator species JSON.
    #[arg(long)]
    indicators: PathBuf,
    /// JSON map of CSV column names.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SamplerArgs {
    #[arg(long, env = "REEFGAUGE_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    chains: Option<usize>,
    /// Iterations per chain, warmup included.
    #[arg(long)]
    iter: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    adapt_target: Option<f64>,
    #[arg(long)]
    max_treedepth: Option<u32>,
}

impl SamplerArgs {
    fn config(&self, base: SamplerConfig) -> SamplerConfig {
        let iterations = self.iter.unwrap_or(base.iterations);
        SamplerConfig {
            chains: self.chains.unwrap_or(base.chains),
            iterations,
            warmup: self.warmup.unwrap_or(if self.iter.is_some() { iterations / 2 } else { base.warmup }),
            target_accept: self.adapt_target.unwrap_or(base.target_accept),
            max_treedepth: self.max_treedepth.unwrap_or(base.max_treedepth),
            seed: self.seed.unwrap_or(0),
            ..base
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Draws directory written by `fit`.
    #[arg(long)]
    draws: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the earliest fitted year.
    #[arg(long)]
    baseline_year: Option<i32>,
    /// Category scheme JSON (default traffic-light scheme).
    #[arg(long)]
    scheme: Option<PathBuf>,
    /// Restrict the report to these years.
    #[arg(long, value_delimiter = ',')]
    years: Vec<i32>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    draws: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Posterior predictive replicates.
    #[arg(long, default_value_t = 1000)]
    ppc_replicates: usize,
    /// Simulated datasets for the dispersion check.
    #[arg(long, default_value_t = 1000)]
    dispersion_sims: usize,
    /// Sampler settings for the Poisson refit.
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    draws: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    rho: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    alpha: Vec<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    baseline_year: Option<i32>,
    #[arg(long)]
    scheme: Option<PathBuf>,
    /// Include the before/after coefficient in the estimated ratio.
    #[arg(long)]
    ratio_includes_beta1: bool,
    /// Sampler settings for each replicate fit (default 2 chains x 1500/750).
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "REEFGAUGE_SEED", default_value_t = 0)]
    seed: u64,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.chain().find_map(|e| e.downcast_ref::<Error>()) {
            Some(Error::Io { .. } | Error::Config(_)) => EXIT_USAGE,
            Some(_) => EXIT_DATA,
            None => EXIT_USAGE,
        };
        Self { code, error }
    }
}

fn fail(code: u8, error: anyhow::Error) -> Failure {
    Failure { code, error }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Report(a) => cmd_report(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

fn load_table(args: &DataArgs) -> anyhow::Result<ObservationTable> {
    let schema = match &args.schema {
        Some(p) => ColumnMap::from_json_file(p)?,
        None => ColumnMap::default(),
    };
    let indicators = IndicatorList::from_json_file(&args.indicators)?;
    let records = parse_deployments(&args.data, &schema)?;
    Ok(aggregate(&records, &indicators)?)
}

fn load_scheme(path: &Option<PathBuf>) -> anyhow::Result<CategoryScheme> {
    Ok(match path {
        Some(p) => CategoryScheme::from_json_file(p)?,
        None => CategoryScheme::traffic_light(),
    })
}

fn load_draws(dir: &Path) -> anyhow::Result<PosteriorDraws> {
    PosteriorDraws::read_dir(dir).with_context(|| format!("reading draws from {}", dir.display()))
}

fn cmd_fit(args: FitArgs) -> CmdResult {
    let table = load_table(&args.data)?;
    let config = args.sampler.config(SamplerConfig::default());
    create_dir(&args.out)?;
    let mut obs = Vec::new();
    table.write_csv(&mut obs).map_err(anyhow::Error::from)?;
    write_file(&args.out.join("observations.csv"), obs)?;

    let draws = reefgauge_core::fit_model(&table, &PriorConfig::default(), &config, None).map_err(anyhow::Error::from)?;
    draws.write_dir(args.out.join("draws")).map_err(anyhow::Error::from)?;
    let rows = diagnostics::summary_table(&draws, &TABLE_PARAMETERS).map_err(anyhow::Error::from)?;
    let mut csv = Vec::new();
    diagnostics::write_summary_csv(&rows, &mut csv).map_err(anyhow::Error::from)?;
    write_file(&args.out.join("summary.csv"), csv)?;
    let text = diagnostics::format_summary_text(&rows);
    write_file(&args.out.join("summary.txt"), &text)?;

    let max_rhat = diagnostics::rhat_listing(&draws)
        .map_err(anyhow::Error::from)?
        .into_iter()
        .map(|(_, r)| r)
        .filter(|r| r.is_finite())
        .fold(f64::NAN, f64::max);
    print!("{text}");
    println!("observations: {}", table.len());
    println!("divergences: {}", draws.divergences());
    println!("max R-hat: {max_rhat:.4}");
    if max_rhat > RHAT_LIMIT {
        return Err(fail(EXIT_NONCONVERGENCE, anyhow!("max R-hat {max_rhat:.4} exceeds {RHAT_LIMIT}")));
    }
    Ok(())
}

fn fitted_years(draws: &PosteriorDraws) -> Vec<i32> {
    draws
        .names
        .iter()
        .filter_map(|n| n.strip_prefix("zeta_Y[")?.strip_suffix(']')?.parse().ok())
        .collect()
}

fn baseline_of(draws: &PosteriorDraws, requested: Option<i32>) -> anyhow::Result<i32> {
    match requested {
        Some(y) => Ok(y),
        None => fitted_years(draws).into_iter().min().ok_or_else(|| anyhow!("draws contain no year effects")),
    }
}

fn cmd_report(args: ReportArgs) -> CmdResult {
    let draws = load_draws(&args.draws)?;
    let scheme = load_scheme(&args.scheme)?;
    let baseline = baseline_of(&draws, args.baseline_year)?;
    let years = (!args.years.is_empty()).then_some(args.years.as_slice());
    let report = StatusReport::build(&draws, baseline, years, &scheme).map_err(anyhow::Error::from)?;
    create_dir(&args.out)?;
    write_file(&args.out.join("status.json"), report.to_json().map_err(anyhow::Error::from)?)?;
    for style in ReportStyle::ALL {
        for file in render_report(&report, style) {
            write_file(&args.out.join(&file.name), &file.contents)?;
        }
    }
    for (scope, years) in &report.scopes {
        for (year, st) in years {
            println!(
                "{scope} {year}: median {:.3}, P(decline) {:.3}, {}",
                st.median,
                st.p_decline,
                st.credibility.0.iter().map(|(l, p)| format!("{l} {p:.3}")).collect::<Vec<_>>().join(", ")
            );
        }
    }
    if !report.excluded_sites.is_empty() {
        println!("excluded (no baseline observation): {}", report.excluded_sites.join(", "));
    }
    Ok(())
}

fn summarize(values: &[f64]) -> anyhow::Result<serde_json::Value> {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let (lo, hi) = diagnostics::hdi(values, 0.95)?;
    Ok(serde_json::json!({ "mean": mean, "hdi_lower": lo, "hdi_upper": hi }))
}

fn cmd_diagnose(args: DiagnoseArgs) -> CmdResult {
    let draws = load_draws(&args.draws)?;
    let table = load_table(&args.data)?;
    create_dir(&args.out)?;
    let seed = args.sampler.seed.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let ppc = diagnostics::ppc_summary(&draws, &table, &mut rng, args.ppc_replicates).map_err(anyhow::Error::from)?;
    let mut buf = Vec::new();
    ppc.write_pairs_csv(&mut buf).map_err(anyhow::Error::from)?;
    write_file(&args.out.join("ppc_pairs.csv"), buf)?;
    let mut buf = Vec::new();
    ppc.write_density_csv(&mut buf).map_err(anyhow::Error::from)?;
    write_file(&args.out.join("ppc_density.csv"), buf)?;
    write_file(&args.out.join("ppc_pairs.svg"), plots::ppc_pairs(&ppc))?;
    write_file(&args.out.join("ppc_density.svg"), plots::ppc_density(&ppc))?;

    let config = args.sampler.config(SamplerConfig::desk());
    let dispersion =
        diagnostics::dispersion_check(&table, &PriorConfig::default(), &config, args.dispersion_sims, &mut rng)
            .map_err(anyhow::Error::from)?;
    write_file(&args.out.join("dispersion.json"), serde_json::to_string_pretty(&dispersion).map_err(anyhow::Error::from)?)?;

    let listing = diagnostics::rhat_listing(&draws).map_err(anyhow::Error::from)?;
    let mut rhat = String::from("parameter,rhat\n");
    for (name, r) in &listing {
        rhat.push_str(&format!("{name},{r}\n"));
    }
    write_file(&args.out.join("rhat.csv"), rhat)?;

    let r2 = diagnostics::bayes_r2(&draws, &table).map_err(anyhow::Error::from)?;
    let mut folds = serde_json::Map::new();
    for name in ["sigma_B", "sigma_S", "sigma_Y", "sigma_SY"] {
        let sigma = draws.pooled(name).map_err(anyhow::Error::from)?;
        folds.insert(name.to_string(), summarize(&diagnostics::variance_fold(&sigma))?);
    }
    let metrics = serde_json::json!({ "bayes_r2": summarize(&r2)?, "variance_fold": folds });
    write_file(&args.out.join("fit_metrics.json"), serde_json::to_string_pretty(&metrics).map_err(anyhow::Error::from)?)?;

    let max_rhat = listing.iter().map(|(_, r)| *r).filter(|r| r.is_finite()).fold(f64::NAN, f64::max);
    println!(
        "dispersion: observed {:.3}, simulated median {:.3}, p = {:.4}",
        dispersion.observed, dispersion.simulated_q500, dispersion.p_value
    );
    println!("Bayesian R2: {:.3}", r2.iter().sum::<f64>() / r2.len() as f64);
    println!("max R-hat: {max_rhat:.4}");
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> CmdResult {
    if args.sampler.seed.is_none() {
        return Err(fail(EXIT_USAGE, anyhow!("simulate needs --seed or REEFGAUGE_SEED")));
    }
    let draws = load_draws(&args.draws)?;
    let table = load_table(&args.data)?;
    let defaults = ScenarioGrid::default();
    let grid = ScenarioGrid {
        rho_levels: if args.rho.is_empty() { defaults.rho_levels } else { args.rho.clone() },
        alpha_levels: if args.alpha.is_empty() { defaults.alpha_levels } else { args.alpha.clone() },
        replicates: args.replicates.unwrap_or(defaults.replicates),
    };
    let scheme = load_scheme(&args.scheme)?;
    let config = args.sampler.config(SamplerConfig::desk());
    create_dir(&args.out)?;
    let options = RunOptions {
        scheme: scheme.clone(),
        baseline: args.baseline_year,
        ratio_includes_beta1: args.ratio_includes_beta1,
        checkpoint_dir: Some(args.out.join("checkpoints")),
        ..RunOptions::default()
    };
    println!(
        "grid: {} cells x {} replicates = {} fits",
        grid.cells().len(),
        grid.replicates,
        grid.cells().len() * grid.replicates
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let result = powersim::run_grid(&draws, &table, &grid, &config, &options, &mut rng).map_err(|e| {
        let code = if matches!(e, Error::Config(_)) { EXIT_USAGE } else { EXIT_SIMULATION };
        fail(code, e.into())
    })?;

    let mut buf = Vec::new();
    result.write_csv(&mut buf).map_err(anyhow::Error::from)?;
    write_file(&args.out.join("power.csv"), buf)?;
    write_file(&args.out.join("power.json"), result.to_json().map_err(anyhow::Error::from)?)?;
    let curve = powersim::category_curve(&result, &scheme);
    let mut buf = Vec::new();
    powersim::write_curve_csv(&curve, &scheme, &mut buf).map_err(anyhow::Error::from)?;
    write_file(&args.out.join("category_curve.csv"), buf)?;

    for c in &result.cells {
        println!("rho {:>5} alpha {:>3}: power {:.3} ({} done, {} failed)", c.rho, c.alpha, c.mean_power, c.completed, c.failed);
    }
    if let Some(c) = result.cells.iter().find(|c| c.completed == 0) {
        return Err(fail(
            EXIT_SIMULATION,
            anyhow!("every replicate failed for rho {} alpha {}", c.rho, c.alpha),
        ));
    }
    if result.failures() > 0 {
        log::warn!("{} replicate fits failed and were skipped", result.failures());
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let ds = synthetic::simulate_default_design(&GeneratingValues::reference(), &mut rng);
    let indicators = IndicatorList::from_json_reader(include_str!("../../core/data/indicators.json").as_bytes())
        .map_err(anyhow::Error::from)?;
    let records = synthetic::to_deployment_records(&ds.table, &indicators, &mut rng);
    let records = synthetic::with_unusable_deployment(records, &mut rng);
    create_dir(&args.out)?;
    let mut csv = String::from("site,year,station_id,species_code,maxn,usable\n");
    for r in &records {
        csv.push_str(&format!("{},{},{},{},{},{}\n", r.site, r.year, r.station_id, r.species_code, r.count, r.usable));
    }
    write_file(&args.out.join("deployments.csv"), csv)?;
    write_file(
        &args.out.join("indicators.json"),
        serde_json::to_string_pretty(indicators.entries()).map_err(anyhow::Error::from)?,
    )?;
    println!("wrote {} records for {} deployments", records.len(), ds.table.len());
    Ok(())
}
