use std::path::{Path, PathBuf};
use std::process::ExitCode;

use brmeta::dataset::{ingest, write_dataset, write_json, DataPaths, PartitionMode};
use brmeta::extremes::DependenceParams;
use brmeta::simulate::{grid_sites, linear_location_margins, simulate_gev_field, smooth_surface_margins, Margins, SimConfig};
use brmeta::svc::PenaltyConfig;
use brmeta::workflow::{
    diagnose, emit_fit, fit_dataset, pit_summary, read_config, read_model, return_levels, write_pit,
    write_return_levels, ModelMode, RunConfig,
};
use brmeta::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "brmeta", version, about = "Distributed Brown-Resnick max-stable process estimation")]
struct Cli {
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset on a regular grid.
    Simulate(SimulateArgs),
    /// Fit the stationary model.
    Fit(FitArgs),
    /// Fit the spatially varying coefficient model.
    FitSvc(FitSvcArgs),
    /// Probability integral transform of the data under a fitted model.
    Diagnose(DiagnoseArgs),
    /// Return levels of the annual maximum at every site.
    ReturnLevels(ReturnLevelArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MarginKind {
    /// `mu = beta11 x + beta12 y`, constant scale and shape.
    Linear,
    /// Smooth nonlinear location and log-scale surfaces.
    Surface,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 10)]
    nx: usize,
    #[arg(long, default_value_t = 10)]
    ny: usize,
    /// Number of replicates.
    #[arg(short = 'n', long, default_value_t = 500)]
    replicates: usize,
    #[arg(long, default_value_t = 0.8)]
    alpha: f64,
    #[arg(long, default_value_t = 10.0)]
    phi: f64,
    #[arg(long, value_enum, default_value_t = MarginKind::Linear)]
    margins: MarginKind,
    /// Location slopes for linear margins.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.5])]
    beta1: Vec<f64>,
    #[arg(long, default_value_t = 1.5, allow_hyphen_values = true)]
    log_sigma: f64,
    #[arg(long, default_value_t = 0.2, allow_hyphen_values = true)]
    xi: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Sites table: site_id,x,y[,block][,covariates...].
    #[arg(long)]
    sites: PathBuf,
    /// Observations table: replicate_id,site_id,value.
    #[arg(long)]
    observations: PathBuf,
    /// Per-replicate covariates: replicate_id,covariates...
    #[arg(long)]
    replicate_covariates: Option<PathBuf>,
}

impl DataArgs {
    fn paths(&self) -> DataPaths {
        DataPaths {
            sites: self.sites.clone(),
            observations: self.observations.clone(),
            replicate_covariates: self.replicate_covariates.clone(),
        }
    }

    fn inputs(&self) -> Vec<&Path> {
        let mut v = vec![self.sites.as_path(), self.observations.as_path()];
        v.extend(self.replicate_covariates.as_deref());
        v
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Threshold quantile level.
    #[arg(short, long)]
    quantile: Option<f64>,
    /// Target sites per block for the grid partition.
    #[arg(long, conflicts_with = "label_partition")]
    block_size: Option<usize>,
    /// Partition by the sites table's `block` column.
    #[arg(long)]
    label_partition: bool,
    /// Location formula, e.g. `1,x,y`.
    #[arg(long)]
    location: Option<String>,
    /// Log-scale formula.
    #[arg(long)]
    scale: Option<String>,
    /// Shape formula.
    #[arg(long)]
    shape: Option<String>,
    #[arg(short, long)]
    workers: Option<usize>,
    /// Standardize each site by its median and 5%-95% range.
    #[arg(long)]
    standardize: bool,
    /// Drop blocks that fail to converge instead of aborting.
    #[arg(long)]
    drop_failed: bool,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct FitSvcArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Knots per block.
    #[arg(long)]
    knots: Option<usize>,
    /// Omit the linear basis columns.
    #[arg(long)]
    no_linear: bool,
    #[arg(long)]
    kernel_scale: Option<f64>,
    /// Candidate penalties on the location coefficients.
    #[arg(long, value_delimiter = ',')]
    lambda1: Option<Vec<f64>>,
    /// Candidate penalties on the log-scale coefficients.
    #[arg(long, value_delimiter = ',')]
    lambda2: Option<Vec<f64>>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Fitted model file written by `fit` or `fit-svc`.
    #[arg(long)]
    model: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReturnLevelArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    /// Return periods in years.
    #[arg(long, value_delimiter = ',', default_values_t = [10.0, 50.0, 100.0])]
    periods: Vec<f64>,
    /// Replicates per year.
    #[arg(long, default_value_t = 12)]
    per_year: usize,
    /// Index of the first replicate of the reference year.
    #[arg(long, default_value_t = 0)]
    first: usize,
    #[arg(short, long)]
    out: PathBuf,
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let sites = grid_sites(a.nx, a.ny);
    let margins = match a.margins {
        MarginKind::Linear => {
            if a.beta1.len() != 2 {
                return Err(Error::Config("--beta1 takes two values".into()));
            }
            linear_location_margins(&sites, [a.beta1[0], a.beta1[1]], a.log_sigma, a.xi)
        }
        MarginKind::Surface => smooth_surface_margins(&sites, a.xi),
    };
    let dep = DependenceParams::from_natural(a.alpha, a.phi)?;
    let cfg = SimConfig::new(sites.clone(), a.replicates, dep, a.seed).with_margins(Margins::PerSite(margins.clone()));
    let y = simulate_gev_field(&cfg)?;
    let ids: Vec<String> = (1..=sites.len()).map(|j| format!("s{j}")).collect();
    write_dataset(&a.out, &ids, &sites, &y)?;
    let truth = json!({
        "alpha": a.alpha,
        "phi": a.phi,
        "seed": a.seed,
        "margins": ids.iter().zip(&margins).map(|(id, g)| json!({
            "site_id": id, "mu": g.mu, "sigma": g.sigma, "xi": g.xi
        })).collect::<Vec<_>>(),
    });
    write_json(&a.out.join("truth.json"), &truth)?;
    log::info!("wrote {} replicates at {} sites to {}", a.replicates, sites.len(), a.out.display());
    Ok(())
}

fn run_config(a: &RunArgs, model: ModelMode) -> Result<RunConfig> {
    let mut c = match &a.config {
        Some(p) => read_config(p)?,
        None => RunConfig::default(),
    };
    c.model = model;
    if let Some(q) = a.quantile {
        c.threshold_quantile = q;
    }
    if let Some(b) = a.block_size {
        c.partition = PartitionMode::Grid { block_size: b };
    }
    if a.label_partition {
        c.partition = PartitionMode::Label;
    }
    if let Some(f) = &a.location {
        c.formulas.location = f.clone();
    }
    if let Some(f) = &a.scale {
        c.formulas.log_scale = f.clone();
    }
    if let Some(f) = &a.shape {
        c.formulas.shape = f.clone();
    }
    if let Some(w) = a.workers {
        c.workers = w;
    }
    c.standardize |= a.standardize;
    c.drop_failed |= a.drop_failed;
    if let Some(m) = a.max_iter {
        c.optim.max_iter = m;
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    Ok(c)
}

fn fit(a: &RunArgs, cfg: RunConfig) -> Result<()> {
    cfg.validate()?;
    let mut data = ingest(&a.data.paths())?;
    let outcome = fit_dataset(&mut data, &cfg)?;
    emit_fit(&a.out, &data, &cfg, &outcome, &a.data.inputs())?;
    let r = &outcome.report;
    println!(
        "alpha = {:.4} ({:.4}), phi = {:.4} ({:.4}); {} blocks, results in {}",
        r.alpha.estimate,
        r.alpha.se,
        r.phi.estimate,
        r.phi.se,
        r.blocks,
        a.out.display()
    );
    Ok(())
}

fn fit_svc(a: &FitSvcArgs) -> Result<()> {
    let mut cfg = run_config(&a.run, ModelMode::Svc)?;
    if let Some(k) = a.knots {
        cfg.svc.knots = Some(k);
    }
    if a.no_linear {
        cfg.svc.linear = false;
    }
    if let Some(s) = a.kernel_scale {
        cfg.svc.kernel_scale = s;
    }
    let PenaltyConfig { grid1, grid2, .. } = &mut cfg.svc.penalty;
    if let Some(g) = &a.lambda1 {
        *grid1 = g.clone();
    }
    if let Some(g) = &a.lambda2 {
        *grid2 = g.clone();
    }
    fit(&a.run, cfg)
}

fn run_diagnose(a: &DiagnoseArgs) -> Result<()> {
    let data = ingest(&a.data.paths())?;
    let model = read_model(&a.model)?;
    let pit = diagnose(&model, &data)?;
    std::fs::create_dir_all(&a.out)?;
    write_pit(&a.out.join("pit.csv"), &data, &pit)?;
    let summary = pit_summary(&pit);
    write_json(&a.out.join("diagnostics.json"), &summary)?;
    println!(
        "PIT uniformity: KS statistic {:.4}, p-value {:.4}; {} values outside the support",
        summary.ks_statistic, summary.ks_p_value, summary.outside_support
    );
    Ok(())
}

fn run_return_levels(a: &ReturnLevelArgs) -> Result<()> {
    let data = ingest(&a.data.paths())?;
    let model = read_model(&a.model)?;
    let levels = return_levels(&model, &data, &a.periods, a.first, a.per_year)?;
    std::fs::create_dir_all(&a.out)?;
    write_return_levels(&a.out.join("return_levels.csv"), &levels)?;
    println!("{} return levels written to {}", levels.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => run_config(&a.run, ModelMode::Stationary).and_then(|c| fit(&a.run, c)),
        Command::FitSvc(a) => fit_svc(a),
        Command::Diagnose(a) => run_diagnose(a),
        Command::ReturnLevels(a) => run_return_levels(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
