//! Command implementations behind the `mlc` binary.

pub mod figures;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use mlc_core::harness::{
    self, pooled_summaries, read_results, summarize_records, write_summaries, GridConfig, HarnessError, KindModels,
    QuantileConvention, RunOptions,
};
use mlc_core::mlc::{self, EmConfig, FitError, FitResult, InitScheme, ModelSpec};
use mlc_core::recovery::{recover_beta, RecoveryConfig, RecoveryError};
use mlc_core::simcore::{self, SimConfig, SimError};

pub use figures::{figure_rows, write_figure, FigureId};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("fit did not converge: {0}")]
    Convergence(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Convergence(_) => 4,
            CliError::Internal(_) => 5,
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config { .. } | SimError::NotPositiveSemiDefinite => CliError::Validation(e.to_string()),
            SimError::AssignmentRetriesExhausted { .. } | SimError::TrustTooSmall { .. } => {
                CliError::Validation(e.to_string())
            }
            SimError::Malformed(_) | SimError::Io(_) | SimError::Csv(_) | SimError::Json(_) => CliError::Io(e.to_string()),
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::InvalidSpec(_) | FitError::InvalidParams(_) | FitError::EmptyTrust(_) => {
                CliError::Validation(e.to_string())
            }
            FitError::Degenerate(_) | FitError::Numerical(_) | FitError::AllRestartsDegenerate { .. } => {
                CliError::Convergence(e.to_string())
            }
        }
    }
}

impl From<RecoveryError> for CliError {
    fn from(e: RecoveryError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Sim(s) => s.into(),
            HarnessError::Fit(f) => f.into(),
            HarnessError::Config(_) | HarnessError::ResumeMismatch { .. } | HarnessError::EmptySummary => {
                CliError::Validation(e.to_string())
            }
            HarnessError::Simulation { .. } => CliError::Validation(e.to_string()),
            HarnessError::Malformed { .. } | HarnessError::Io { .. } | HarnessError::Csv(_) | HarnessError::Json(_) => {
                CliError::Io(e.to_string())
            }
            HarnessError::Pool(_) => CliError::Internal(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mlc", version, about = "Multilevel latent class simulation study")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one dataset (CSV plus JSON truth sidecar).
    Simulate {
        /// SimConfig JSON; defaults apply to omitted fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Fit one model to a dataset and write the FitResult as JSON.
    Fit {
        #[arg(long)]
        dataset: PathBuf,
        /// Model label such as 1P2T.
        #[arg(long, default_value = "1P2T")]
        model: ModelSpec,
        #[command(flatten)]
        em: EmArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover the Trust-level coefficient from a fit.
    Recover {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// RecoveryConfig JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a simulation grid, resuming a partial run in the same directory.
    Grid {
        /// GridConfig JSON; defaults apply to omitted fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        /// Run only this seed.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Comma-separated model labels used for every covariate kind.
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<ModelSpec>>,
        #[arg(long)]
        quantile_convention: Option<QuantileConvention>,
        /// Stop after this many newly run cells.
        #[arg(long)]
        max_cells: Option<usize>,
    },
    /// Recompute summary tables from results.csv.
    Summarize {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write pooled-across-seed percentiles here.
        #[arg(long)]
        pooled: Option<PathBuf>,
        #[arg(long, default_value_t = QuantileConvention::Type7)]
        quantile_convention: QuantileConvention,
    },
    /// Figure-ready CSV from summary.csv.
    PlotData {
        #[arg(long)]
        summary: PathBuf,
        #[arg(long)]
        figure: FigureId,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct EmArgs {
    /// EmConfig JSON; the flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub rel_tol: Option<f64>,
    #[arg(long, value_parser = parse_init)]
    pub init: Option<InitScheme>,
    #[arg(long)]
    pub seed_override: Option<u64>,
}

fn parse_init(s: &str) -> Result<InitScheme, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| format!("unknown init scheme {s:?} (expected trust-seeded or perturbed-ols)"))
}

impl EmArgs {
    pub fn resolve(&self) -> Result<EmConfig, CliError> {
        let mut em: EmConfig = match &self.config {
            Some(p) => read_config(p)?,
            None => EmConfig::default(),
        };
        if let Some(v) = self.restarts {
            em.n_restarts = v;
        }
        if let Some(v) = self.max_iter {
            em.max_iter = v;
        }
        if let Some(v) = self.rel_tol {
            em.rel_tol = v;
        }
        if let Some(v) = self.init {
            em.init = v;
        }
        if let Some(v) = self.seed_override {
            em.seed = v;
        }
        em.validate()?;
        Ok(em)
    }
}

/// Parse a JSON config. Syntax and schema errors are validation errors; a
/// missing file is an I/O error.
pub fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))? + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e)),
        _ => Ok(()),
    }
}

pub fn cmd_simulate(config: Option<&Path>, out: &Path, seed_override: Option<u64>) -> Result<(), CliError> {
    let mut cfg: SimConfig = match config {
        Some(p) => read_config(p)?,
        None => SimConfig::default(),
    };
    if let Some(s) = seed_override {
        cfg.seed = s;
    }
    let dataset = simcore::simulate_dataset(&cfg)?;
    ensure_parent(out)?;
    simcore::write_dataset(&dataset, out)?;
    log::info!("wrote {} patients to {}", dataset.patients.len(), out.display());
    Ok(())
}

/// Writes the fit even when it has not converged, then reports the
/// convergence failure.
pub fn cmd_fit(dataset: &Path, model: &ModelSpec, em: &EmConfig, out: &Path) -> Result<FitResult, CliError> {
    let data = simcore::read_dataset(dataset)?;
    let result = mlc::fit(&data, model, em)?;
    ensure_parent(out)?;
    write_json(out, &result)?;
    if !result.converged {
        return Err(CliError::Convergence(format!("{model} stopped after {} iterations", result.iterations)));
    }
    Ok(result)
}

pub fn cmd_recover(fit: &Path, dataset: &Path, config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let fit: FitResult = {
        let text = fs::read_to_string(fit).map_err(|e| CliError::io(fit, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::io(fit, e))?
    };
    let cfg: RecoveryConfig = match config {
        Some(p) => read_config(p)?,
        None => RecoveryConfig::default(),
    };
    let data = simcore::read_dataset(dataset)?;
    let recovered = recover_beta(&fit, &data, &cfg)?;
    ensure_parent(out)?;
    write_json(out, &recovered)
}

#[derive(Clone, Debug, Default)]
pub struct GridOverrides {
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub models: Option<Vec<ModelSpec>>,
    pub quantile_convention: Option<QuantileConvention>,
    pub max_cells: Option<usize>,
}

pub fn load_grid(config: Option<&Path>, o: &GridOverrides) -> Result<GridConfig, CliError> {
    let mut grid: GridConfig = match config {
        Some(p) => read_config(p)?,
        None => GridConfig::default(),
    };
    if let Some(s) = o.seed {
        grid.seeds = vec![s];
    }
    if let Some(m) = &o.models {
        grid.models = KindModels::uniform(m.clone());
    }
    if let Some(q) = o.quantile_convention {
        grid.quantile_convention = q;
    }
    grid.validate()?;
    Ok(grid)
}

pub fn cmd_grid(config: Option<&Path>, out: &Path, o: &GridOverrides) -> Result<harness::GridOutcome, CliError> {
    let grid = load_grid(config, o)?;
    let opts = RunOptions { workers: o.workers, max_cells: o.max_cells };
    let outcome = harness::run_grid(&grid, out, &opts)?;
    if outcome.complete {
        log::info!("{} cells run, {} resumed", outcome.cells_run, outcome.cells_resumed);
    } else {
        log::warn!("stopped early after {} cells; rerun to resume", outcome.cells_run);
    }
    Ok(outcome)
}

pub fn cmd_summarize(
    results: &Path,
    out: &Path,
    pooled: Option<&Path>,
    convention: QuantileConvention,
) -> Result<(), CliError> {
    let records = read_results(results)?;
    if records.is_empty() {
        return Err(CliError::Usage(format!("{} has no result rows", results.display())));
    }
    ensure_parent(out)?;
    write_summaries(out, &summarize_records(&records, convention)?)?;
    if let Some(p) = pooled {
        ensure_parent(p)?;
        write_summaries(p, &pooled_summaries(&records, convention)?)?;
    }
    Ok(())
}

pub fn cmd_plot_data(summary: &Path, figure: FigureId, out: &Path) -> Result<(), CliError> {
    let summaries = harness::read_summaries(summary)?;
    let rows = figure_rows(&summaries, figure);
    if rows.is_empty() {
        return Err(CliError::Usage(format!("{} has no rows for {figure}", summary.display())));
    }
    ensure_parent(out)?;
    write_figure(out, figure, &rows).map_err(|e| CliError::io(out, e))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, out, seed_override } => cmd_simulate(config.as_deref(), &out, seed_override),
        Command::Fit { dataset, model, em, out } => cmd_fit(&dataset, &model, &em.resolve()?, &out).map(|_| ()),
        Command::Recover { fit, dataset, config, out } => cmd_recover(&fit, &dataset, config.as_deref(), &out),
        Command::Grid { config, out, workers, seed_override, models, quantile_convention, max_cells } => {
            let o = GridOverrides { workers, seed: seed_override, models, quantile_convention, max_cells };
            cmd_grid(config.as_deref(), &out, &o).map(|_| ())
        }
        Command::Summarize { results, out, pooled, quantile_convention } => {
            cmd_summarize(&results, &out, pooled.as_deref(), quantile_convention)
        }
        Command::PlotData { summary, figure, out } => cmd_plot_data(&summary, figure, &out),
    }
}
