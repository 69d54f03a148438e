//! Monte Carlo grid over covariate kinds, effect sizes, error fractions and
//! seeds, with percentile summaries of the recovered Trust-level coefficient.

mod io;
mod manifest;
mod summary;

pub use io::{read_results, read_summaries, write_results, write_summaries, RESULTS_HEADER, SUMMARY_HEADER};
pub use manifest::{canonical_json, config_hash, RunManifest};
pub use summary::{
    average_over_seeds, pooled_summaries, quantile, summarize, summarize_records, CellSummary, QuantileConvention,
    SeedLabel, Summary,
};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mlc::{fit, EmConfig, FitError, ModelSpec};
use crate::recovery::{recover_or_exclude, RecoveredBeta, RecoveryConfig};
use crate::rng::{derive_seed, tag};
use crate::simcore::{
    simulate_dataset, CovariateModel, ErrorVarianceBasis, PatientBetas, SimConfig, SimError, TrustCovariateKind,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid grid configuration: {0}")]
    Config(String),
    #[error("no values to summarise")]
    EmptySummary,
    #[error("simulation failed for cell {cell}, dataset {dataset}: {source}")]
    Simulation {
        cell: String,
        dataset: usize,
        #[source]
        source: SimError,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("manifest in {dir} belongs to a different configuration (hash {found}, expected {expected})")]
    ResumeMismatch { dir: PathBuf, found: String, expected: String },
    #[error("malformed {what}: {message}")]
    Malformed { what: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKindName {
    Binary,
    Continuous,
}

impl CovariateKindName {
    pub fn as_str(self) -> &'static str {
        match self {
            CovariateKindName::Binary => "binary",
            CovariateKindName::Continuous => "continuous",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "binary" => Some(CovariateKindName::Binary),
            "continuous" => Some(CovariateKindName::Continuous),
            _ => None,
        }
    }
}

impl fmt::Display for CovariateKindName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Simulated β_T values per covariate kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaTable {
    pub binary: Vec<f64>,
    pub continuous: Vec<f64>,
}

impl Default for BetaTable {
    fn default() -> Self {
        Self { binary: vec![0.027, 0.137, 0.250, 0.500, 0.684], continuous: vec![0.011, 0.053, 0.120, 0.200, 0.264] }
    }
}

impl BetaTable {
    pub fn get(&self, kind: CovariateKindName) -> &[f64] {
        match kind {
            CovariateKindName::Binary => &self.binary,
            CovariateKindName::Continuous => &self.continuous,
        }
    }
}

/// Models fitted to each dataset, per covariate kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KindModels {
    pub binary: Vec<ModelSpec>,
    pub continuous: Vec<ModelSpec>,
}

impl Default for KindModels {
    fn default() -> Self {
        Self {
            binary: (2..=4).map(|t| ModelSpec::new(1, t)).collect(),
            continuous: (2..=5).map(|t| ModelSpec::new(1, t)).collect(),
        }
    }
}

impl KindModels {
    pub fn get(&self, kind: CovariateKindName) -> &[ModelSpec] {
        match kind {
            CovariateKindName::Binary => &self.binary,
            CovariateKindName::Continuous => &self.continuous,
        }
    }

    /// The same model list for both kinds.
    pub fn uniform(models: Vec<ModelSpec>) -> Self {
        Self { binary: models.clone(), continuous: models }
    }
}

/// Simulation settings shared by every cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseSim {
    pub n_patients: usize,
    pub n_trusts: usize,
    pub patient_betas: PatientBetas,
    pub covariate_model: CovariateModel,
    pub error_variance_basis: ErrorVarianceBasis,
    pub size_concentration: f64,
    pub min_trust_size: usize,
    pub max_assign_retries: usize,
    pub binary: TrustCovariateKind,
    pub continuous: TrustCovariateKind,
}

impl Default for BaseSim {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            n_patients: d.n_patients,
            n_trusts: d.n_trusts,
            patient_betas: d.patient_betas,
            covariate_model: d.covariate_model,
            error_variance_basis: d.error_variance_basis,
            size_concentration: d.size_concentration,
            min_trust_size: d.min_trust_size,
            max_assign_retries: d.max_assign_retries,
            binary: TrustCovariateKind::binary(),
            continuous: TrustCovariateKind::continuous(),
        }
    }
}

impl BaseSim {
    pub fn sim_config(&self, kind: CovariateKindName, beta_t: f64, error_fraction: f64, seed: u64) -> SimConfig {
        SimConfig {
            n_patients: self.n_patients,
            n_trusts: self.n_trusts,
            patient_betas: self.patient_betas,
            covariate_model: self.covariate_model,
            trust_kind: match kind {
                CovariateKindName::Binary => self.binary,
                CovariateKindName::Continuous => self.continuous,
            },
            beta_t,
            error_fraction,
            error_variance_basis: self.error_variance_basis,
            seed,
            size_concentration: self.size_concentration,
            min_trust_size: self.min_trust_size,
            max_assign_retries: self.max_assign_retries,
        }
    }
}

/// Everything that determines a grid's results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub kinds: Vec<CovariateKindName>,
    pub beta_t: BetaTable,
    pub error_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub n_datasets: usize,
    pub models: KindModels,
    pub sim: BaseSim,
    pub em: EmConfig,
    pub recovery: RecoveryConfig,
    pub quantile_convention: QuantileConvention,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            kinds: vec![CovariateKindName::Binary, CovariateKindName::Continuous],
            beta_t: BetaTable::default(),
            error_fractions: vec![0.33, 0.50, 0.67],
            seeds: vec![1, 2, 3],
            n_datasets: 100,
            models: KindModels::default(),
            sim: BaseSim::default(),
            em: EmConfig::default(),
            recovery: RecoveryConfig::default(),
            quantile_convention: QuantileConvention::default(),
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.kinds.is_empty() {
            return cfg("kinds: at least one covariate kind is required");
        }
        if self.error_fractions.is_empty() || self.seeds.is_empty() {
            return cfg("error_fractions and seeds must be nonempty");
        }
        if self.n_datasets == 0 {
            return cfg("n_datasets must be at least 1");
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return cfg("seeds must be distinct");
        }
        for &kind in &self.kinds {
            if self.beta_t.get(kind).is_empty() {
                return cfg(&format!("beta_t.{kind}: no values"));
            }
            let models = self.models.get(kind);
            if models.is_empty() {
                return cfg(&format!("models.{kind}: at least one model is required"));
            }
            for m in models {
                m.validate()?;
            }
            for &b in self.beta_t.get(kind) {
                for &f in &self.error_fractions {
                    self.sim.sim_config(kind, b, f, 0).validate()?;
                }
            }
        }
        self.em.validate()?;
        Ok(())
    }

    /// Cells in execution and output order: kind, β_T, fraction, seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &kind in &self.kinds {
            for &beta_t in self.beta_t.get(kind) {
                for &error_fraction in &self.error_fractions {
                    for &seed in &self.seeds {
                        out.push(Cell {
                            kind,
                            beta_t,
                            error_fraction,
                            seed,
                            n_datasets: self.n_datasets,
                            models: self.models.get(kind).to_vec(),
                        });
                    }
                }
            }
        }
        out
    }
}

/// One (kind, β_T, fraction, seed) combination and the models fitted in it.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub kind: CovariateKindName,
    pub beta_t: f64,
    pub error_fraction: f64,
    pub seed: u64,
    pub n_datasets: usize,
    pub models: Vec<ModelSpec>,
}

impl Cell {
    /// File-name-safe identifier.
    pub fn key(&self) -> String {
        format!("{}_b{}_f{}_s{}", self.kind, self.beta_t, self.error_fraction, self.seed)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_datasets == 0 {
            return Err(HarnessError::Config(format!("cell {}: n_datasets must be at least 1", self.key())));
        }
        if self.models.is_empty() {
            return Err(HarnessError::Config(format!("cell {}: no models", self.key())));
        }
        Ok(())
    }

    /// Seed of dataset `d`; the same for every β_T and fraction sharing this seed.
    pub fn dataset_seed(&self, d: usize) -> u64 {
        derive_seed(self.seed, &[tag::DATASET, d as u64])
    }
}

/// One row of results.csv.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRecord {
    pub kind: CovariateKindName,
    pub beta_t_sim: f64,
    pub error_frac: f64,
    pub seed: u64,
    pub model_p: usize,
    pub model_t: usize,
    pub dataset_id: usize,
    pub outcome: RecoveredBeta,
}

fn fit_seed(em_seed: u64, dataset_seed: u64, spec: &ModelSpec) -> u64 {
    derive_seed(em_seed, &[tag::FIT, dataset_seed, spec.n_patient_classes as u64, spec.n_trust_classes as u64])
}

/// Simulate, fit and recover every dataset of a cell.
///
/// Records are ordered by model, then dataset. Fit and recovery failures
/// become exclusions; only a failed simulation aborts the cell.
pub fn run_cell(
    cell: &Cell,
    sim: &BaseSim,
    em: &EmConfig,
    recovery: &RecoveryConfig,
) -> Result<Vec<ResultRecord>, HarnessError> {
    cell.validate()?;
    let per_dataset: Vec<Vec<RecoveredBeta>> = (0..cell.n_datasets)
        .into_par_iter()
        .map(|d| {
            let seed = cell.dataset_seed(d);
            let config = sim.sim_config(cell.kind, cell.beta_t, cell.error_fraction, seed);
            let dataset = simulate_dataset(&config).map_err(|source| HarnessError::Simulation {
                cell: cell.key(),
                dataset: d,
                source,
            })?;
            Ok(cell
                .models
                .par_iter()
                .map(|spec| {
                    let em = EmConfig { seed: fit_seed(em.seed, seed, spec), ..em.clone() };
                    let result = fit(&dataset, spec, &em);
                    if let Err(e) = &result {
                        log::debug!("{} dataset {d} {spec}: {e}", cell.key());
                    }
                    recover_or_exclude(result.as_ref(), &dataset, recovery)
                })
                .collect())
        })
        .collect::<Result<_, HarnessError>>()?;

    let mut out = Vec::with_capacity(cell.n_datasets * cell.models.len());
    for (m, spec) in cell.models.iter().enumerate() {
        for (d, outcomes) in per_dataset.iter().enumerate() {
            out.push(ResultRecord {
                kind: cell.kind,
                beta_t_sim: cell.beta_t,
                error_frac: cell.error_fraction,
                seed: cell.seed,
                model_p: spec.n_patient_classes,
                model_t: spec.n_trust_classes,
                dataset_id: d,
                outcome: outcomes[m].clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Threads in the worker pool; `None` uses rayon's default.
    pub workers: Option<usize>,
    /// Stop after running this many new cells, leaving a resumable directory.
    pub max_cells: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub complete: bool,
    pub cells_run: usize,
    pub cells_resumed: usize,
    pub results: Vec<ResultRecord>,
    pub summaries: Vec<CellSummary>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const POOLED_FILE: &str = "summary_pooled.csv";
pub const CELLS_DIR: &str = "cells";

/// Run every cell of `grid` into `out_dir`.
///
/// Each finished cell is written to `cells/<key>.csv` and recorded in the
/// manifest before the next starts, so an interrupted run resumes where it
/// stopped. A directory whose manifest hash differs from `grid` is refused.
pub fn run_grid(grid: &GridConfig, out_dir: &Path, opts: &RunOptions) -> Result<GridOutcome, HarnessError> {
    grid.validate()?;
    let hash = config_hash(grid)?;
    let cells_dir = out_dir.join(CELLS_DIR);
    fs::create_dir_all(&cells_dir).map_err(|e| HarnessError::io(&cells_dir, e))?;

    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut manifest = if manifest_path.exists() {
        let m = RunManifest::load(&manifest_path)?;
        if m.config_hash != hash {
            return Err(HarnessError::ResumeMismatch {
                dir: out_dir.to_path_buf(),
                found: m.config_hash,
                expected: hash,
            });
        }
        m
    } else {
        RunManifest::new(hash, grid.quantile_convention)
    };
    manifest.finished_at = None;
    manifest.save(&manifest_path)?;
    let config_path = out_dir.join(CONFIG_FILE);
    fs::write(&config_path, serde_json::to_string_pretty(grid)? + "\n").map_err(|e| HarnessError::io(&config_path, e))?;

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = opts.workers {
        builder = builder.num_threads(w);
    }
    let pool = builder.build().map_err(|e| HarnessError::Pool(e.to_string()))?;

    let cells = grid.cells();
    let mut results = Vec::new();
    let (mut cells_run, mut cells_resumed) = (0, 0);
    for cell in &cells {
        let key = cell.key();
        let cell_path = cells_dir.join(format!("{key}.csv"));
        if manifest.completed_cells.contains(&key) && cell_path.exists() {
            results.extend(read_results(&cell_path)?);
            cells_resumed += 1;
            continue;
        }
        if opts.max_cells.is_some_and(|m| cells_run >= m) {
            log::info!("stopping after {cells_run} cells; {} remain", cells.len() - cells_run - cells_resumed);
            return Ok(GridOutcome { complete: false, cells_run, cells_resumed, results, summaries: Vec::new() });
        }
        log::info!("running cell {key}");
        let records = pool.install(|| run_cell(cell, &grid.sim, &grid.em, &grid.recovery))?;
        write_results(&cell_path, &records)?;
        manifest.completed_cells.retain(|k| k != &key);
        manifest.completed_cells.push(key);
        manifest.save(&manifest_path)?;
        results.extend(records);
        cells_run += 1;
    }

    let summaries = summarize_records(&results, grid.quantile_convention)?;
    let pooled = pooled_summaries(&results, grid.quantile_convention)?;
    write_results(&out_dir.join(RESULTS_FILE), &results)?;
    write_summaries(&out_dir.join(SUMMARY_FILE), &summaries)?;
    write_summaries(&out_dir.join(POOLED_FILE), &pooled)?;
    manifest.finish();
    manifest.save(&manifest_path)?;
    Ok(GridOutcome { complete: true, cells_run, cells_resumed, results, summaries })
}
