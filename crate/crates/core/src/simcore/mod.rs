//! Synthetic two-level datasets: patients nested within Trusts.
//!
//! Generation runs in four stages, each on its own stream derived from
//! [`SimConfig::seed`]:
//!
//! 1. patient covariates (age, sex, socio-economic status) from a trivariate
//!    normal, sex dichotomised at the sample median, age and ses centred;
//! 2. assignment of patients to Trusts with Dirichlet-distributed size weights;
//! 3. the Trust-level covariate (binary with jitter, or continuous);
//! 4. normal error with variance set to a fraction of the median within-Trust
//!    variance of the error-free outcome.

mod covariates;
mod io;
mod outcome;
mod trusts;

pub use covariates::{draw_patient_covariates, semidefinite_cholesky, PatientCovariates};
pub use io::{read_dataset, sidecar_path, write_dataset, DatasetSidecar};
pub use outcome::{error_scale, linear_predictor, ErrorScale};
pub use trusts::{assign_trusts, draw_trust_covariate};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stage_rng, Stage};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },
    #[error("correlation matrix is not positive semi-definite")]
    NotPositiveSemiDefinite,
    #[error("no Trust assignment with every Trust of size >= {min_trust_size} after {retries} retries")]
    AssignmentRetriesExhausted { retries: usize, min_trust_size: usize },
    #[error("Trust {trust} has {size} patients; at least 2 are needed for a within-Trust variance")]
    TrustTooSmall { trust: usize, size: usize },
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SimError {
    pub(crate) fn config(field: &str, message: impl Into<String>) -> Self {
        SimError::Config { field: field.to_string(), message: message.into() }
    }
}

/// Patient-level coefficients of the linear predictor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatientBetas {
    pub beta0: f64,
    pub beta_age: f64,
    pub beta_sex: f64,
    pub beta_ses: f64,
}

impl Default for PatientBetas {
    fn default() -> Self {
        Self { beta0: -0.0265, beta_age: 0.0547, beta_sex: -0.1368, beta_ses: 0.0527 }
    }
}

/// Marginal scales and correlation of the latent trivariate normal over
/// (age, sex-latent, ses).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateModel {
    pub sd_age: f64,
    pub sd_ses: f64,
    pub correlation_matrix: [[f64; 3]; 3],
}

impl Default for CovariateModel {
    fn default() -> Self {
        Self {
            sd_age: 11.6,
            sd_ses: 3.18,
            correlation_matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }
}

impl CovariateModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.sd_age > 0.0 && self.sd_age.is_finite()) {
            return Err(SimError::config("covariate_model.sd_age", "must be positive and finite"));
        }
        if !(self.sd_ses > 0.0 && self.sd_ses.is_finite()) {
            return Err(SimError::config("covariate_model.sd_ses", "must be positive and finite"));
        }
        let r = &self.correlation_matrix;
        for i in 0..3 {
            if (r[i][i] - 1.0).abs() > 1e-12 {
                return Err(SimError::config(
                    "covariate_model.correlation_matrix",
                    "diagonal entries must be 1",
                ));
            }
            for j in 0..3 {
                if !r[i][j].is_finite() || (r[i][j] - r[j][i]).abs() > 1e-12 {
                    return Err(SimError::config(
                        "covariate_model.correlation_matrix",
                        "must be finite and symmetric",
                    ));
                }
            }
        }
        semidefinite_cholesky(r).map(|_| ())
    }
}

/// How the Trust-level covariate is generated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrustCovariateKind {
    /// `low` or `high` with probability one half each, plus normal jitter.
    Binary { low: f64, high: f64, jitter_sd: f64 },
    /// Uniform on `[min, max]`, or sampled with replacement from `grid`
    /// evenly spaced values spanning the range.
    Continuous { min: f64, max: f64, grid: Option<usize> },
}

impl TrustCovariateKind {
    pub fn binary() -> Self {
        TrustCovariateKind::Binary { low: -0.5, high: 0.5, jitter_sd: 0.01 }
    }

    pub fn continuous() -> Self {
        TrustCovariateKind::Continuous { min: -0.5, max: 0.5, grid: None }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        match *self {
            TrustCovariateKind::Binary { low, high, jitter_sd } => {
                if !(jitter_sd >= 0.0 && jitter_sd.is_finite()) {
                    return Err(SimError::config("trust_kind.jitter_sd", "must be >= 0"));
                }
                if !(low < high) || !low.is_finite() || !high.is_finite() {
                    return Err(SimError::config("trust_kind", "binary levels need low < high"));
                }
            }
            TrustCovariateKind::Continuous { min, max, grid } => {
                if !(min < max) || !min.is_finite() || !max.is_finite() {
                    return Err(SimError::config("trust_kind", "continuous range needs min < max"));
                }
                if matches!(grid, Some(g) if g < 2) {
                    return Err(SimError::config("trust_kind.grid", "grid needs at least 2 points"));
                }
            }
        }
        Ok(())
    }
}

impl Default for TrustCovariateKind {
    fn default() -> Self {
        Self::binary()
    }
}

/// Which variance of the error-free outcome the error fraction multiplies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorVarianceBasis {
    /// Median across Trusts of the within-Trust sample variance.
    #[default]
    WithinTrustMedian,
    /// Sample variance over all patients.
    Global,
}

/// Complete parameterisation of one simulated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_patients: usize,
    pub n_trusts: usize,
    pub patient_betas: PatientBetas,
    pub covariate_model: CovariateModel,
    pub trust_kind: TrustCovariateKind,
    pub beta_t: f64,
    pub error_fraction: f64,
    pub error_variance_basis: ErrorVarianceBasis,
    pub seed: u64,
    pub size_concentration: f64,
    pub min_trust_size: usize,
    pub max_assign_retries: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_patients: 24_640,
            n_trusts: 19,
            patient_betas: PatientBetas::default(),
            covariate_model: CovariateModel::default(),
            trust_kind: TrustCovariateKind::default(),
            beta_t: 0.137,
            error_fraction: 0.33,
            error_variance_basis: ErrorVarianceBasis::default(),
            seed: 1,
            size_concentration: 5.0,
            min_trust_size: 10,
            max_assign_retries: 100,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_trusts < 2 {
            return Err(SimError::config("n_trusts", "at least 2 Trusts are required"));
        }
        if self.min_trust_size < 2 {
            return Err(SimError::config("min_trust_size", "must be at least 2"));
        }
        let needed = self.n_trusts * self.min_trust_size;
        if self.n_patients < needed {
            return Err(SimError::config(
                "n_patients",
                format!(
                    "{} < n_trusts x min_trust_size = {} x {} = {needed}",
                    self.n_patients, self.n_trusts, self.min_trust_size
                ),
            ));
        }
        // zero is admitted for error-free diagnostics
        if !(0.0..1.0).contains(&self.error_fraction) {
            return Err(SimError::config("error_fraction", "must lie in [0, 1)"));
        }
        if !self.beta_t.is_finite() {
            return Err(SimError::config("beta_t", "must be finite"));
        }
        let b = &self.patient_betas;
        if ![b.beta0, b.beta_age, b.beta_sex, b.beta_ses].iter().all(|v| v.is_finite()) {
            return Err(SimError::config("patient_betas", "all coefficients must be finite"));
        }
        if !(self.size_concentration > 0.0 && self.size_concentration.is_finite()) {
            return Err(SimError::config("size_concentration", "must be positive and finite"));
        }
        if self.max_assign_retries == 0 {
            return Err(SimError::config("max_assign_retries", "must be at least 1"));
        }
        self.covariate_model.validate()?;
        self.trust_kind.validate()
    }
}

/// One simulated patient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRow {
    pub trust_id: usize,
    pub age: f64,
    pub sex: u8,
    pub ses: f64,
    pub outcome: f64,
}

/// Generating values retained alongside the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub beta_t: f64,
    pub realized_error_variance: f64,
    pub error_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub patients: Vec<PatientRow>,
    pub trust_covariate: Vec<f64>,
    pub truth: Truth,
}

impl Dataset {
    pub fn n_trusts(&self) -> usize {
        self.trust_covariate.len()
    }

    pub fn trust_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_trusts()];
        for p in &self.patients {
            sizes[p.trust_id] += 1;
        }
        sizes
    }

    /// Checks the structural invariants every emitted dataset satisfies.
    pub fn check_invariants(&self, min_trust_size: usize) -> Result<(), SimError> {
        let k = self.n_trusts();
        if let Some(p) = self.patients.iter().find(|p| p.trust_id >= k) {
            return Err(SimError::Malformed(format!("trust_id {} out of range", p.trust_id)));
        }
        if let Some((j, &n)) = self.trust_sizes().iter().enumerate().find(|(_, &n)| n < min_trust_size) {
            return Err(SimError::Malformed(format!("Trust {j} has only {n} patients")));
        }
        let n = self.patients.len() as f64;
        let mean_age = self.patients.iter().map(|p| p.age).sum::<f64>() / n;
        let mean_ses = self.patients.iter().map(|p| p.ses).sum::<f64>() / n;
        if mean_age.abs() >= 1e-9 || mean_ses.abs() >= 1e-9 {
            return Err(SimError::Malformed("age/ses not centred".into()));
        }
        let ones = self.patients.iter().filter(|p| p.sex == 1).count();
        let zeros = self.patients.iter().filter(|p| p.sex == 0).count();
        if ones + zeros != self.patients.len() || ones.abs_diff(zeros) > 1 {
            return Err(SimError::Malformed("sex must split 0/1 at the median".into()));
        }
        Ok(())
    }
}

/// Simulate one dataset. Pure function of `config`.
pub fn simulate_dataset(config: &SimConfig) -> Result<Dataset, SimError> {
    config.validate()?;

    let mut rng = stage_rng(config.seed, Stage::Covariates);
    let covs = draw_patient_covariates(config.n_patients, &config.covariate_model, &mut rng)?;

    let mut rng = stage_rng(config.seed, Stage::Assignment);
    let assignment = assign_trusts(
        config.n_patients,
        config.n_trusts,
        config.size_concentration,
        config.min_trust_size,
        config.max_assign_retries,
        &mut rng,
    )?;

    let mut rng = stage_rng(config.seed, Stage::TrustCovariate);
    let trust_covariate = draw_trust_covariate(&config.trust_kind, config.n_trusts, &mut rng);

    let error_free: Vec<f64> = covs
        .iter()
        .zip(&assignment)
        .map(|(c, &j)| linear_predictor(c, trust_covariate[j], &config.patient_betas, config.beta_t))
        .collect();
    let scale = error_scale(
        &error_free,
        &assignment,
        config.n_trusts,
        config.error_fraction,
        config.error_variance_basis,
    )?;

    let mut rng = stage_rng(config.seed, Stage::Noise);
    let patients = covs
        .iter()
        .zip(&assignment)
        .zip(&error_free)
        .map(|((c, &trust_id), &mu)| {
            let z: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
            PatientRow { trust_id, age: c.age, sex: c.sex, ses: c.ses, outcome: mu + scale.sd * z }
        })
        .collect();

    Ok(Dataset {
        patients,
        trust_covariate,
        truth: Truth {
            beta_t: config.beta_t,
            realized_error_variance: scale.variance,
            error_fraction: config.error_fraction,
            seed: config.seed,
        },
    })
}
