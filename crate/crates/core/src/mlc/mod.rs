//! Multilevel latent class mixture-of-regressions fitted by EM.
//!
//! Each Trust belongs to one of `T` latent Trust classes with prior weights
//! `π`. Within Trust class `c`, each patient belongs to one of `P` patient
//! classes with weights `ρ[c]`, and the outcome is normal with mean
//! `α[c][k] + b·x` and a shared variance `σ²`. Slopes `b` are shared, so Trust
//! classes differ only in level once casemix is accounted for.
//!
//! With `P = 1` every Trust's likelihood depends on the data only through
//! centred sufficient statistics, and the E- and M-steps run on those
//! ([`data::TrustStats`]). The patient-level route handles any `P` and serves
//! as the reference for the collapsed one.

mod data;
mod estep;
mod fit;
mod kernel;
mod mstep;

pub use data::{GroupedData, TrustBlock, TrustStats};
pub use estep::{e_step, e_step_patient_level, loglik, EStep};
pub use fit::{canonicalize, fit, fit_grouped, initial_params, run_chain, Chain};
pub use kernel::{log_sum_exp, normal_log_density, patient_log_density, trust_class_loglik};
pub use mstep::{m_step, m_step_patient_level};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simcore::PatientRow;

/// Minimum Trust-class weight before a chain is declared degenerate.
pub const MIN_CLASS_WEIGHT: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("Trust {0} has no patients")]
    EmptyTrust(usize),
    #[error("degenerate fit: {0}")]
    Degenerate(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("all {restarts} restarts were degenerate")]
    AllRestartsDegenerate { restarts: usize },
}

/// Patient-level fixed effect.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    Age,
    Sex,
    Ses,
}

impl Covariate {
    pub fn value(self, row: &PatientRow) -> f64 {
        match self {
            Covariate::Age => row.age,
            Covariate::Sex => f64::from(row.sex),
            Covariate::Ses => row.ses,
        }
    }
}

fn default_covariates() -> Vec<Covariate> {
    vec![Covariate::Age, Covariate::Sex, Covariate::Ses]
}

/// Number of patient and Trust classes plus the patient-level fixed effects.
///
/// Deserialises from either a label such as `"1P3T"` or a full object.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ModelSpecRepr")]
pub struct ModelSpec {
    pub n_patient_classes: usize,
    pub n_trust_classes: usize,
    pub covariates: Vec<Covariate>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ModelSpecRepr {
    Label(String),
    #[serde(rename_all = "snake_case")]
    Full {
        n_patient_classes: usize,
        n_trust_classes: usize,
        #[serde(default = "default_covariates")]
        covariates: Vec<Covariate>,
    },
}

impl TryFrom<ModelSpecRepr> for ModelSpec {
    type Error = FitError;

    fn try_from(repr: ModelSpecRepr) -> Result<Self, FitError> {
        let spec = match repr {
            ModelSpecRepr::Label(s) => s.parse()?,
            ModelSpecRepr::Full { n_patient_classes, n_trust_classes, covariates } => {
                ModelSpec { n_patient_classes, n_trust_classes, covariates }
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl ModelSpec {
    pub fn new(n_patient_classes: usize, n_trust_classes: usize) -> Self {
        Self { n_patient_classes, n_trust_classes, covariates: default_covariates() }
    }

    pub fn validate(&self) -> Result<(), FitError> {
        if self.n_patient_classes == 0 || self.n_trust_classes == 0 {
            return Err(FitError::InvalidSpec("class counts must be at least 1".into()));
        }
        let mut seen = self.covariates.clone();
        seen.sort_by_key(|c| *c as u8);
        seen.dedup();
        if seen.len() != self.covariates.len() {
            return Err(FitError::InvalidSpec("duplicate covariate".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("{}P{}T", self.n_patient_classes, self.n_trust_classes)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for ModelSpec {
    type Err = FitError;

    /// Parses labels like `1P2T` (case-insensitive) with default covariates.
    fn from_str(s: &str) -> Result<Self, FitError> {
        let bad = || FitError::InvalidSpec(format!("model label {s:?} is not of the form <n>P<m>T"));
        let upper = s.trim().to_ascii_uppercase();
        let (p, rest) = upper.split_once('P').ok_or_else(bad)?;
        let t = rest.strip_suffix('T').ok_or_else(bad)?;
        let spec = ModelSpec::new(p.parse().map_err(|_| bad())?, t.parse().map_err(|_| bad())?);
        spec.validate()?;
        Ok(spec)
    }
}

/// Parameters of the two-level mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlcParams {
    /// `π`, length `T`.
    pub trust_class_weights: Vec<f64>,
    /// `ρ`, `T × P`; row `c` is P(patient class | Trust class `c`).
    pub patient_class_weights: Vec<Vec<f64>>,
    /// `α`, `T × P`.
    pub intercepts: Vec<Vec<f64>>,
    /// `b`, one per covariate, shared across classes.
    pub slopes: Vec<f64>,
    /// `σ²`, shared across classes.
    pub resid_variance: f64,
}

impl MlcParams {
    pub fn n_trust_classes(&self) -> usize {
        self.trust_class_weights.len()
    }

    pub fn n_patient_classes(&self) -> usize {
        self.patient_class_weights.first().map_or(0, Vec::len)
    }

    /// `Σ_k ρ[c,k]·α[c,k]`, the casemix-adjusted mean of Trust class `c`.
    pub fn class_mean(&self, c: usize) -> f64 {
        self.patient_class_weights[c].iter().zip(&self.intercepts[c]).map(|(r, a)| r * a).sum()
    }

    pub fn validate(&self) -> Result<(), FitError> {
        let t = self.n_trust_classes();
        let p = self.n_patient_classes();
        if t == 0 || p == 0 {
            return Err(FitError::InvalidParams("empty class dimensions".into()));
        }
        if self.patient_class_weights.len() != t
            || self.intercepts.len() != t
            || self.patient_class_weights.iter().chain(&self.intercepts).any(|row| row.len() != p)
        {
            return Err(FitError::InvalidParams("inconsistent T × P shapes".into()));
        }
        if !(self.resid_variance > 0.0 && self.resid_variance.is_finite()) {
            return Err(FitError::InvalidParams(format!("residual variance {} must be > 0", self.resid_variance)));
        }
        let simplex = |w: &[f64]| {
            w.iter().all(|v| (0.0..=1.0).contains(v)) && (w.iter().sum::<f64>() - 1.0).abs() < 1e-9
        };
        if !simplex(&self.trust_class_weights) || !self.patient_class_weights.iter().all(|r| simplex(r)) {
            return Err(FitError::InvalidParams("class weights must lie on the simplex".into()));
        }
        if !self.intercepts.iter().flatten().chain(&self.slopes).all(|v| v.is_finite()) {
            return Err(FitError::InvalidParams("non-finite coefficient".into()));
        }
        Ok(())
    }
}

/// Starting values for each EM chain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Pooled OLS; every intercept perturbed by `Normal(0, s²)` where `s` is
    /// the pooled residual sd.
    PerturbedOls,
    /// Pooled OLS slopes; Trust-class intercepts placed at the adjusted
    /// means of randomly chosen distinct Trusts. Patient classes within a
    /// Trust class are spread by `Normal(0, s²)`.
    #[default]
    TrustSeeded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub n_restarts: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub init: InitScheme,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { n_restarts: 20, max_iter: 500, rel_tol: 1e-8, init: InitScheme::default(), seed: 1 }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        if self.n_restarts == 0 {
            return Err(FitError::InvalidSpec("n_restarts must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(FitError::InvalidSpec("rel_tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(FitError::InvalidSpec("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Best chain over all restarts, with classes in canonical order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub params: MlcParams,
    /// `n_trusts × T`, P(Trust class | Trust data).
    pub trust_posteriors: Vec<Vec<f64>>,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub best_restart_index: usize,
    pub n_degenerate_restarts: usize,
}
