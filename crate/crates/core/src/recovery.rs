//! Trust-level coefficient recovery from a fitted MLC model.
//!
//! Each Trust gets a posterior-weighted mean outcome, and the Trust-level
//! coefficient is the single-level least-squares slope of those means on the
//! known Trust covariate. Fits in which every Trust receives the same class
//! membership probabilities carry no information about the covariate and
//! are excluded.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mlc::{FitError, FitResult};
use crate::simcore::Dataset;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecoveryError {
    #[error("Trust covariate has zero variance")]
    DegenerateCovariate,
    #[error("length mismatch: {0} covariate values, {1} outcomes")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 Trusts, got {0}")]
    TooFewPoints(usize),
    #[error("fit has {0} Trusts but dataset has {1}")]
    FitMismatch(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExclusionReason {
    DegenerateMembership,
    DegenerateFit,
}

impl ExclusionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExclusionReason::DegenerateMembership => "degenerate-membership",
            ExclusionReason::DegenerateFit => "degenerate-fit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "degenerate-membership" => Some(ExclusionReason::DegenerateMembership),
            "degenerate-fit" => Some(ExclusionReason::DegenerateFit),
            _ => None,
        }
    }
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub beta_t: f64,
    pub intercept: f64,
    pub trust_outcomes: Vec<f64>,
    /// Largest difference between any two Trusts' posterior probabilities
    /// for the same class.
    pub posterior_spread: f64,
    /// See [`class_separation`].
    pub class_separation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RecoveredBeta {
    Recovered(Recovery),
    Excluded { reason: ExclusionReason },
}

impl RecoveredBeta {
    pub fn value(&self) -> Option<f64> {
        match self {
            RecoveredBeta::Recovered(r) => Some(r.beta_t),
            RecoveredBeta::Excluded { .. } => None,
        }
    }

    pub fn exclusion(&self) -> Option<ExclusionReason> {
        match self {
            RecoveredBeta::Recovered(_) => None,
            RecoveredBeta::Excluded { reason } => Some(*reason),
        }
    }
}

/// What the per-Trust outcome is built from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeMode {
    /// `Σ_c P(c|j)·ᾱ_c`: the casemix-adjusted class means.
    #[default]
    AdjustedIntercepts,
    /// `Σ_c P(c|j)·μ_c` where `μ_c` is the posterior-weighted raw outcome mean of class `c`.
    RawMeans,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryWeighting {
    #[default]
    Unweighted,
    /// Weight each Trust by its patient count.
    TrustSize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryConfig {
    pub outcome_mode: OutcomeMode,
    pub weighting: RecoveryWeighting,
    pub posterior_spread_tol: f64,
    pub outcome_spread_tol: f64,
    /// Minimum [`class_separation`] for the classes to count as distinct.
    pub class_separation_tol: f64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            outcome_mode: OutcomeMode::default(),
            weighting: RecoveryWeighting::default(),
            posterior_spread_tol: 1e-8,
            outcome_spread_tol: 1e-10,
            class_separation_tol: 0.1,
        }
    }
}

/// Posterior-weighted adjusted mean for each Trust: `m_j = Σ_c P(c|j)·ᾱ_c`
/// with `ᾱ_c = Σ_k ρ[c,k]·α[c,k]`.
pub fn weighted_trust_outcome(fit: &FitResult) -> Vec<f64> {
    let means: Vec<f64> = (0..fit.params.n_trust_classes()).map(|c| fit.params.class_mean(c)).collect();
    fit.trust_posteriors.iter().map(|row| row.iter().zip(&means).map(|(w, m)| w * m).sum()).collect()
}

/// Posterior-weighted class means of the raw outcomes, mapped back to Trusts.
pub fn raw_weighted_trust_outcome(fit: &FitResult, dataset: &Dataset) -> Vec<f64> {
    let k = dataset.n_trusts();
    let mut sums = vec![0.0; k];
    let sizes = dataset.trust_sizes();
    for p in &dataset.patients {
        sums[p.trust_id] += p.outcome;
    }
    let t = fit.params.n_trust_classes();
    let mut num = vec![0.0; t];
    let mut den = vec![0.0; t];
    for j in 0..k {
        for c in 0..t {
            num[c] += fit.trust_posteriors[j][c] * sums[j];
            den[c] += fit.trust_posteriors[j][c] * sizes[j] as f64;
        }
    }
    let class_means: Vec<f64> = num.iter().zip(&den).map(|(n, d)| if *d > 0.0 { n / d } else { 0.0 }).collect();
    fit.trust_posteriors.iter().map(|row| row.iter().zip(&class_means).map(|(w, m)| w * m).sum()).collect()
}

/// Fitted line `y = intercept + slope·x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Closed-form least squares: `slope = cov(x, y) / var(x)`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> Result<LineFit, RecoveryError> {
    wls_slope(x, y, &vec![1.0; x.len()])
}

/// Weighted least-squares line.
pub fn wls_slope(x: &[f64], y: &[f64], w: &[f64]) -> Result<LineFit, RecoveryError> {
    if x.len() != y.len() || x.len() != w.len() {
        return Err(RecoveryError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(RecoveryError::TooFewPoints(x.len()));
    }
    let total: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, wi)| wi * a).sum::<f64>() / total;
    let my = y.iter().zip(w).map(|(b, wi)| wi * b).sum::<f64>() / total;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for ((a, b), wi) in x.iter().zip(y).zip(w) {
        sxx += wi * (a - mx) * (a - mx);
        sxy += wi * (a - mx) * (b - my);
    }
    if !(sxx > 0.0) {
        return Err(RecoveryError::DegenerateCovariate);
    }
    let slope = sxy / sxx;
    Ok(LineFit { slope, intercept: my - slope * mx })
}

/// `max_c (max_j P(c|j) − min_j P(c|j))`, the largest pairwise L∞ distance
/// between Trust posterior rows.
pub fn posterior_spread(posteriors: &[Vec<f64>]) -> f64 {
    let t = posteriors.first().map_or(0, Vec::len);
    (0..t)
        .map(|c| {
            let (lo, hi) = posteriors
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), row| (lo.min(row[c]), hi.max(row[c])));
            hi - lo
        })
        .fold(0.0, f64::max)
}

/// Range of the adjusted class means in units of the standard error of a
/// Trust mean, `sqrt(σ²·n_trusts / n_patients)`.
///
/// EM approaches a fit whose classes coincide only sublinearly, so such
/// fits stop with slightly unequal class means and posteriors that are
/// nearly, but not exactly, the class weights. This measure stays small for
/// them whatever the stopping tolerance.
pub fn class_separation(fit: &FitResult, dataset: &Dataset) -> f64 {
    let p = &fit.params;
    let (lo, hi) = (0..p.n_trust_classes())
        .map(|c| p.class_mean(c))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| (lo.min(m), hi.max(m)));
    let se = (p.resid_variance * dataset.n_trusts() as f64 / dataset.patients.len() as f64).sqrt();
    (hi - lo) / se
}

fn population_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

/// Recover the Trust-level coefficient from a fit of `dataset`.
pub fn recover_beta(fit: &FitResult, dataset: &Dataset, cfg: &RecoveryConfig) -> Result<RecoveredBeta, RecoveryError> {
    if fit.trust_posteriors.len() != dataset.n_trusts() {
        return Err(RecoveryError::FitMismatch(fit.trust_posteriors.len(), dataset.n_trusts()));
    }
    let outcomes = match cfg.outcome_mode {
        OutcomeMode::AdjustedIntercepts => weighted_trust_outcome(fit),
        OutcomeMode::RawMeans => raw_weighted_trust_outcome(fit, dataset),
    };
    let spread = posterior_spread(&fit.trust_posteriors);
    let separation = class_separation(fit, dataset);
    if spread < cfg.posterior_spread_tol
        || population_sd(&outcomes) < cfg.outcome_spread_tol
        || separation < cfg.class_separation_tol
    {
        return Ok(RecoveredBeta::Excluded { reason: ExclusionReason::DegenerateMembership });
    }
    let line = match cfg.weighting {
        RecoveryWeighting::Unweighted => ols_slope(&dataset.trust_covariate, &outcomes)?,
        RecoveryWeighting::TrustSize => {
            let w: Vec<f64> = dataset.trust_sizes().into_iter().map(|n| n as f64).collect();
            wls_slope(&dataset.trust_covariate, &outcomes, &w)?
        }
    };
    Ok(RecoveredBeta::Recovered(Recovery {
        beta_t: line.slope,
        intercept: line.intercept,
        trust_outcomes: outcomes,
        posterior_spread: spread,
        class_separation: separation,
    }))
}

/// [`recover_beta`] for a fit that may have failed; every failure becomes
/// an exclusion.
pub fn recover_or_exclude(
    fit: Result<&FitResult, &FitError>,
    dataset: &Dataset,
    cfg: &RecoveryConfig,
) -> RecoveredBeta {
    let degenerate_fit = RecoveredBeta::Excluded { reason: ExclusionReason::DegenerateFit };
    match fit {
        Ok(f) => recover_beta(f, dataset, cfg).unwrap_or(degenerate_fit),
        Err(_) => degenerate_fit,
    }
}
