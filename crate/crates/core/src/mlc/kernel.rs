use std::f64::consts::PI;

use super::{FitError, MlcParams, TrustBlock};

#[inline]
pub fn normal_log_density(y: f64, mean: f64, variance: f64) -> f64 {
    let d = y - mean;
    -0.5 * ((2.0 * PI * variance).ln() + d * d / variance)
}

/// `log Σ exp(v)`, shifted by the maximum. Returns `-inf` for an empty or
/// all-`-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log N(y; α[c,k] + b·x, σ²)`.
pub fn patient_log_density(y: f64, x: &[f64], c: usize, k: usize, params: &MlcParams) -> Result<f64, FitError> {
    if !(params.resid_variance > 0.0) {
        return Err(FitError::InvalidParams(format!(
            "residual variance {} must be > 0",
            params.resid_variance
        )));
    }
    Ok(normal_log_density(y, params.intercepts[c][k] + dot(&params.slopes, x), params.resid_variance))
}

/// `Σ_i log Σ_k ρ[c,k]·N(y_i; α[c,k] + b·x_i, σ²)` over one Trust's patients,
/// evaluated patient by patient.
pub fn trust_class_loglik(trust: &TrustBlock, c: usize, params: &MlcParams) -> f64 {
    let p = params.slopes.len();
    let n_pc = params.n_patient_classes();
    let var = params.resid_variance;
    let log_rho: Vec<f64> = params.patient_class_weights[c].iter().map(|r| r.ln()).collect();
    let mut terms = vec![0.0; n_pc];
    let mut total = 0.0;
    for (i, &y) in trust.outcomes.iter().enumerate() {
        let xb = dot(&params.slopes, trust.row(i, p));
        if n_pc == 1 {
            total += normal_log_density(y, params.intercepts[c][0] + xb, var);
        } else {
            for k in 0..n_pc {
                terms[k] = log_rho[k] + normal_log_density(y, params.intercepts[c][k] + xb, var);
            }
            total += log_sum_exp(&terms);
        }
    }
    total
}

/// Single-patient-class version of [`trust_class_loglik`] on sufficient statistics.
pub(crate) fn collapsed_trust_class_loglik(trust: &TrustBlock, c: usize, params: &MlcParams) -> f64 {
    let s = &trust.stats;
    let n = s.n as f64;
    let var = params.resid_variance;
    let dev = s.adjusted_mean(&params.slopes) - params.intercepts[c][0];
    -0.5 * n * (2.0 * PI * var).ln() - (s.within_rss(&params.slopes) + n * dev * dev) / (2.0 * var)
}
