use super::{ErrorVarianceBasis, PatientBetas, PatientCovariates, SimError};

/// Error-free outcome for one patient.
pub fn linear_predictor(row: &PatientCovariates, trust_value: f64, betas: &PatientBetas, beta_t: f64) -> f64 {
    betas.beta0
        + betas.beta_age * row.age
        + betas.beta_sex * f64::from(row.sex)
        + betas.beta_ses * row.ses
        + beta_t * trust_value
}

/// Noise variance chosen for a dataset and its square root.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorScale {
    pub variance: f64,
    pub sd: f64,
}

fn sample_variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = sum / n as f64;
    values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// Error standard deviation for a given error fraction.
///
/// With [`ErrorVarianceBasis::WithinTrustMedian`] the variance is `fraction`
/// times the median across Trusts of the within-Trust sample variance of the
/// error-free outcome; with [`ErrorVarianceBasis::Global`] it multiplies the
/// pooled sample variance instead.
pub fn error_scale(
    error_free: &[f64],
    assignments: &[usize],
    n_trusts: usize,
    fraction: f64,
    basis: ErrorVarianceBasis,
) -> Result<ErrorScale, SimError> {
    assert_eq!(error_free.len(), assignments.len());
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); n_trusts];
    for (&y, &j) in error_free.iter().zip(assignments) {
        groups[j].push(y);
    }
    if let Some((trust, g)) = groups.iter().enumerate().find(|(_, g)| g.len() < 2) {
        return Err(SimError::TrustTooSmall { trust, size: g.len() });
    }

    let base = match basis {
        ErrorVarianceBasis::WithinTrustMedian => {
            let mut vars: Vec<f64> = groups.iter().map(|g| sample_variance(g.iter().copied())).collect();
            vars.sort_by(f64::total_cmp);
            let k = vars.len();
            if k % 2 == 1 {
                vars[k / 2]
            } else {
                0.5 * (vars[k / 2 - 1] + vars[k / 2])
            }
        }
        ErrorVarianceBasis::Global => sample_variance(error_free.iter().copied()),
    };
    let variance = fraction * base;
    Ok(ErrorScale { variance, sd: variance.sqrt() })
}
