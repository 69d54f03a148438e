use super::kernel::{collapsed_trust_class_loglik, dot, log_sum_exp, normal_log_density};
use super::{trust_class_loglik, FitError, GroupedData, MlcParams};

/// Output of the expectation step.
#[derive(Clone, Debug, PartialEq)]
pub struct EStep {
    /// `n_trusts × T`, P(c | Trust j).
    pub trust_posteriors: Vec<Vec<f64>>,
    /// `n_trusts × T`, log-likelihood of Trust j's patients given class c.
    pub class_loglik: Vec<Vec<f64>>,
    /// With more than one patient class: per Trust, P(k | patient i, c)
    /// flattened as `[c][i][k]`.
    pub patient_posteriors: Option<Vec<Vec<f64>>>,
    pub loglik: f64,
}

fn check_shapes(params: &MlcParams, data: &GroupedData) -> Result<(), FitError> {
    params.validate()?;
    if params.slopes.len() != data.n_covariates {
        return Err(FitError::InvalidParams(format!(
            "{} slopes for {} covariates",
            params.slopes.len(),
            data.n_covariates
        )));
    }
    Ok(())
}

fn posteriors_from(params: &MlcParams, class_loglik: Vec<Vec<f64>>) -> Result<(Vec<Vec<f64>>, f64), FitError> {
    let log_pi: Vec<f64> = params.trust_class_weights.iter().map(|w| w.ln()).collect();
    let mut total = 0.0;
    let mut post = Vec::with_capacity(class_loglik.len());
    for (j, ll) in class_loglik.iter().enumerate() {
        let joint: Vec<f64> = ll.iter().zip(&log_pi).map(|(l, lp)| l + lp).collect();
        let norm = log_sum_exp(&joint);
        if !norm.is_finite() {
            return Err(FitError::Numerical(format!("Trust {j}: marginal likelihood is {norm}")));
        }
        total += norm;
        post.push(joint.iter().map(|v| (v - norm).exp()).collect());
    }
    Ok((post, total))
}

/// Trust-class posteriors and, for `P > 1`, within-Trust patient-class posteriors.
///
/// With a single patient class the class log-likelihoods come from the
/// Trusts' sufficient statistics; otherwise patient by patient.
pub fn e_step(params: &MlcParams, data: &GroupedData) -> Result<EStep, FitError> {
    if params.n_patient_classes() != 1 {
        return e_step_patient_level(params, data);
    }
    check_shapes(params, data)?;
    let t = params.n_trust_classes();
    let class_loglik: Vec<Vec<f64>> = data
        .trusts
        .iter()
        .map(|trust| (0..t).map(|c| collapsed_trust_class_loglik(trust, c, params)).collect())
        .collect();
    let (trust_posteriors, loglik) = posteriors_from(params, class_loglik.clone())?;
    Ok(EStep { trust_posteriors, class_loglik, patient_posteriors: None, loglik })
}

/// [`e_step`] evaluated patient by patient for any number of patient classes.
pub fn e_step_patient_level(params: &MlcParams, data: &GroupedData) -> Result<EStep, FitError> {
    check_shapes(params, data)?;
    let t = params.n_trust_classes();
    let n_pc = params.n_patient_classes();
    if n_pc == 1 {
        let class_loglik: Vec<Vec<f64>> = data
            .trusts
            .iter()
            .map(|trust| (0..t).map(|c| trust_class_loglik(trust, c, params)).collect())
            .collect();
        let (trust_posteriors, loglik) = posteriors_from(params, class_loglik.clone())?;
        return Ok(EStep { trust_posteriors, class_loglik, patient_posteriors: None, loglik });
    }

    let p = data.n_covariates;
    let var = params.resid_variance;
    let log_rho: Vec<Vec<f64>> =
        params.patient_class_weights.iter().map(|r| r.iter().map(|v| v.ln()).collect()).collect();
    let mut class_loglik = Vec::with_capacity(data.n_trusts());
    let mut patient_post = Vec::with_capacity(data.n_trusts());
    let mut terms = vec![0.0; n_pc];
    for trust in &data.trusts {
        let n = trust.len();
        let mut ll = vec![0.0; t];
        let mut post = vec![0.0; t * n * n_pc];
        for i in 0..n {
            let y = trust.outcomes[i];
            let xb = dot(&params.slopes, trust.row(i, p));
            for c in 0..t {
                for k in 0..n_pc {
                    terms[k] = log_rho[c][k] + normal_log_density(y, params.intercepts[c][k] + xb, var);
                }
                let norm = log_sum_exp(&terms);
                ll[c] += norm;
                let base = (c * n + i) * n_pc;
                for k in 0..n_pc {
                    post[base + k] = if norm.is_finite() { (terms[k] - norm).exp() } else { 1.0 / n_pc as f64 };
                }
            }
        }
        class_loglik.push(ll);
        patient_post.push(post);
    }
    let (trust_posteriors, loglik) = posteriors_from(params, class_loglik.clone())?;
    Ok(EStep { trust_posteriors, class_loglik, patient_posteriors: Some(patient_post), loglik })
}

/// `Σ_j log Σ_c π_c·exp(ℓ_jc)`.
pub fn loglik(params: &MlcParams, data: &GroupedData) -> Result<f64, FitError> {
    e_step(params, data).map(|e| e.loglik)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_trusts() -> GroupedData {
        GroupedData::from_rows(vec![(vec![0.0], vec![vec![0.0]]), (vec![1.0], vec![vec![0.0]])], 1).unwrap()
    }

    fn p1(pi: Vec<f64>, alpha: Vec<f64>, var: f64) -> MlcParams {
        MlcParams {
            patient_class_weights: vec![vec![1.0]; pi.len()],
            intercepts: alpha.into_iter().map(|a| vec![a]).collect(),
            trust_class_weights: pi,
            slopes: vec![0.0],
            resid_variance: var,
        }
    }

    #[test]
    fn single_class_posteriors_are_one() {
        let e = e_step(&p1(vec![1.0], vec![0.3], 1.0), &two_trusts()).unwrap();
        assert!(e.trust_posteriors.iter().all(|r| r == &vec![1.0]));
        let expected: f64 = e.class_loglik.iter().map(|r| r[0]).sum();
        assert!((e.loglik - expected).abs() < 1e-15);
    }

    #[test]
    fn two_point_posterior_matches_density_ratio() {
        // class 0 at 0, class 1 at 1; Trust with y = 0.
        let e = e_step(&p1(vec![0.5, 0.5], vec![0.0, 1.0], 1.0), &two_trusts()).unwrap();
        let expected = 1.0 / (1.0 + (-0.5f64).exp());
        assert!((e.trust_posteriors[0][0] - expected).abs() < 1e-12);
        assert!((expected - 0.6225).abs() < 1e-4);
        assert!((e.trust_posteriors[1][1] - expected).abs() < 1e-12);
    }

    #[test]
    fn duplicated_classes_return_prior() {
        let e = e_step(&p1(vec![0.3, 0.7], vec![0.4, 0.4], 2.0), &two_trusts()).unwrap();
        for row in &e.trust_posteriors {
            assert!((row[0] - 0.3).abs() < 1e-15 && (row[1] - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn far_classes_do_not_underflow() {
        let e = e_step(&p1(vec![0.5, 0.5], vec![-500.0, 600.0], 1e-4), &two_trusts()).unwrap();
        for row in &e.trust_posteriors {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(e.loglik.is_finite());
    }

    #[test]
    fn label_permutation_leaves_loglik_unchanged() {
        let data = GroupedData::from_rows(
            vec![
                (vec![0.1, 0.4, -0.2], vec![vec![1.0], vec![0.0], vec![2.0]]),
                (vec![2.0, 1.5], vec![vec![-1.0], vec![0.5]]),
                (vec![0.9], vec![vec![0.3]]),
            ],
            1,
        )
        .unwrap();
        let mut a = p1(vec![0.2, 0.5, 0.3], vec![0.0, 1.0, 2.0], 0.7);
        a.slopes = vec![0.4];
        let mut b = p1(vec![0.3, 0.2, 0.5], vec![2.0, 0.0, 1.0], 0.7);
        b.slopes = vec![0.4];
        let (la, lb) = (loglik(&a, &data).unwrap(), loglik(&b, &data).unwrap());
        assert!((la - lb).abs() < 1e-12 * la.abs());
    }

    #[test]
    fn loglik_matches_compensated_direct_sum() {
        // Direct evaluation: per Trust, Σ_c π_c Π_i N(y_i), with Neumaier
        // summation over Trusts.
        let data = GroupedData::from_rows(
            vec![
                (vec![0.3, -0.1], vec![vec![0.5], vec![-0.5]]),
                (vec![1.2, 0.8, 1.1], vec![vec![0.0], vec![1.0], vec![-1.0]]),
            ],
            1,
        )
        .unwrap();
        let mut params = p1(vec![0.4, 0.6], vec![0.0, 1.0], 0.5);
        params.slopes = vec![0.2];
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for trust in &data.trusts {
            let mut marg = 0.0;
            for c in 0..2 {
                let mut prod = params.trust_class_weights[c];
                for (i, y) in trust.outcomes.iter().enumerate() {
                    let m = params.intercepts[c][0] + 0.2 * trust.covariates[i];
                    prod *= (-(y - m).powi(2) / 1.0).exp() / (std::f64::consts::PI).sqrt();
                }
                marg += prod;
            }
            let term = marg.ln();
            let t = sum + term;
            comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
            sum = t;
        }
        let direct = sum + comp;
        assert!((loglik(&params, &data).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn collapsed_and_patient_routes_agree() {
        let data = GroupedData::from_rows(
            vec![
                (vec![0.3, -0.1, 0.7], vec![vec![0.5, 1.0], vec![-0.5, 0.0], vec![1.5, 1.0]]),
                (vec![1.2, 0.8], vec![vec![0.0, 0.0], vec![1.0, 1.0]]),
            ],
            2,
        )
        .unwrap();
        let params = MlcParams {
            trust_class_weights: vec![0.35, 0.65],
            patient_class_weights: vec![vec![1.0], vec![1.0]],
            intercepts: vec![vec![-0.2], vec![0.9]],
            slopes: vec![0.3, -0.4],
            resid_variance: 0.45,
        };
        let a = e_step(&params, &data).unwrap();
        let b = e_step_patient_level(&params, &data).unwrap();
        assert!((a.loglik - b.loglik).abs() < 1e-12);
        for (ra, rb) in a.trust_posteriors.iter().zip(&b.trust_posteriors) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
