use nalgebra::{DMatrix, DVector};

use super::kernel::dot;
use super::{EStep, FitError, GroupedData, MlcParams, ModelSpec};

/// Solve the `p × p` slope system left after profiling out the intercepts.
fn solve_slopes(a: Vec<f64>, r: Vec<f64>, p: usize) -> Result<Vec<f64>, FitError> {
    if p == 0 {
        return Ok(Vec::new());
    }
    let chol = DMatrix::from_row_slice(p, p, &a)
        .cholesky()
        .ok_or_else(|| FitError::Degenerate("singular normal equations".into()))?;
    let b = chol.solve(&DVector::from_vec(r));
    if b.iter().all(|v| v.is_finite()) {
        Ok(b.iter().copied().collect())
    } else {
        Err(FitError::Degenerate("non-finite slopes".into()))
    }
}

fn check_posteriors(estep: &EStep, data: &GroupedData, t: usize) -> Result<(), FitError> {
    if estep.trust_posteriors.len() != data.n_trusts() || estep.trust_posteriors.iter().any(|r| r.len() != t) {
        return Err(FitError::InvalidParams("posterior matrix has the wrong shape".into()));
    }
    Ok(())
}

fn finish_variance(rss: f64, n: usize) -> Result<f64, FitError> {
    let var = rss / n as f64;
    if var > 0.0 && var.is_finite() {
        Ok(var)
    } else {
        Err(FitError::Degenerate(format!("residual variance {var}")))
    }
}

fn mean_posterior(post: &[Vec<f64>], t: usize) -> Vec<f64> {
    let sums: Vec<f64> = (0..t).map(|c| post.iter().map(|w| w[c]).sum()).collect();
    let total: f64 = sums.iter().sum();
    sums.into_iter().map(|s| s / total).collect()
}

/// Maximisation step.
///
/// Patient `i` in Trust `j` contributes weight `P(c|j)·P(k|i,c)` to the
/// weighted least-squares problem for `(α, b)`; the intercepts are profiled
/// out class by class and the remaining slope system is solved by Cholesky.
/// `π` is the mean Trust posterior, `ρ` the normalised patient-class mass
/// and `σ²` the weighted mean squared residual.
pub fn m_step(estep: &EStep, data: &GroupedData, spec: &ModelSpec) -> Result<MlcParams, FitError> {
    if spec.n_patient_classes == 1 {
        m_step_collapsed(estep, data, spec.n_trust_classes)
    } else {
        m_step_patient_level(estep, data, spec)
    }
}

fn m_step_collapsed(estep: &EStep, data: &GroupedData, t: usize) -> Result<MlcParams, FitError> {
    check_posteriors(estep, data, t)?;
    let p = data.n_covariates;
    let post = &estep.trust_posteriors;

    let mut mass = vec![0.0; t];
    let mut u = vec![0.0; t];
    let mut v = vec![vec![0.0; p]; t];
    for (trust, w) in data.trusts.iter().zip(post) {
        let s = &trust.stats;
        for c in 0..t {
            let wn = w[c] * s.n as f64;
            mass[c] += wn;
            u[c] += wn * s.mean_y;
            v[c].iter_mut().zip(&s.mean_x).for_each(|(acc, x)| *acc += wn * x);
        }
    }
    for c in 0..t {
        if !(mass[c] > 0.0) {
            return Err(FitError::Degenerate(format!("Trust class {c} has no weight")));
        }
        u[c] /= mass[c];
        v[c].iter_mut().for_each(|x| *x /= mass[c]);
    }

    let mut a = vec![0.0; p * p];
    let mut r = vec![0.0; p];
    let mut dx = vec![0.0; p];
    for (trust, w) in data.trusts.iter().zip(post) {
        let s = &trust.stats;
        a.iter_mut().zip(&s.sxx).for_each(|(acc, x)| *acc += x);
        r.iter_mut().zip(&s.sxy).for_each(|(acc, x)| *acc += x);
        for c in 0..t {
            let wn = w[c] * s.n as f64;
            if wn == 0.0 {
                continue;
            }
            for q in 0..p {
                dx[q] = s.mean_x[q] - v[c][q];
            }
            let dy = s.mean_y - u[c];
            for q in 0..p {
                r[q] += wn * dx[q] * dy;
                for q2 in 0..p {
                    a[q * p + q2] += wn * dx[q] * dx[q2];
                }
            }
        }
    }
    let slopes = solve_slopes(a, r, p)?;
    let intercepts: Vec<Vec<f64>> = (0..t).map(|c| vec![u[c] - dot(&slopes, &v[c])]).collect();

    let mut rss = 0.0;
    for (trust, w) in data.trusts.iter().zip(post) {
        let s = &trust.stats;
        let adj = s.adjusted_mean(&slopes);
        rss += s.within_rss(&slopes);
        for c in 0..t {
            let d = adj - intercepts[c][0];
            rss += w[c] * s.n as f64 * d * d;
        }
    }
    Ok(MlcParams {
        trust_class_weights: mean_posterior(post, t),
        patient_class_weights: vec![vec![1.0]; t],
        intercepts,
        slopes,
        resid_variance: finish_variance(rss, data.n_patients)?,
    })
}

/// [`m_step`] accumulated patient by patient; required when `P > 1`.
pub fn m_step_patient_level(estep: &EStep, data: &GroupedData, spec: &ModelSpec) -> Result<MlcParams, FitError> {
    let t = spec.n_trust_classes;
    let n_pc = spec.n_patient_classes;
    check_posteriors(estep, data, t)?;
    let p = data.n_covariates;
    let post = &estep.trust_posteriors;
    let patient_post = estep.patient_posteriors.as_ref();
    if n_pc > 1 && patient_post.is_none() {
        return Err(FitError::InvalidParams("patient-class posteriors missing".into()));
    }
    // weight of patient i (in trust j) for class (c, k)
    let weight = |j: usize, n: usize, i: usize, c: usize, k: usize| -> f64 {
        match patient_post {
            Some(pp) => post[j][c] * pp[j][(c * n + i) * n_pc + k],
            None => post[j][c],
        }
    };
    let classes = t * n_pc;

    let mut mass = vec![0.0; classes];
    let mut u = vec![0.0; classes];
    let mut v = vec![vec![0.0; p]; classes];
    for (j, trust) in data.trusts.iter().enumerate() {
        let n = trust.len();
        for i in 0..n {
            let x = trust.row(i, p);
            for c in 0..t {
                for k in 0..n_pc {
                    let w = weight(j, n, i, c, k);
                    let ck = c * n_pc + k;
                    mass[ck] += w;
                    u[ck] += w * trust.outcomes[i];
                    v[ck].iter_mut().zip(x).for_each(|(acc, xv)| *acc += w * xv);
                }
            }
        }
    }
    for ck in 0..classes {
        if !(mass[ck] > 0.0) {
            return Err(FitError::Degenerate(format!("class {} has no weight", ck)));
        }
        u[ck] /= mass[ck];
        v[ck].iter_mut().for_each(|x| *x /= mass[ck]);
    }

    let mut a = vec![0.0; p * p];
    let mut r = vec![0.0; p];
    let mut dx = vec![0.0; p];
    for (j, trust) in data.trusts.iter().enumerate() {
        let n = trust.len();
        for i in 0..n {
            let x = trust.row(i, p);
            for c in 0..t {
                for k in 0..n_pc {
                    let w = weight(j, n, i, c, k);
                    if w == 0.0 {
                        continue;
                    }
                    let ck = c * n_pc + k;
                    for q in 0..p {
                        dx[q] = x[q] - v[ck][q];
                    }
                    let dy = trust.outcomes[i] - u[ck];
                    for q in 0..p {
                        r[q] += w * dx[q] * dy;
                        for q2 in 0..p {
                            a[q * p + q2] += w * dx[q] * dx[q2];
                        }
                    }
                }
            }
        }
    }
    let slopes = solve_slopes(a, r, p)?;
    let intercepts: Vec<Vec<f64>> =
        (0..t).map(|c| (0..n_pc).map(|k| u[c * n_pc + k] - dot(&slopes, &v[c * n_pc + k])).collect()).collect();

    let mut rss = 0.0;
    for (j, trust) in data.trusts.iter().enumerate() {
        let n = trust.len();
        for i in 0..n {
            let resid = trust.outcomes[i] - dot(&slopes, trust.row(i, p));
            for c in 0..t {
                for k in 0..n_pc {
                    let d = resid - intercepts[c][k];
                    rss += weight(j, n, i, c, k) * d * d;
                }
            }
        }
    }

    let patient_class_weights = (0..t)
        .map(|c| {
            let row = &mass[c * n_pc..(c + 1) * n_pc];
            let total: f64 = row.iter().sum();
            row.iter().map(|m| m / total).collect()
        })
        .collect();
    Ok(MlcParams {
        trust_class_weights: mean_posterior(post, t),
        patient_class_weights,
        intercepts,
        slopes,
        resid_variance: finish_variance(rss, data.n_patients)?,
    })
}
