use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CovariateModel, SimError};

/// Patient-level covariates after dichotomisation and centring.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientCovariates {
    pub age: f64,
    pub sex: u8,
    pub ses: f64,
}

const PSD_TOL: f64 = 1e-10;

/// Lower-triangular factor `L` with `L Lᵀ = r`, tolerating rank deficiency.
///
/// A zero pivot zeroes its column; a negative pivot, or a zero pivot with a
/// non-zero remainder below it, means `r` is not positive semi-definite.
pub fn semidefinite_cholesky(r: &[[f64; 3]; 3]) -> Result<[[f64; 3]; 3], SimError> {
    let mut l = [[0.0; 3]; 3];
    for j in 0..3 {
        let d = r[j][j] - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
        if d < -PSD_TOL {
            return Err(SimError::NotPositiveSemiDefinite);
        }
        if d <= PSD_TOL {
            for i in j + 1..3 {
                let off = r[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
                if off.abs() > 1e-8 {
                    return Err(SimError::NotPositiveSemiDefinite);
                }
            }
            continue;
        }
        l[j][j] = d.sqrt();
        for i in j + 1..3 {
            let off = r[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            l[i][j] = off / l[j][j];
        }
    }
    Ok(l)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn centre(values: &mut [f64]) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter_mut().for_each(|v| *v -= mean);
}

/// Draw `n` patients' (age, sex, ses).
///
/// Latent values come from the trivariate normal with the model's scales and
/// correlation. The sex latent is split at its sample median (below → 0,
/// at or above → 1); age and ses are centred on their sample means.
pub fn draw_patient_covariates<R: Rng + ?Sized>(
    n: usize,
    model: &CovariateModel,
    rng: &mut R,
) -> Result<Vec<PatientCovariates>, SimError> {
    if n < 2 {
        return Err(SimError::config("n_patients", "at least 2 patients are required"));
    }
    model.validate()?;
    let l = semidefinite_cholesky(&model.correlation_matrix)?;
    let scales = [model.sd_age, 1.0, model.sd_ses];

    let mut age = Vec::with_capacity(n);
    let mut latent = Vec::with_capacity(n);
    let mut ses = Vec::with_capacity(n);
    for _ in 0..n {
        let z: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let mut x = [0.0; 3];
        for i in 0..3 {
            x[i] = scales[i] * (0..=i).map(|k| l[i][k] * z[k]).sum::<f64>();
        }
        age.push(x[0]);
        latent.push(x[1]);
        ses.push(x[2]);
    }

    let threshold = median(&latent);
    centre(&mut age);
    centre(&mut ses);

    Ok((0..n)
        .map(|i| PatientCovariates { age: age[i], sex: u8::from(latent[i] >= threshold), ses: ses[i] })
        .collect())
}
