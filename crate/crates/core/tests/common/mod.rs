//! Shared helpers for integration tests: random instances, an independent
//! EM step written against the patient-level likelihood, and numerical
//! derivatives.
#![allow(dead_code, clippy::needless_range_loop)]

use mlc_core::mlc::{loglik, GroupedData, MlcParams};
use mlc_core::simcore::{Dataset, SimConfig};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `k` Trusts with sizes in `n_lo..=n_hi` and `p` standard-normal
/// covariates. Trust intercepts come from `n_groups` levels `spacing` apart,
/// patient intercepts add `patient_shift` with probability one half, and
/// the residual sd is `noise`.
#[allow(clippy::too_many_arguments)]
pub fn random_data(
    rng: &mut impl Rng,
    k: usize,
    n_lo: usize,
    n_hi: usize,
    p: usize,
    n_groups: usize,
    spacing: f64,
    patient_shift: f64,
    noise: f64,
) -> GroupedData {
    let slopes: Vec<f64> = (0..p).map(|_| 0.5 * normal(rng)).collect();
    let groups = (0..k)
        .map(|j| {
            let level = spacing * (j % n_groups.max(1)) as f64;
            let n = rng.random_range(n_lo..=n_hi);
            let mut ys = Vec::with_capacity(n);
            let mut xs = Vec::with_capacity(n * p);
            for _ in 0..n {
                let x: Vec<f64> = (0..p).map(|_| normal(rng)).collect();
                let shift = if rng.random_bool(0.5) { patient_shift } else { 0.0 };
                let mean = level + shift + x.iter().zip(&slopes).map(|(a, b)| a * b).sum::<f64>();
                ys.push(mean + noise * normal(rng));
                xs.extend(x);
            }
            (ys, xs)
        })
        .collect();
    GroupedData::from_flat(groups, p).unwrap()
}

/// Random valid parameters for `t` Trust classes and `pc` patient classes.
pub fn random_params(rng: &mut impl Rng, t: usize, pc: usize, p: usize) -> MlcParams {
    let simplex = |rng: &mut dyn rand::RngCore, n: usize| {
        let w: Vec<f64> = (0..n).map(|_| 0.2 + rng.random::<f64>()).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    MlcParams {
        trust_class_weights: simplex(rng, t),
        patient_class_weights: (0..t).map(|_| simplex(rng, pc)).collect(),
        intercepts: (0..t).map(|_| (0..pc).map(|_| normal(rng)).collect()).collect(),
        slopes: (0..p).map(|_| 0.5 * normal(rng)).collect(),
        resid_variance: 0.5 + rng.random::<f64>(),
    }
}

fn log_normal(y: f64, m: f64, v: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (y - m) * (y - m) / v)
}

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// One EM iteration computed patient by patient, with the M-step as a
/// dense weighted least-squares solve over all (Trust class, patient class)
/// intercepts and the shared slopes.
pub fn oracle_em_step(params: &MlcParams, data: &GroupedData) -> MlcParams {
    let t = params.n_trust_classes();
    let pc = params.n_patient_classes();
    let p = data.n_covariates;
    let dot = |x: &[f64]| x.iter().zip(&params.slopes).map(|(a, b)| a * b).sum::<f64>();

    // weights[j][c] and resp[j][c][i][k]
    let mut weights = Vec::new();
    let mut resp = Vec::new();
    for trust in &data.trusts {
        let n = trust.outcomes.len();
        let mut ll = vec![0.0; t];
        let mut r = vec![vec![vec![0.0; pc]; n]; t];
        for c in 0..t {
            for i in 0..n {
                let y = trust.outcomes[i];
                let xb = dot(&trust.covariates[i * p..(i + 1) * p]);
                let terms: Vec<f64> = (0..pc)
                    .map(|k| {
                        params.patient_class_weights[c][k].ln()
                            + log_normal(y, params.intercepts[c][k] + xb, params.resid_variance)
                    })
                    .collect();
                let norm = lse(&terms);
                ll[c] += norm;
                for k in 0..pc {
                    r[c][i][k] = (terms[k] - norm).exp();
                }
            }
        }
        let joint: Vec<f64> = (0..t).map(|c| params.trust_class_weights[c].ln() + ll[c]).collect();
        let norm = lse(&joint);
        weights.push(joint.iter().map(|v| (v - norm).exp()).collect::<Vec<f64>>());
        resp.push(r);
    }

    let k_trusts = data.trusts.len() as f64;
    let pi: Vec<f64> = (0..t).map(|c| weights.iter().map(|w| w[c]).sum::<f64>() / k_trusts).collect();
    let mut rho = vec![vec![0.0; pc]; t];
    for c in 0..t {
        for (j, trust) in data.trusts.iter().enumerate() {
            for i in 0..trust.outcomes.len() {
                for k in 0..pc {
                    rho[c][k] += weights[j][c] * resp[j][c][i][k];
                }
            }
        }
        let den: f64 = rho[c].iter().sum();
        rho[c].iter_mut().for_each(|v| *v /= den);
    }

    let dim = t * pc + p;
    let mut xtx = DMatrix::<f64>::zeros(dim, dim);
    let mut xty = DVector::<f64>::zeros(dim);
    for (j, trust) in data.trusts.iter().enumerate() {
        for i in 0..trust.outcomes.len() {
            let x = &trust.covariates[i * p..(i + 1) * p];
            for c in 0..t {
                for k in 0..pc {
                    let w = weights[j][c] * resp[j][c][i][k];
                    let mut row = DVector::<f64>::zeros(dim);
                    row[c * pc + k] = 1.0;
                    for (q, v) in x.iter().enumerate() {
                        row[t * pc + q] = *v;
                    }
                    xtx += w * &row * row.transpose();
                    xty += w * trust.outcomes[i] * &row;
                }
            }
        }
    }
    let coef = xtx.lu().solve(&xty).expect("oracle normal equations");
    let intercepts: Vec<Vec<f64>> = (0..t).map(|c| (0..pc).map(|k| coef[c * pc + k]).collect()).collect();
    let slopes: Vec<f64> = (0..p).map(|q| coef[t * pc + q]).collect();

    let mut rss = 0.0;
    let mut n_total = 0.0;
    for (j, trust) in data.trusts.iter().enumerate() {
        for i in 0..trust.outcomes.len() {
            n_total += 1.0;
            let xb: f64 = trust.covariates[i * p..(i + 1) * p].iter().zip(&slopes).map(|(a, b)| a * b).sum();
            for c in 0..t {
                for k in 0..pc {
                    let e = trust.outcomes[i] - intercepts[c][k] - xb;
                    rss += weights[j][c] * resp[j][c][i][k] * e * e;
                }
            }
        }
    }
    MlcParams {
        trust_class_weights: pi,
        patient_class_weights: rho,
        intercepts,
        slopes,
        resid_variance: rss / n_total,
    }
}

fn logits(w: &[f64]) -> Vec<f64> {
    let last = *w.last().unwrap();
    w[..w.len() - 1].iter().map(|v| (v / last).ln()).collect()
}

fn softmax_with_zero(eta: &[f64]) -> Vec<f64> {
    let mut e: Vec<f64> = eta.iter().map(|v| v.exp()).collect();
    e.push(1.0);
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Unconstrained coordinates: intercepts, slopes, variance, logits of the
/// Trust-class weights and of each row of patient-class weights.
pub fn pack(params: &MlcParams) -> Vec<f64> {
    let mut v: Vec<f64> = params.intercepts.iter().flatten().copied().collect();
    v.extend(&params.slopes);
    v.push(params.resid_variance);
    v.extend(logits(&params.trust_class_weights));
    for row in &params.patient_class_weights {
        v.extend(logits(row));
    }
    v
}

pub fn unpack(template: &MlcParams, v: &[f64]) -> MlcParams {
    let t = template.n_trust_classes();
    let pc = template.n_patient_classes();
    let p = template.slopes.len();
    let mut at = 0;
    let mut take = |n: usize| {
        let s = v[at..at + n].to_vec();
        at += n;
        s
    };
    let flat = take(t * pc);
    let intercepts = flat.chunks(pc).map(<[f64]>::to_vec).collect();
    let slopes = take(p);
    let resid_variance = take(1)[0];
    let trust_class_weights = softmax_with_zero(&take(t - 1));
    let patient_class_weights = (0..t).map(|_| softmax_with_zero(&take(pc - 1))).collect();
    MlcParams { trust_class_weights, patient_class_weights, intercepts, slopes, resid_variance }
}

/// Central-difference gradient of the log-likelihood in [`pack`] coordinates.
pub fn fd_gradient(params: &MlcParams, data: &GroupedData, h: f64) -> Vec<f64> {
    let theta = pack(params);
    (0..theta.len())
        .map(|i| {
            let mut up = theta.clone();
            let mut down = theta.clone();
            up[i] += h;
            down[i] -= h;
            let lu = loglik(&unpack(params, &up), data).unwrap();
            let ld = loglik(&unpack(params, &down), data).unwrap();
            (lu - ld) / (2.0 * h)
        })
        .collect()
}

/// Closed-form OLS log-likelihood `−n/2·(ln(2π·RSS/n) + 1)` on the design
/// `[1, x]`.
pub fn ols_loglik(data: &GroupedData) -> f64 {
    let p = data.n_covariates;
    let rows: Vec<(f64, &[f64])> = data
        .trusts
        .iter()
        .flat_map(|t| (0..t.outcomes.len()).map(move |i| (t.outcomes[i], &t.covariates[i * p..(i + 1) * p])))
        .collect();
    let n = rows.len();
    let x = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { rows[i].1[j - 1] });
    let y = DVector::from_fn(n, |i, _| rows[i].0);
    let beta = x.clone().svd(true, true).solve(&y, 1e-14).unwrap();
    let rss = (y - x * beta).norm_squared();
    let nf = n as f64;
    -0.5 * nf * ((2.0 * std::f64::consts::PI * rss / nf).ln() + 1.0)
}

/// Error-free outcome of every patient, recomputed from the rows.
pub fn error_free(d: &Dataset, cfg: &SimConfig) -> Vec<f64> {
    let b = &cfg.patient_betas;
    d.patients
        .iter()
        .map(|p| {
            b.beta0
                + b.beta_age * p.age
                + b.beta_sex * f64::from(p.sex)
                + b.beta_ses * p.ses
                + cfg.beta_t * d.trust_covariate[p.trust_id]
        })
        .collect()
}

/// Median over Trusts of the (n − 1)-denominator variance.
pub fn median_within_variance(values: &[f64], d: &Dataset) -> f64 {
    let k = d.n_trusts();
    let mut groups = vec![Vec::new(); k];
    for (v, p) in values.iter().zip(&d.patients) {
        groups[p.trust_id].push(*v);
    }
    let mut vars: Vec<f64> = groups
        .iter()
        .map(|g| {
            let m = g.iter().sum::<f64>() / g.len() as f64;
            g.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (g.len() - 1) as f64
        })
        .collect();
    vars.sort_by(f64::total_cmp);
    if k % 2 == 1 {
        vars[k / 2]
    } else {
        0.5 * (vars[k / 2 - 1] + vars[k / 2])
    }
}
