use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{
    e_step, m_step, EStep, EmConfig, FitError, FitResult, GroupedData, InitScheme, MlcParams, ModelSpec,
    MIN_CLASS_WEIGHT,
};
use crate::rng::{derive_seed, rng_from, tag};
use crate::simcore::Dataset;

/// One EM run from a single starting point.
#[derive(Clone, Debug)]
pub struct Chain {
    pub params: MlcParams,
    pub estep: EStep,
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

fn pooled_fit(data: &GroupedData) -> Result<MlcParams, FitError> {
    let ones = vec![vec![1.0]; data.n_trusts()];
    let e = EStep { trust_posteriors: ones.clone(), class_loglik: ones, patient_posteriors: None, loglik: 0.0 };
    m_step(&e, data, &ModelSpec::new(1, 1))
}

/// Starting parameters for one chain.
pub fn initial_params<R: Rng + ?Sized>(
    data: &GroupedData,
    spec: &ModelSpec,
    scheme: InitScheme,
    rng: &mut R,
) -> Result<MlcParams, FitError> {
    let pooled = pooled_fit(data)?;
    let t = spec.n_trust_classes;
    let n_pc = spec.n_patient_classes;
    let s = pooled.resid_variance.sqrt();
    let base = pooled.intercepts[0][0];
    let intercepts: Vec<Vec<f64>> = match scheme {
        InitScheme::PerturbedOls => {
            let mut jitter = |scale: f64| scale * rng.sample::<f64, _>(StandardNormal);
            (0..t).map(|_| (0..n_pc).map(|_| base + jitter(s)).collect()).collect()
        }
        InitScheme::TrustSeeded => {
            let k = data.n_trusts();
            let seeds: Vec<usize> =
                if t <= k { sample(rng, k, t).into_vec() } else { (0..t).map(|_| rng.random_range(0..k)).collect() };
            let mut jitter = |scale: f64| scale * rng.sample::<f64, _>(StandardNormal);
            seeds
                .iter()
                .map(|&j| {
                    let centre = data.trusts[j].stats.adjusted_mean(&pooled.slopes);
                    (0..n_pc).map(|_| centre + if n_pc > 1 { jitter(s) } else { 0.0 }).collect()
                })
                .collect()
        }
    };
    Ok(MlcParams {
        trust_class_weights: vec![1.0 / t as f64; t],
        patient_class_weights: vec![vec![1.0 / n_pc as f64; n_pc]; t],
        intercepts,
        slopes: pooled.slopes,
        resid_variance: pooled.resid_variance,
    })
}

/// Alternate E- and M-steps from `init` until the relative change in
/// log-likelihood drops below `em.rel_tol` or `em.max_iter` M-steps have run.
///
/// A chain whose Trust-class weight falls below [`MIN_CLASS_WEIGHT`] is
/// reported as degenerate.
pub fn run_chain(data: &GroupedData, spec: &ModelSpec, init: MlcParams, em: &EmConfig) -> Result<Chain, FitError> {
    let mut params = init;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let e = e_step(&params, data)?;
        if let Some(&prev) = trace.last() {
            let change: f64 = e.loglik - prev;
            if change.abs() <= em.rel_tol * f64::abs(prev).max(f64::MIN_POSITIVE) {
                converged = true;
            }
        }
        trace.push(e.loglik);
        if converged || iterations >= em.max_iter {
            return Ok(Chain { params, estep: e, trace, converged, iterations });
        }
        params = m_step(&e, data, spec)?;
        iterations += 1;
        if let Some(c) = params.trust_class_weights.iter().position(|&w| w < MIN_CLASS_WEIGHT) {
            return Err(FitError::Degenerate(format!(
                "Trust class {c} weight {} below {MIN_CLASS_WEIGHT}",
                params.trust_class_weights[c]
            )));
        }
    }
}

/// Reorder classes by ascending adjusted class mean `Σ_k ρ[c,k]·α[c,k]`,
/// permuting the posterior columns to match.
pub fn canonicalize(params: &MlcParams, posteriors: &[Vec<f64>]) -> (MlcParams, Vec<Vec<f64>>) {
    let mut order: Vec<usize> = (0..params.n_trust_classes()).collect();
    order.sort_by(|&a, &b| params.class_mean(a).total_cmp(&params.class_mean(b)).then(a.cmp(&b)));
    let pick = |v: &[Vec<f64>]| order.iter().map(|&c| v[c].clone()).collect::<Vec<_>>();
    let canon = MlcParams {
        trust_class_weights: order.iter().map(|&c| params.trust_class_weights[c]).collect(),
        patient_class_weights: pick(&params.patient_class_weights),
        intercepts: pick(&params.intercepts),
        slopes: params.slopes.clone(),
        resid_variance: params.resid_variance,
    };
    let post = posteriors.iter().map(|row| order.iter().map(|&c| row[c]).collect()).collect();
    (canon, post)
}

/// Fit `spec` to a dataset by EM with restarts.
pub fn fit(dataset: &Dataset, spec: &ModelSpec, em: &EmConfig) -> Result<FitResult, FitError> {
    let data = GroupedData::from_dataset(dataset, &spec.covariates)?;
    fit_grouped(&data, spec, em)
}

/// [`fit`] on pre-grouped data. Restarts run in parallel; each draws its
/// starting point from a stream derived from `em.seed` and its index, and
/// ties in final log-likelihood go to the lowest index, so the result does
/// not depend on scheduling.
pub fn fit_grouped(data: &GroupedData, spec: &ModelSpec, em: &EmConfig) -> Result<FitResult, FitError> {
    spec.validate()?;
    em.validate()?;
    if spec.covariates.len() != data.n_covariates {
        return Err(FitError::InvalidSpec("covariate count does not match data".into()));
    }
    pooled_fit(data)?;

    let chains: Vec<Result<Chain, FitError>> = (0..em.n_restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_from(derive_seed(em.seed, &[tag::RESTART, r as u64]));
            let init = initial_params(data, spec, em.init, &mut rng)?;
            run_chain(data, spec, init, em)
        })
        .collect();

    let mut best: Option<(usize, &Chain)> = None;
    let mut n_degenerate = 0;
    for (r, chain) in chains.iter().enumerate() {
        match chain {
            Ok(ch) if ch.estep.loglik.is_finite() => {
                if best.is_none_or(|(_, b)| ch.estep.loglik > b.estep.loglik) {
                    best = Some((r, ch));
                }
            }
            Ok(_) => n_degenerate += 1,
            Err(e) => {
                log::debug!("restart {r} discarded: {e}");
                n_degenerate += 1;
            }
        }
    }
    let (index, chain) = best.ok_or(FitError::AllRestartsDegenerate { restarts: em.n_restarts })?;
    let (params, trust_posteriors) = canonicalize(&chain.params, &chain.estep.trust_posteriors);
    Ok(FitResult {
        spec: spec.clone(),
        params,
        trust_posteriors,
        loglik: chain.estep.loglik,
        loglik_trace: chain.trace.clone(),
        converged: chain.converged,
        iterations: chain.iterations,
        best_restart_index: index,
        n_degenerate_restarts: n_degenerate,
    })
}
