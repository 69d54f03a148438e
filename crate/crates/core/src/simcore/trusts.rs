use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{Gamma, Normal};

use super::{SimError, TrustCovariateKind};

fn dirichlet_weights<R: Rng + ?Sized>(k: usize, concentration: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("concentration validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|g| g / total).collect()
}

/// Assign each patient to a Trust.
///
/// Size weights are drawn from a symmetric Dirichlet(`concentration`) and
/// patients are allocated independently with those weights. If any Trust
/// ends up with fewer than `min_trust_size` patients, weights are redrawn and
/// the allocation repeated, at most `max_retries` times.
pub fn assign_trusts<R: Rng + ?Sized>(
    n_patients: usize,
    n_trusts: usize,
    concentration: f64,
    min_trust_size: usize,
    max_retries: usize,
    rng: &mut R,
) -> Result<Vec<usize>, SimError> {
    if n_trusts == 0 {
        return Err(SimError::config("n_trusts", "must be positive"));
    }
    if n_patients < n_trusts * min_trust_size {
        return Err(SimError::config(
            "n_patients",
            format!("{n_patients} < n_trusts x min_trust_size = {}", n_trusts * min_trust_size),
        ));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(SimError::config("size_concentration", "must be positive and finite"));
    }

    let mut sizes = vec![0usize; n_trusts];
    for _ in 0..max_retries {
        let weights = dirichlet_weights(n_trusts, concentration, rng);
        // A weight can underflow to zero for tiny concentrations.
        let Ok(index) = WeightedIndex::new(&weights) else { continue };
        sizes.iter_mut().for_each(|s| *s = 0);
        let assignment: Vec<usize> = (0..n_patients)
            .map(|_| {
                let j = index.sample(rng);
                sizes[j] += 1;
                j
            })
            .collect();
        if sizes.iter().all(|&s| s >= min_trust_size) {
            return Ok(assignment);
        }
    }
    Err(SimError::AssignmentRetriesExhausted { retries: max_retries, min_trust_size })
}

/// Draw the Trust-level covariate for each of `n_trusts` Trusts.
pub fn draw_trust_covariate<R: Rng + ?Sized>(
    kind: &TrustCovariateKind,
    n_trusts: usize,
    rng: &mut R,
) -> Vec<f64> {
    match *kind {
        TrustCovariateKind::Binary { low, high, jitter_sd } => {
            let jitter = Normal::new(0.0, jitter_sd).expect("jitter_sd validated");
            (0..n_trusts)
                .map(|_| {
                    let level = if rng.random_bool(0.5) { high } else { low };
                    level + jitter.sample(rng)
                })
                .collect()
        }
        TrustCovariateKind::Continuous { min, max, grid: None } => {
            (0..n_trusts).map(|_| rng.random_range(min..=max)).collect()
        }
        TrustCovariateKind::Continuous { min, max, grid: Some(g) } => {
            let step = (max - min) / (g - 1) as f64;
            (0..n_trusts)
                .map(|_| {
                    let i = rng.random_range(0..g);
                    if i == g - 1 { max } else { min + step * i as f64 }
                })
                .collect()
        }
    }
}
