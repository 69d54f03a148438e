use super::{Covariate, FitError};
use crate::simcore::Dataset;

/// Centred sufficient statistics of one Trust.
///
/// For shared slopes `b`, the residual sum of squares about an intercept `a`
/// splits exactly as `within(b) + n·(ȳ − b·x̄ − a)²`, which is all the
/// single-patient-class likelihood needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrustStats {
    pub n: usize,
    pub mean_y: f64,
    pub mean_x: Vec<f64>,
    /// `Σ (y − ȳ)²`
    pub syy: f64,
    /// `Σ (x − x̄)(y − ȳ)`
    pub sxy: Vec<f64>,
    /// `Σ (x − x̄)(x − x̄)ᵀ`, row-major `p × p`.
    pub sxx: Vec<f64>,
}

impl TrustStats {
    fn from_rows(ys: &[f64], xs: &[f64], p: usize) -> Self {
        let n = ys.len();
        let nf = n as f64;
        let mean_y = ys.iter().sum::<f64>() / nf;
        let mut mean_x = vec![0.0; p];
        for row in xs.chunks_exact(p) {
            mean_x.iter_mut().zip(row).for_each(|(m, x)| *m += x);
        }
        mean_x.iter_mut().for_each(|m| *m /= nf);
        let mut syy = 0.0;
        let mut sxy = vec![0.0; p];
        let mut sxx = vec![0.0; p * p];
        let mut dx = vec![0.0; p];
        for (y, row) in ys.iter().zip(xs.chunks_exact(p)) {
            let dy = y - mean_y;
            syy += dy * dy;
            for a in 0..p {
                dx[a] = row[a] - mean_x[a];
            }
            for a in 0..p {
                sxy[a] += dx[a] * dy;
                for b in 0..p {
                    sxx[a * p + b] += dx[a] * dx[b];
                }
            }
        }
        Self { n, mean_y, mean_x, syy, sxy, sxx }
    }

    /// `Σ (y − ȳ − b·(x − x̄))²`
    pub fn within_rss(&self, b: &[f64]) -> f64 {
        let p = b.len();
        let mut quad = 0.0;
        for i in 0..p {
            for j in 0..p {
                quad += b[i] * self.sxx[i * p + j] * b[j];
            }
        }
        let cross: f64 = b.iter().zip(&self.sxy).map(|(bi, s)| bi * s).sum();
        (self.syy - 2.0 * cross + quad).max(0.0)
    }

    /// `ȳ − b·x̄`, the Trust mean adjusted to centred covariates.
    pub fn adjusted_mean(&self, b: &[f64]) -> f64 {
        self.mean_y - b.iter().zip(&self.mean_x).map(|(bi, x)| bi * x).sum::<f64>()
    }
}

/// Patients of one Trust: outcomes, a row-major design, and summary stats.
#[derive(Clone, Debug, PartialEq)]
pub struct TrustBlock {
    pub outcomes: Vec<f64>,
    pub covariates: Vec<f64>,
    pub stats: TrustStats,
}

impl TrustBlock {
    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn row(&self, i: usize, p: usize) -> &[f64] {
        &self.covariates[i * p..(i + 1) * p]
    }
}

/// Outcomes and covariates grouped by Trust, the unit of Trust-class membership.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedData {
    pub n_covariates: usize,
    pub trusts: Vec<TrustBlock>,
    pub n_patients: usize,
}

impl GroupedData {
    pub fn from_dataset(dataset: &Dataset, covariates: &[Covariate]) -> Result<Self, FitError> {
        let p = covariates.len();
        let mut ys: Vec<Vec<f64>> = vec![Vec::new(); dataset.n_trusts()];
        let mut xs: Vec<Vec<f64>> = vec![Vec::new(); dataset.n_trusts()];
        for row in &dataset.patients {
            ys[row.trust_id].push(row.outcome);
            xs[row.trust_id].extend(covariates.iter().map(|c| c.value(row)));
        }
        Self::from_flat(ys.into_iter().zip(xs).collect(), p)
    }

    /// Build from per-Trust `(outcomes, row-major covariates)`.
    pub fn from_flat(groups: Vec<(Vec<f64>, Vec<f64>)>, n_covariates: usize) -> Result<Self, FitError> {
        if groups.is_empty() {
            return Err(FitError::InvalidSpec("no Trusts".into()));
        }
        let mut trusts = Vec::with_capacity(groups.len());
        let mut n_patients = 0;
        for (j, (ys, xs)) in groups.into_iter().enumerate() {
            if ys.is_empty() {
                return Err(FitError::EmptyTrust(j));
            }
            if xs.len() != ys.len() * n_covariates {
                return Err(FitError::InvalidSpec(format!("Trust {j}: design has wrong width")));
            }
            if !ys.iter().chain(&xs).all(|v| v.is_finite()) {
                return Err(FitError::InvalidSpec(format!("Trust {j}: non-finite data")));
            }
            n_patients += ys.len();
            let stats = TrustStats::from_rows(&ys, &xs, n_covariates);
            trusts.push(TrustBlock { outcomes: ys, covariates: xs, stats });
        }
        Ok(Self { n_covariates, trusts, n_patients })
    }

    /// Build from per-Trust `(outcomes, covariate rows)`.
    pub fn from_rows(groups: Vec<(Vec<f64>, Vec<Vec<f64>>)>, n_covariates: usize) -> Result<Self, FitError> {
        Self::from_flat(
            groups.into_iter().map(|(ys, rows)| (ys, rows.into_iter().flatten().collect())).collect(),
            n_covariates,
        )
    }

    pub fn n_trusts(&self) -> usize {
        self.trusts.len()
    }

    /// Same data with every outcome transformed by `f`.
    pub fn map_outcomes(&self, f: impl Fn(f64) -> f64) -> Self {
        let groups = self
            .trusts
            .iter()
            .map(|t| (t.outcomes.iter().map(|&y| f(y)).collect(), t.covariates.clone()))
            .collect();
        Self::from_flat(groups, self.n_covariates).expect("shape preserved")
    }
}
