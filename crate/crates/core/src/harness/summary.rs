use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{CovariateKindName, HarnessError, ResultRecord};

/// Sample quantile definitions (Hyndman & Fan numbering).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileConvention {
    /// Inverse of the empirical CDF.
    Type1,
    /// `p(n+1)`-th order statistic, linearly interpolated.
    Type6,
    /// `1 + p(n−1)`-th order statistic, linearly interpolated.
    #[default]
    Type7,
    /// Approximately median-unbiased.
    Type8,
}

impl QuantileConvention {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantileConvention::Type1 => "type1",
            QuantileConvention::Type6 => "type6",
            QuantileConvention::Type7 => "type7",
            QuantileConvention::Type8 => "type8",
        }
    }
}

impl fmt::Display for QuantileConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuantileConvention {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "type1" | "1" => Ok(QuantileConvention::Type1),
            "type6" | "6" => Ok(QuantileConvention::Type6),
            "type7" | "7" => Ok(QuantileConvention::Type7),
            "type8" | "8" => Ok(QuantileConvention::Type8),
            other => Err(format!("unknown quantile convention {other:?} (expected type1, type6, type7 or type8)")),
        }
    }
}

/// Quantile `p` of an ascending, non-empty slice.
pub fn quantile(sorted: &[f64], p: f64, convention: QuantileConvention) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    let nf = n as f64;
    let interpolate = |h: f64| {
        // h is a 0-based fractional index
        let h = h.clamp(0.0, nf - 1.0);
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    match convention {
        QuantileConvention::Type1 => {
            let k = (nf * p).ceil() as usize;
            sorted[k.clamp(1, n) - 1]
        }
        QuantileConvention::Type6 => interpolate((nf + 1.0) * p - 1.0),
        QuantileConvention::Type7 => interpolate((nf - 1.0) * p),
        QuantileConvention::Type8 => interpolate((nf + 1.0 / 3.0) * p + 1.0 / 3.0 - 1.0),
    }
}

/// Median and 2.5 / 97.5 percentile interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

pub fn summarize(values: &[f64], convention: QuantileConvention) -> Result<Summary, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::EmptySummary);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(Summary {
        median: quantile(&v, 0.5, convention),
        ci_lo: quantile(&v, 0.025, convention),
        ci_hi: quantile(&v, 0.975, convention),
    })
}

/// Which seeds a summary row covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedLabel {
    Seed(u64),
    /// Endpoint-wise mean of the per-seed summaries.
    Avg,
    /// Percentiles of all seeds' values taken together.
    Pooled,
}

impl fmt::Display for SeedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeedLabel::Seed(s) => write!(f, "{s}"),
            SeedLabel::Avg => f.write_str("avg"),
            SeedLabel::Pooled => f.write_str("pooled"),
        }
    }
}

impl FromStr for SeedLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "avg" => Ok(SeedLabel::Avg),
            "pooled" => Ok(SeedLabel::Pooled),
            n => n.parse().map(SeedLabel::Seed).map_err(|_| format!("bad seed label {n:?}")),
        }
    }
}

/// Recovery summary for one (kind, β_T, error fraction, seed, model).
///
/// `summary` is `None` when every dataset was excluded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub kind: CovariateKindName,
    pub beta_t_sim: f64,
    pub error_frac: f64,
    pub seed: SeedLabel,
    pub model_p: usize,
    pub model_t: usize,
    pub summary: Option<Summary>,
    pub n_excluded: usize,
    pub n_datasets: usize,
    /// Exclusions per contributing seed, in seed order.
    pub per_seed_excluded: Vec<usize>,
}

impl CellSummary {
    fn same_cell(&self, other: &CellSummary) -> bool {
        self.kind == other.kind
            && self.beta_t_sim == other.beta_t_sim
            && self.error_frac == other.error_frac
            && self.model_p == other.model_p
            && self.model_t == other.model_t
    }

    pub fn ci_width(&self) -> Option<f64> {
        self.summary.map(|s| s.ci_hi - s.ci_lo)
    }
}

/// Combine per-seed summaries of the same cell: medians and interval
/// endpoints are averaged over the seeds that have values, exclusions summed.
pub fn average_over_seeds(summaries: &[CellSummary]) -> Result<CellSummary, HarnessError> {
    let first = summaries.first().ok_or(HarnessError::EmptySummary)?;
    let mut seeds = Vec::new();
    for s in summaries {
        if !s.same_cell(first) {
            return Err(HarnessError::Config("cannot average summaries of different cells".into()));
        }
        match s.seed {
            SeedLabel::Seed(v) if !seeds.contains(&v) => seeds.push(v),
            SeedLabel::Seed(v) => return Err(HarnessError::Config(format!("seed {v} appears twice"))),
            other => return Err(HarnessError::Config(format!("cannot average a {other} summary"))),
        }
    }
    let present: Vec<Summary> = summaries.iter().filter_map(|s| s.summary).collect();
    let summary = (!present.is_empty()).then(|| {
        // offsets from the first value keep the mean of equal values exact
        let mean = |f: fn(&Summary) -> f64| {
            let x0 = f(&present[0]);
            x0 + present.iter().map(|s| f(s) - x0).sum::<f64>() / present.len() as f64
        };
        Summary { median: mean(|s| s.median), ci_lo: mean(|s| s.ci_lo), ci_hi: mean(|s| s.ci_hi) }
    });
    Ok(CellSummary {
        seed: SeedLabel::Avg,
        summary,
        n_excluded: summaries.iter().map(|s| s.n_excluded).sum(),
        n_datasets: summaries.iter().map(|s| s.n_datasets).sum(),
        per_seed_excluded: summaries.iter().map(|s| s.n_excluded).collect(),
        ..first.clone()
    })
}

type GroupKey = (CovariateKindName, u64, u64, usize, usize);
type SeedGroups<'a> = Vec<(u64, Vec<&'a ResultRecord>)>;

fn group_key(r: &ResultRecord) -> GroupKey {
    (r.kind, r.beta_t_sim.to_bits(), r.error_frac.to_bits(), r.model_p, r.model_t)
}

/// Groups records by (kind, β_T, fraction, model), then by seed, both in
/// order of first appearance.
fn grouped(records: &[ResultRecord]) -> Vec<(GroupKey, SeedGroups<'_>)> {
    let mut groups: Vec<(GroupKey, SeedGroups<'_>)> = Vec::new();
    for r in records {
        let key = group_key(r);
        let gi = match groups.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                groups.push((key, Vec::new()));
                groups.len() - 1
            }
        };
        let seeds = &mut groups[gi].1;
        match seeds.iter_mut().find(|(s, _)| *s == r.seed) {
            Some((_, v)) => v.push(r),
            None => seeds.push((r.seed, vec![r])),
        }
    }
    groups
}

fn summary_of(
    rs: &[&ResultRecord],
    seed: SeedLabel,
    convention: QuantileConvention,
) -> Result<CellSummary, HarnessError> {
    let values: Vec<f64> = rs.iter().filter_map(|r| r.outcome.value()).collect();
    let n_excluded = rs.len() - values.len();
    let summary = match summarize(&values, convention) {
        Ok(s) => Some(s),
        Err(HarnessError::EmptySummary) => None,
        Err(e) => return Err(e),
    };
    let r0 = rs[0];
    Ok(CellSummary {
        kind: r0.kind,
        beta_t_sim: r0.beta_t_sim,
        error_frac: r0.error_frac,
        seed,
        model_p: r0.model_p,
        model_t: r0.model_t,
        summary,
        n_excluded,
        n_datasets: rs.len(),
        per_seed_excluded: vec![n_excluded],
    })
}

/// Per-seed rows followed by the seed-averaged row, for every
/// (kind, β_T, fraction, model) group.
pub fn summarize_records(
    records: &[ResultRecord],
    convention: QuantileConvention,
) -> Result<Vec<CellSummary>, HarnessError> {
    let mut out = Vec::new();
    for (_, seeds) in grouped(records) {
        let per_seed = seeds
            .iter()
            .map(|(s, rs)| summary_of(rs, SeedLabel::Seed(*s), convention))
            .collect::<Result<Vec<_>, _>>()?;
        let avg = average_over_seeds(&per_seed)?;
        out.extend(per_seed);
        out.push(avg);
    }
    Ok(out)
}

/// One row per (kind, β_T, fraction, model) with percentiles over all seeds' values.
pub fn pooled_summaries(
    records: &[ResultRecord],
    convention: QuantileConvention,
) -> Result<Vec<CellSummary>, HarnessError> {
    grouped(records)
        .into_iter()
        .map(|(_, seeds)| {
            let all: Vec<&ResultRecord> = seeds.iter().flat_map(|(_, v)| v.iter().copied()).collect();
            let mut s = summary_of(&all, SeedLabel::Pooled, convention)?;
            s.per_seed_excluded =
                seeds.iter().map(|(_, v)| v.iter().filter(|r| r.outcome.value().is_none()).count()).collect();
            Ok(s)
        })
        .collect()
}
