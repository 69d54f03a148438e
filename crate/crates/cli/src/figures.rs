use std::fmt;
use std::io;
use std::path::Path;
use std::str::FromStr;

use mlc_core::harness::{CellSummary, CovariateKindName, SeedLabel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FigureId {
    /// Binary covariate, all models combined, one series per error fraction.
    Fig2,
    /// Continuous covariate at the given error fraction, one series per Trust-class count.
    Fig3,
    Fig4,
    Fig5,
}

impl FigureId {
    fn continuous_fraction(self) -> Option<f64> {
        match self {
            FigureId::Fig2 => None,
            FigureId::Fig3 => Some(0.33),
            FigureId::Fig4 => Some(0.50),
            FigureId::Fig5 => Some(0.67),
        }
    }

    pub fn header(self) -> [&'static str; 6] {
        let series = if self == FigureId::Fig2 { "error_frac" } else { "model_t" };
        [series, "simulated", "median", "ci_lo", "ci_hi", "equality"]
    }
}

impl fmt::Display for FigureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FigureId::Fig2 => "fig2",
            FigureId::Fig3 => "fig3",
            FigureId::Fig4 => "fig4",
            FigureId::Fig5 => "fig5",
        })
    }
}

impl FromStr for FigureId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fig2" => Ok(FigureId::Fig2),
            "fig3" => Ok(FigureId::Fig3),
            "fig4" => Ok(FigureId::Fig4),
            "fig5" => Ok(FigureId::Fig5),
            other => Err(format!("unknown figure {other:?} (expected fig2, fig3, fig4 or fig5)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FigureRow {
    pub series: String,
    pub simulated: f64,
    pub median: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

/// Rows of a figure from the seed-averaged summaries.
///
/// Figure 2 averages medians and interval endpoints over models. Figures
/// 3 to 5 drop the smallest continuous β_T present.
pub fn figure_rows(summaries: &[CellSummary], figure: FigureId) -> Vec<FigureRow> {
    let avg = summaries.iter().filter(|s| s.seed == SeedLabel::Avg && s.summary.is_some());
    match figure.continuous_fraction() {
        None => {
            let binary: Vec<&CellSummary> = avg.filter(|s| s.kind == CovariateKindName::Binary).collect();
            let mut keys: Vec<(f64, f64)> = binary.iter().map(|s| (s.error_frac, s.beta_t_sim)).collect();
            keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            keys.dedup();
            keys.into_iter()
                .map(|(frac, beta)| {
                    let group: Vec<_> = binary
                        .iter()
                        .filter(|s| s.error_frac == frac && s.beta_t_sim == beta)
                        .filter_map(|s| s.summary)
                        .collect();
                    let k = group.len() as f64;
                    FigureRow {
                        series: frac.to_string(),
                        simulated: beta,
                        median: group.iter().map(|s| s.median).sum::<f64>() / k,
                        ci_lo: group.iter().map(|s| s.ci_lo).sum::<f64>() / k,
                        ci_hi: group.iter().map(|s| s.ci_hi).sum::<f64>() / k,
                    }
                })
                .collect()
        }
        Some(frac) => {
            let continuous: Vec<&CellSummary> = avg.filter(|s| s.kind == CovariateKindName::Continuous).collect();
            let lowest = continuous.iter().map(|s| s.beta_t_sim).fold(f64::INFINITY, f64::min);
            let mut rows: Vec<(usize, FigureRow)> = continuous
                .iter()
                .filter(|s| close(s.error_frac, frac) && s.beta_t_sim != lowest)
                .map(|s| {
                    let v = s.summary.expect("filtered on presence");
                    (
                        s.model_t,
                        FigureRow {
                            series: s.model_t.to_string(),
                            simulated: s.beta_t_sim,
                            median: v.median,
                            ci_lo: v.ci_lo,
                            ci_hi: v.ci_hi,
                        },
                    )
                })
                .collect();
            rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.simulated.total_cmp(&b.1.simulated)));
            rows.into_iter().map(|(_, r)| r).collect()
        }
    }
}

pub fn write_figure(path: &Path, figure: FigureId, rows: &[FigureRow]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(figure.header())?;
    for r in rows {
        w.write_record([
            r.series.clone(),
            r.simulated.to_string(),
            r.median.to_string(),
            r.ci_lo.to_string(),
            r.ci_hi.to_string(),
            r.simulated.to_string(),
        ])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use mlc_core::harness::Summary;

    fn row(kind: CovariateKindName, beta: f64, frac: f64, t: usize, median: f64) -> CellSummary {
        CellSummary {
            kind,
            beta_t_sim: beta,
            error_frac: frac,
            seed: SeedLabel::Avg,
            model_p: 1,
            model_t: t,
            summary: Some(Summary { median, ci_lo: median - 0.01, ci_hi: median + 0.01 }),
            n_excluded: 0,
            n_datasets: 300,
            per_seed_excluded: vec![0, 0, 0],
        }
    }

    #[test]
    fn fig2_averages_models_and_keeps_every_beta() {
        let mut s = vec![];
        for &b in &[0.027, 0.137] {
            for t in 2..=4 {
                s.push(row(CovariateKindName::Binary, b, 0.33, t, b + 0.001 * t as f64));
            }
        }
        let rows = figure_rows(&s, FigureId::Fig2);
        assert_eq!(rows.len(), 2);
        assert!((rows[0].median - (0.027 + 0.003)).abs() < 1e-12);
        assert_eq!(rows[0].series, "0.33");
    }

    #[test]
    fn continuous_figures_drop_the_lowest_beta() {
        let mut s = vec![];
        for &b in &[0.011, 0.053, 0.264] {
            for &f in &[0.33, 0.5] {
                for t in 2..=3 {
                    s.push(row(CovariateKindName::Continuous, b, f, t, b * 0.9));
                }
            }
        }
        let fig3 = figure_rows(&s, FigureId::Fig3);
        assert_eq!(fig3.len(), 4);
        assert!(fig3.iter().all(|r| r.simulated != 0.011));
        assert_eq!(fig3[0].series, "2");
        assert_eq!(figure_rows(&s, FigureId::Fig4).len(), 4);
        assert!(figure_rows(&s, FigureId::Fig5).is_empty());
    }

    #[test]
    fn per_seed_rows_are_ignored() {
        let mut r = row(CovariateKindName::Binary, 0.5, 0.33, 2, 0.5);
        r.seed = SeedLabel::Seed(1);
        assert!(figure_rows(&[r], FigureId::Fig2).is_empty());
    }

    #[test]
    fn figure_ids_parse() {
        for f in [FigureId::Fig2, FigureId::Fig3, FigureId::Fig4, FigureId::Fig5] {
            assert_eq!(f.to_string().parse::<FigureId>().unwrap(), f);
        }
        assert!("fig9".parse::<FigureId>().is_err());
    }
}
