use std::fs;
use std::io::Write;
use std::path::Path;

use super::{CellSummary, CovariateKindName, HarnessError, ResultRecord, SeedLabel, Summary};
use crate::recovery::{ExclusionReason, RecoveredBeta, Recovery};

pub const RESULTS_HEADER: [&str; 10] = [
    "kind",
    "beta_t_sim",
    "error_frac",
    "seed",
    "model_p",
    "model_t",
    "dataset_id",
    "beta_t_rec",
    "excluded",
    "exclusion_reason",
];

pub const SUMMARY_HEADER: [&str; 10] =
    ["kind", "beta_t_sim", "error_frac", "seed", "model_p", "model_t", "median", "ci_lo", "ci_hi", "n_excluded"];

fn malformed(what: &Path, line: usize, message: impl Into<String>) -> HarnessError {
    HarnessError::Malformed { what: format!("{} line {line}", what.display()), message: message.into() }
}

/// Write to a sibling temporary file and rename into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| HarnessError::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| HarnessError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

pub(crate) fn write_json_atomic<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn to_csv_bytes<F>(header: &[&str], rows: usize, mut row: F) -> Result<Vec<u8>, HarnessError>
where
    F: FnMut(usize) -> Vec<String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for i in 0..rows {
        w.write_record(row(i))?;
    }
    w.into_inner().map_err(|e| HarnessError::Malformed { what: "csv buffer".into(), message: e.to_string() })
}

pub fn write_results(path: &Path, records: &[ResultRecord]) -> Result<(), HarnessError> {
    let bytes = to_csv_bytes(&RESULTS_HEADER, records.len(), |i| {
        let r = &records[i];
        vec![
            r.kind.to_string(),
            r.beta_t_sim.to_string(),
            r.error_frac.to_string(),
            r.seed.to_string(),
            r.model_p.to_string(),
            r.model_t.to_string(),
            r.dataset_id.to_string(),
            r.outcome.value().map(|v| v.to_string()).unwrap_or_default(),
            u8::from(r.outcome.exclusion().is_some()).to_string(),
            r.outcome.exclusion().map(|e| e.to_string()).unwrap_or_default(),
        ]
    })?;
    write_atomic(path, &bytes)
}

fn open_checked(path: &Path, header: &[&str]) -> Result<csv::Reader<fs::File>, HarnessError> {
    let file = fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(malformed(path, 1, format!("expected header {}, found {}", header.join(","), found.join(","))));
    }
    Ok(r)
}

fn parse<T: std::str::FromStr>(path: &Path, line: usize, field: &str, s: &str) -> Result<T, HarnessError> {
    s.parse().map_err(|_| malformed(path, line, format!("{field}: cannot parse {s:?}")))
}

fn parse_kind(path: &Path, line: usize, s: &str) -> Result<CovariateKindName, HarnessError> {
    CovariateKindName::parse(s).ok_or_else(|| malformed(path, line, format!("kind: unknown {s:?}")))
}

/// Read results.csv. Recovered rows carry only the coefficient; the other
/// recovery details are not stored.
pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>, HarnessError> {
    let mut r = open_checked(path, &RESULTS_HEADER)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let f = |k: usize| rec.get(k).unwrap_or("");
        let outcome = match f(8) {
            "0" => RecoveredBeta::Recovered(Recovery {
                beta_t: parse(path, line, "beta_t_rec", f(7))?,
                intercept: f64::NAN,
                trust_outcomes: Vec::new(),
                posterior_spread: f64::NAN,
                class_separation: f64::NAN,
            }),
            "1" => RecoveredBeta::Excluded {
                reason: ExclusionReason::parse(f(9))
                    .ok_or_else(|| malformed(path, line, format!("exclusion_reason: unknown {:?}", f(9))))?,
            },
            other => return Err(malformed(path, line, format!("excluded: expected 0 or 1, found {other:?}"))),
        };
        out.push(ResultRecord {
            kind: parse_kind(path, line, f(0))?,
            beta_t_sim: parse(path, line, "beta_t_sim", f(1))?,
            error_frac: parse(path, line, "error_frac", f(2))?,
            seed: parse(path, line, "seed", f(3))?,
            model_p: parse(path, line, "model_p", f(4))?,
            model_t: parse(path, line, "model_t", f(5))?,
            dataset_id: parse(path, line, "dataset_id", f(6))?,
            outcome,
        });
    }
    Ok(out)
}

pub fn write_summaries(path: &Path, summaries: &[CellSummary]) -> Result<(), HarnessError> {
    let bytes = to_csv_bytes(&SUMMARY_HEADER, summaries.len(), |i| {
        let s = &summaries[i];
        let num = |f: fn(&Summary) -> f64| s.summary.as_ref().map(|v| f(v).to_string()).unwrap_or_default();
        vec![
            s.kind.to_string(),
            s.beta_t_sim.to_string(),
            s.error_frac.to_string(),
            s.seed.to_string(),
            s.model_p.to_string(),
            s.model_t.to_string(),
            num(|v| v.median),
            num(|v| v.ci_lo),
            num(|v| v.ci_hi),
            s.n_excluded.to_string(),
        ]
    })?;
    write_atomic(path, &bytes)
}

/// Read summary.csv. Dataset counts are not stored and come back as zero.
pub fn read_summaries(path: &Path) -> Result<Vec<CellSummary>, HarnessError> {
    let mut r = open_checked(path, &SUMMARY_HEADER)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let f = |k: usize| rec.get(k).unwrap_or("");
        let summary = if f(6).is_empty() {
            None
        } else {
            Some(Summary {
                median: parse(path, line, "median", f(6))?,
                ci_lo: parse(path, line, "ci_lo", f(7))?,
                ci_hi: parse(path, line, "ci_hi", f(8))?,
            })
        };
        let n_excluded = parse(path, line, "n_excluded", f(9))?;
        out.push(CellSummary {
            kind: parse_kind(path, line, f(0))?,
            beta_t_sim: parse(path, line, "beta_t_sim", f(1))?,
            error_frac: parse(path, line, "error_frac", f(2))?,
            seed: f(3).parse::<SeedLabel>().map_err(|m| malformed(path, line, m))?,
            model_p: parse(path, line, "model_p", f(4))?,
            model_t: parse(path, line, "model_t", f(5))?,
            summary,
            n_excluded,
            n_datasets: 0,
            per_seed_excluded: vec![n_excluded],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(d: usize, outcome: RecoveredBeta) -> ResultRecord {
        ResultRecord {
            kind: CovariateKindName::Continuous,
            beta_t_sim: 0.12,
            error_frac: 0.5,
            seed: 2,
            model_p: 1,
            model_t: 3,
            dataset_id: d,
            outcome,
        }
    }

    #[test]
    fn results_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let recs = vec![
            record(
                0,
                RecoveredBeta::Recovered(Recovery {
                    beta_t: 0.1234567890123,
                    intercept: 0.0,
                    trust_outcomes: vec![],
                    posterior_spread: 1.0,
                    class_separation: 1.0,
                }),
            ),
            record(1, RecoveredBeta::Excluded { reason: ExclusionReason::DegenerateMembership }),
        ];
        write_results(&path, &recs).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("kind,beta_t_sim,error_frac,seed,model_p,model_t,dataset_id,beta_t_rec,excluded,exclusion_reason\n"));
        assert!(text.contains("continuous,0.12,0.5,2,1,3,1,,1,degenerate-membership"));
        let back = read_results(&path).unwrap();
        assert_eq!(back[0].outcome.value(), Some(0.1234567890123));
        assert_eq!(back[1].outcome, recs[1].outcome);
    }

    #[test]
    fn summaries_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let s = CellSummary {
            kind: CovariateKindName::Binary,
            beta_t_sim: 0.027,
            error_frac: 0.67,
            seed: SeedLabel::Avg,
            model_p: 1,
            model_t: 2,
            summary: None,
            n_excluded: 100,
            n_datasets: 0,
            per_seed_excluded: vec![100],
        };
        write_summaries(&path, std::slice::from_ref(&s)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "kind,beta_t_sim,error_frac,seed,model_p,model_t,median,ci_lo,ci_hi,n_excluded\nbinary,0.027,0.67,avg,1,2,,,,100\n"
        );
        assert_eq!(read_summaries(&path).unwrap(), vec![s]);
    }

    #[test]
    fn wrong_header_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_summaries(&path), Err(HarnessError::Malformed { .. })));
        assert!(matches!(read_results(&path), Err(HarnessError::Malformed { .. })));
    }
}
