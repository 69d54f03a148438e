use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, PatientRow, SimError, Truth};

/// JSON stored next to the patient CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSidecar {
    pub trust_covariate: Vec<f64>,
    pub truth: Truth,
}

/// `data.csv` → `data.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

pub fn write_dataset(dataset: &Dataset, csv_path: &Path) -> Result<(), SimError> {
    let sidecar = sidecar_path(csv_path);
    if sidecar == csv_path {
        return Err(SimError::config("out", "dataset path must not have a .json extension"));
    }
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(csv_path)?));
    w.write_record(["trust_id", "age", "sex", "ses", "outcome"])?;
    for p in &dataset.patients {
        w.write_record([
            p.trust_id.to_string(),
            p.age.to_string(),
            p.sex.to_string(),
            p.ses.to_string(),
            p.outcome.to_string(),
        ])?;
    }
    w.flush()?;

    let meta = DatasetSidecar { trust_covariate: dataset.trust_covariate.clone(), truth: dataset.truth };
    let mut f = BufWriter::new(File::create(sidecar)?);
    serde_json::to_writer_pretty(&mut f, &meta)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_dataset(csv_path: &Path) -> Result<Dataset, SimError> {
    let meta: DatasetSidecar = serde_json::from_reader(File::open(sidecar_path(csv_path))?)?;
    let mut r = csv::Reader::from_path(csv_path)?;
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["trust_id", "age", "sex", "ses", "outcome"] {
        return Err(SimError::Malformed(format!("unexpected header {header:?}")));
    }
    let mut patients = Vec::new();
    for rec in r.deserialize() {
        let row: PatientRow = rec?;
        if row.trust_id >= meta.trust_covariate.len() {
            return Err(SimError::Malformed(format!("trust_id {} out of range", row.trust_id)));
        }
        if row.sex > 1 {
            return Err(SimError::Malformed(format!("sex must be 0 or 1, got {}", row.sex)));
        }
        patients.push(row);
    }
    if patients.is_empty() {
        return Err(SimError::Malformed("no patient rows".into()));
    }
    Ok(Dataset { patients, trust_covariate: meta.trust_covariate, truth: meta.truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simcore::{simulate_dataset, SimConfig};

    #[test]
    fn csv_and_sidecar_round_trip_exactly() {
        let cfg = SimConfig { n_patients: 500, ..SimConfig::default() };
        let d = simulate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_dataset(&d, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(d, back);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("trust_id,age,sex,ses,outcome\n"));
    }

    #[test]
    fn missing_sidecar_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nothing.csv");
        assert!(matches!(read_dataset(&path), Err(SimError::Io(_))));
    }
}
