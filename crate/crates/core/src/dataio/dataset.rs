use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_json, to_json_bytes, write_atomic, ArtifactMeta};
use crate::data::{Dataset, PatientTrajectory, Provenance, Split, Standardization};
use crate::error::{Error, Result};
use crate::util::sha256_hex;

pub const DATASET_CSV_HEADER: [&str; 6] = ["patient_id", "t", "state", "k", "value", "observed"];

#[derive(Serialize, Deserialize)]
struct PatientMeta {
    id: String,
    len: usize,
    label: bool,
    terminal_time: Option<usize>,
    statics: Vec<f64>,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    feature_names: Vec<String>,
    static_names: Vec<String>,
    provenance: Provenance,
    standardization: Option<Standardization>,
    patients: Vec<PatientMeta>,
    csv_rows: usize,
    csv_sha256: String,
}

fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

fn dataset_csv(ds: &Dataset) -> Result<(Vec<u8>, usize)> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(DATASET_CSV_HEADER)?;
    let mut rows = 0;
    for p in &ds.patients {
        for t in 0..p.len() {
            let state = p
                .states
                .as_ref()
                .map(|s| s[t].to_string())
                .unwrap_or_default();
            for k in 0..p.n_features() {
                w.write_record([
                    p.id.as_str(),
                    &t.to_string(),
                    &state,
                    &k.to_string(),
                    &p.values[t][k].to_string(),
                    if p.observed[t][k] { "1" } else { "0" },
                ])?;
                rows += 1;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok((bytes, rows))
}

/// Writes the long-format CSV and its JSON sidecar (same stem, `.json`).
pub fn save_dataset(csv_path: &Path, ds: &Dataset) -> Result<()> {
    let (bytes, rows) = dataset_csv(ds)?;
    let sidecar = Sidecar {
        feature_names: ds.feature_names.clone(),
        static_names: ds.static_names.clone(),
        provenance: ds.provenance.clone(),
        standardization: ds.standardization.clone(),
        patients: ds
            .patients
            .iter()
            .zip(&ds.splits)
            .map(|(p, s)| PatientMeta {
                id: p.id.clone(),
                len: p.len(),
                label: p.label,
                terminal_time: p.terminal_time,
                statics: p.statics.clone(),
                split: *s,
            })
            .collect(),
        csv_rows: rows,
        csv_sha256: sha256_hex(&bytes),
    };
    let meta = ArtifactMeta::new("dataset", ds.seed, &ds.config_hash);
    write_atomic(csv_path, &bytes)?;
    write_atomic(&sidecar_path(csv_path), &to_json_bytes(&meta, &sidecar)?)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Reads a dataset written by [`save_dataset`], verifying the CSV against
/// the digest and row count recorded in the sidecar.
pub fn load_dataset(csv_path: &Path) -> Result<Dataset> {
    let (meta, side): (ArtifactMeta, Sidecar) = load_json(&sidecar_path(csv_path), "dataset")?;
    if !csv_path.exists() {
        return Err(Error::MissingArtifact(csv_path.to_path_buf()));
    }
    let bytes = fs::read(csv_path)?;
    if sha256_hex(&bytes) != side.csv_sha256 {
        return Err(bad("dataset CSV does not match its sidecar digest (truncated or modified)"));
    }
    let k = side.feature_names.len();
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != DATASET_CSV_HEADER {
        return Err(bad(format!("unexpected dataset CSV header {header:?}")));
    }
    let mut records = reader.records();
    let mut patients = Vec::with_capacity(side.patients.len());
    let mut splits = Vec::with_capacity(side.patients.len());
    let mut rows = 0usize;
    for pm in side.patients {
        let mut values = vec![vec![0.0; k]; pm.len];
        let mut observed = vec![vec![false; k]; pm.len];
        let mut states: Vec<Option<u8>> = vec![None; pm.len];
        for t in 0..pm.len {
            for kk in 0..k {
                let rec = records
                    .next()
                    .ok_or_else(|| bad("dataset CSV ends early"))??;
                rows += 1;
                let field = |i: usize| rec.get(i).ok_or_else(|| bad(format!("short row {rows}")));
                if field(0)? != pm.id || field(1)? != t.to_string() || field(3)? != kk.to_string() {
                    return Err(bad(format!("row {rows} out of order for patient {}", pm.id)));
                }
                let state = field(2)?;
                if !state.is_empty() {
                    states[t] = Some(state.parse().map_err(|_| bad(format!("bad state on row {rows}")))?);
                }
                values[t][kk] = field(4)?
                    .parse()
                    .map_err(|_| bad(format!("bad value on row {rows}")))?;
                observed[t][kk] = match field(5)? {
                    "1" => true,
                    "0" => false,
                    other => return Err(bad(format!("bad observed flag {other:?} on row {rows}"))),
                };
            }
        }
        let states = if states.iter().all(Option::is_some) && pm.len > 0 {
            Some(states.into_iter().map(|s| s.expect("checked")).collect())
        } else {
            None
        };
        patients.push(PatientTrajectory {
            id: pm.id,
            values,
            observed,
            states,
            terminal_time: pm.terminal_time,
            label: pm.label,
            statics: pm.statics,
        });
        splits.push(pm.split);
    }
    if records.next().is_some() || rows != side.csv_rows {
        return Err(bad("dataset CSV row count does not match its sidecar"));
    }
    Ok(Dataset {
        feature_names: side.feature_names,
        static_names: side.static_names,
        patients,
        splits,
        seed: meta.seed,
        config_hash: meta.config_hash,
        provenance: side.provenance,
        standardization: side.standardization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{gen_dataset, SimConfig};

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.csv");
        let ds = gen_dataset(&SimConfig::default(), 30, 4).unwrap();
        save_dataset(&path, &ds).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn truncated_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.csv");
        let ds = gen_dataset(&SimConfig::default(), 5, 1).unwrap();
        save_dataset(&path, &ds).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format(_))));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = gen_dataset(&SimConfig::default(), 2, 1).unwrap().clone_header();
        save_dataset(&path, &ds).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }
}
