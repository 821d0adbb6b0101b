//! Stable on-disk formats for every artifact, plus ingestion of external
//! longitudinal CSV extracts.
//!
//! JSON artifacts share one envelope carrying a format version, an artifact
//! kind, the producing tool version, the seed and the config hash. Loading
//! rejects unknown versions, mismatched kinds and truncated payloads.

mod dataset;
mod experience;
mod ingest;
mod reports;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{load_dataset, save_dataset, DATASET_CSV_HEADER};
pub use experience::{load_experiences, save_experiences, ExperienceFile};
pub use ingest::{ingest_csv, EhrSchema, Exclusion, IngestReport, RowError};
pub use reports::{
    read_csv_rows, write_action_frequency_csv, write_csv_rows, write_forecaster_eval_csv, write_frontier_csv,
    write_online_csv, write_oppe_csv, ForecasterEvalRow, FrontierRow, OnlineRow, OppeRow,
};

pub const FORMAT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance carried by every persisted artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub format_version: u32,
    pub kind: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
}

impl ArtifactMeta {
    pub fn new(kind: &str, seed: u64, config_hash: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            seed,
            config_hash: config_hash.to_string(),
        }
    }
}

#[derive(Serialize)]
struct EnvelopeOut<'a, T> {
    meta: &'a ArtifactMeta,
    payload: &'a T,
}

#[derive(Deserialize)]
struct EnvelopeIn<T> {
    meta: ArtifactMeta,
    payload: T,
}

#[derive(Deserialize)]
struct MetaOnly {
    meta: ArtifactMeta,
}

/// Writes `bytes` to a sibling temporary file and renames it into place, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn to_json_bytes<T: Serialize>(meta: &ArtifactMeta, payload: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec(&EnvelopeOut { meta, payload })?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn save_json<T: Serialize>(path: &Path, meta: &ArtifactMeta, payload: &T) -> Result<()> {
    write_atomic(path, &to_json_bytes(meta, payload)?)
}

fn check_meta(meta: &ArtifactMeta, kind: &str) -> Result<()> {
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    if meta.kind != kind {
        return Err(Error::Format(format!("expected a {kind} artifact, found {}", meta.kind)));
    }
    Ok(())
}

pub fn from_json_bytes<T: DeserializeOwned>(bytes: &[u8], kind: &str) -> Result<(ArtifactMeta, T)> {
    let head: MetaOnly =
        serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("corrupt {kind} artifact: {e}")))?;
    check_meta(&head.meta, kind)?;
    let env: EnvelopeIn<T> =
        serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("corrupt {kind} artifact: {e}")))?;
    Ok((env.meta, env.payload))
}

/// Loads a JSON artifact of the given kind; a missing file is reported as
/// such rather than as an I/O error.
pub fn load_json<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<(ArtifactMeta, T)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    from_json_bytes(&fs::read(path)?, kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let meta = ArtifactMeta::new("thing", 7, "abc");
        let payload = vec![0.1f64, 1.0 / 3.0, -2.5e-300];
        save_json(&path, &meta, &payload).unwrap();
        let (m, p): (ArtifactMeta, Vec<f64>) = load_json(&path, "thing").unwrap();
        assert_eq!(m, meta);
        assert_eq!(p, payload);
        assert!(matches!(load_json::<Vec<f64>>(&path, "other"), Err(Error::Format(_))));

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_json::<Vec<f64>>(&path, "thing"), Err(Error::Format(_))));

        let text = String::from_utf8(bytes).unwrap().replace("\"format_version\":1", "\"format_version\":99");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_json::<Vec<f64>>(&path, "thing"), Err(Error::Format(_))));

        assert!(matches!(
            load_json::<Vec<f64>>(&dir.path().join("missing.json"), "thing"),
            Err(Error::MissingArtifact(_))
        ));
    }
}
