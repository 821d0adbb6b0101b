use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::eval::{ActionFrequency, OnlineMetrics};
use crate::oppe::OppeReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OppeRow {
    pub policy_id: String,
    pub lambda: f64,
    #[serde(rename = "G")]
    pub gain: f64,
    pub total_cost: f64,
    pub relative_cost: f64,
}

impl OppeRow {
    pub fn new(report: &OppeReport, lambda: f64) -> Self {
        Self {
            policy_id: report.policy.clone(),
            lambda,
            gain: report.gain,
            total_cost: report.total_cost,
            relative_cost: report.relative_cost,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineRow {
    pub policy_id: String,
    pub lambda: f64,
    pub action_freq: f64,
    pub disease_gain: f64,
    #[serde(rename = "G_online")]
    pub g_online: f64,
}

impl OnlineRow {
    pub fn new(m: &OnlineMetrics, lambda: f64) -> Self {
        Self {
            policy_id: m.policy.clone(),
            lambda,
            action_freq: m.action_freq,
            disease_gain: m.disease_gain,
            g_online: m.g_online,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub policy_id: String,
    pub lambda: f64,
    pub relative_cost: f64,
    #[serde(rename = "G")]
    pub gain: f64,
    pub on_frontier: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecasterEvalRow {
    pub forecaster: String,
    pub split: String,
    pub n: usize,
    pub auc: f64,
    pub aupr: f64,
}

pub fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn read_csv_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

pub fn write_oppe_csv(path: &Path, rows: &[OppeRow]) -> Result<()> {
    write_csv_rows(path, rows)
}

pub fn write_online_csv(path: &Path, rows: &[OnlineRow]) -> Result<()> {
    write_csv_rows(path, rows)
}

pub fn write_frontier_csv(path: &Path, rows: &[FrontierRow]) -> Result<()> {
    write_csv_rows(path, rows)
}

pub fn write_forecaster_eval_csv(path: &Path, rows: &[ForecasterEvalRow]) -> Result<()> {
    write_csv_rows(path, rows)
}

/// One row per policy with columns `policy, M1..MK` holding per-timepoint
/// selection frequencies.
pub fn write_action_frequency_csv(path: &Path, reports: &[ActionFrequency]) -> Result<()> {
    let k = reports.first().map_or(0, |r| r.per_step.len());
    if reports.iter().any(|r| r.per_step.len() != k) {
        return Err(Error::Shape("action frequency rows differ in width".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["policy".to_string()];
    header.extend((1..=k).map(|i| format!("M{i}")));
    w.write_record(&header)?;
    for r in reports {
        let mut rec = vec![r.policy.clone()];
        rec.extend(r.per_step.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oppe_rows_round_trip_with_stable_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("oppe.csv");
        let rows = vec![
            OppeRow {
                policy_id: "dqn".into(),
                lambda: 1e-3,
                gain: 12.5,
                total_cost: 40.0,
                relative_cost: 0.1,
            },
            OppeRow {
                policy_id: "measure_all".into(),
                lambda: 0.0,
                gain: 20.0,
                total_cost: 400.0,
                relative_cost: 1.0,
            },
        ];
        write_oppe_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("policy_id,lambda,G,total_cost,relative_cost\n"));
        let back: Vec<OppeRow> = read_csv_rows(&p).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn action_frequency_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("freq.csv");
        let r = ActionFrequency {
            policy: "dqn".into(),
            per_step: vec![0.5, 0.0, 1.0],
            per_trajectory: vec![10.0, 0.0, 20.0],
        };
        write_action_frequency_csv(&p, &[r]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "policy,M1,M2,M3\ndqn,0.5,0,1\n");
    }
}
