use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{default_splits, Dataset, PatientTrajectory, Provenance, Split, Standardization};
use crate::error::{Error, Result};
use crate::util::config_hash;

/// Catalogs and inclusion rules for an external extract.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EhrSchema {
    /// Measurement catalog; position is the action index.
    pub features: Vec<String>,
    /// Static covariates, read from same-named columns of the outcome file.
    pub statics: Vec<String>,
    pub interval_minutes: u32,
    pub max_slots: usize,
    pub min_history_minutes: u32,
    pub min_measurements: usize,
    /// Stop at the first bad row instead of skipping and reporting it.
    pub fail_fast: bool,
    /// z-score observed values with training-split statistics.
    pub standardize: bool,
    /// Features to log-transform (`ln(1 + v)`) before standardization.
    pub log_transform: Vec<String>,
    /// Clip standardized values to `±clip_z` when set.
    pub clip_z: Option<f64>,
    pub seed: u64,
}

impl Default for EhrSchema {
    fn default() -> Self {
        Self {
            features: Vec::new(),
            statics: Vec::new(),
            interval_minutes: 30,
            max_slots: 48,
            min_history_minutes: 720,
            min_measurements: 5,
            fail_fast: true,
            standardize: true,
            log_transform: Vec::new(),
            clip_z: None,
            seed: 0,
        }
    }
}

impl EhrSchema {
    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Schema("the measurement catalog is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.features.iter().chain(&self.statics).all(|f| seen.insert(f)) {
            return Err(Error::Schema("catalog names must be unique".into()));
        }
        if self.interval_minutes == 0 || self.max_slots == 0 {
            return Err(Error::Schema("interval and slot count must be positive".into()));
        }
        if self.log_transform.iter().any(|f| !self.features.contains(f)) {
            return Err(Error::Schema("log_transform names an unknown feature".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub patient_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    pub path: PathBuf,
    pub line: u64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub included: usize,
    pub excluded: Vec<Exclusion>,
    pub row_errors: Vec<RowError>,
}

const MEASUREMENT_HEADER: [&str; 4] = ["patient_id", "time_minutes", "feature", "value"];

struct Outcome {
    label: bool,
    statics: Vec<f64>,
}

fn row_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Row {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Records a bad row: fatal in fail-fast mode, otherwise reported.
fn handle(schema: &EhrSchema, report: &mut IngestReport, err: Error) -> Result<()> {
    match err {
        Error::Row { path, line, message } if !schema.fail_fast => {
            report.row_errors.push(RowError { path, line, message });
            Ok(())
        }
        other => Err(other),
    }
}

fn read_outcomes(path: &Path, schema: &EhrSchema, report: &mut IngestReport) -> Result<HashMap<String, Outcome>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.len() < 2 || header[0] != "patient_id" || header[1] != "label" {
        return Err(Error::Schema(format!(
            "{}: outcome header must start with patient_id,label",
            path.display()
        )));
    }
    let static_cols = schema
        .statics
        .iter()
        .map(|s| {
            header
                .iter()
                .position(|h| h == s)
                .ok_or_else(|| Error::Schema(format!("outcome file lacks static column {s}")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let mut out = HashMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let parsed = (|| -> Result<(String, Outcome)> {
            let id = rec.get(0).unwrap_or("").trim().to_string();
            if id.is_empty() {
                return Err(row_error(path, line, "empty patient_id"));
            }
            let label = match rec.get(1).map(str::trim) {
                Some("1") => true,
                Some("0") => false,
                other => return Err(row_error(path, line, format!("label must be 0 or 1, got {other:?}"))),
            };
            let statics = static_cols
                .iter()
                .map(|&c| {
                    rec.get(c)
                        .and_then(|v| v.trim().parse::<f64>().ok())
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| row_error(path, line, format!("bad static value in column {}", header[c])))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((id, Outcome { label, statics }))
        })();
        match parsed {
            Ok((id, o)) => {
                if out.insert(id.clone(), o).is_some() {
                    handle(schema, report, row_error(path, line, format!("duplicate outcome for {id}")))?;
                }
            }
            Err(e) => handle(schema, report, e)?,
        }
    }
    Ok(out)
}

/// Per patient: every valid reading as (minutes before end, feature, value).
type Readings = BTreeMap<String, Vec<(u64, usize, f64)>>;

fn read_measurements(path: &Path, schema: &EhrSchema, report: &mut IngestReport) -> Result<Readings> {
    let index: HashMap<&str, usize> = schema
        .features
        .iter()
        .enumerate()
        .map(|(i, f)| (f.as_str(), i))
        .collect();
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let mut readings = Readings::new();
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Ok(readings);
    }
    if header != MEASUREMENT_HEADER {
        return Err(Error::Schema(format!(
            "{}: header must be {}",
            path.display(),
            MEASUREMENT_HEADER.join(",")
        )));
    }
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 4 {
            handle(schema, report, row_error(path, line, format!("expected 4 fields, got {}", rec.len())))?;
            continue;
        }
        let id = rec[0].trim();
        let time = rec[1].trim().parse::<u64>();
        let feature = rec[2].trim();
        let value = rec[3].trim().parse::<f64>();
        let Some(&k) = index.get(feature) else {
            let err = Error::Schema(format!("{}:{line}: unknown feature {feature:?}", path.display()));
            if schema.fail_fast {
                return Err(err);
            }
            report.row_errors.push(RowError {
                path: path.to_path_buf(),
                line,
                message: format!("unknown feature {feature:?}"),
            });
            continue;
        };
        match (id.is_empty(), time, value) {
            (false, Ok(t), Ok(v)) if v.is_finite() => {
                readings.entry(id.to_string()).or_default().push((t, k, v));
            }
            (true, _, _) => handle(schema, report, row_error(path, line, "empty patient_id"))?,
            (_, Err(_), _) => handle(
                schema,
                report,
                row_error(path, line, format!("time_minutes {:?} is not a non-negative integer", &rec[1])),
            )?,
            _ => handle(schema, report, row_error(path, line, format!("value {:?} is not a finite number", &rec[3])))?,
        }
    }
    Ok(readings)
}

/// Grid of slot averages for one patient's readings in the final window.
fn grid(readings: &[(u64, usize, f64)], schema: &EhrSchema, k: usize) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
    let interval = schema.interval_minutes as u64;
    let horizon = interval * schema.max_slots as u64;
    let in_window: Vec<&(u64, usize, f64)> = readings.iter().filter(|r| r.0 < horizon).collect();
    let max_t = in_window.iter().map(|r| r.0).max().unwrap_or(0);
    let slots = ((max_t / interval) as usize + 1).min(schema.max_slots);
    let mut cells: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); k]; slots];
    for &&(t, f, v) in &in_window {
        let slot = slots - 1 - (t / interval) as usize;
        cells[slot][f].push(v);
    }
    let mut values = vec![vec![0.0; k]; slots];
    let mut observed = vec![vec![false; k]; slots];
    for (s, row) in cells.iter_mut().enumerate() {
        for (f, vs) in row.iter_mut().enumerate() {
            if vs.is_empty() {
                continue;
            }
            // Sorting makes the average independent of input row order.
            vs.sort_by(f64::total_cmp);
            values[s][f] = vs.iter().sum::<f64>() / vs.len() as f64;
            observed[s][f] = true;
        }
    }
    (values, observed)
}

fn standardize(ds: &mut Dataset, clip_z: Option<f64>) {
    let k = ds.n_features();
    let mut sum = vec![0.0; k];
    let mut sq = vec![0.0; k];
    let mut n = vec![0usize; k];
    for p in ds.in_split(Split::Train) {
        for (vals, obs) in p.values.iter().zip(&p.observed) {
            for f in 0..k {
                if obs[f] {
                    sum[f] += vals[f];
                    sq[f] += vals[f] * vals[f];
                    n[f] += 1;
                }
            }
        }
    }
    let mean: Vec<f64> = (0..k).map(|f| if n[f] > 0 { sum[f] / n[f] as f64 } else { 0.0 }).collect();
    let std: Vec<f64> = (0..k)
        .map(|f| {
            if n[f] < 2 {
                return 1.0;
            }
            let var = (sq[f] - n[f] as f64 * mean[f] * mean[f]) / (n[f] - 1) as f64;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    for p in &mut ds.patients {
        for (vals, obs) in p.values.iter_mut().zip(&p.observed) {
            for f in 0..k {
                if obs[f] {
                    let mut z = (vals[f] - mean[f]) / std[f];
                    if let Some(c) = clip_z {
                        z = z.clamp(-c, c);
                    }
                    vals[f] = z;
                }
            }
        }
    }
    ds.standardization = Some(Standardization { mean, std });
}

/// Reads a long-format measurement file and an outcome file into a gridded
/// dataset over each patient's final `max_slots` intervals.
///
/// Time is minutes before the end of the episode. Patients with less than
/// `min_history_minutes` of recording, fewer than `min_measurements`
/// readings in the window, or no outcome are excluded and listed in the
/// report.
pub fn ingest_csv(measurements: &Path, outcomes: &Path, schema: &EhrSchema) -> Result<(Dataset, IngestReport)> {
    schema.validate()?;
    for p in [measurements, outcomes] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.to_path_buf()));
        }
    }
    let mut report = IngestReport::default();
    let outcomes_by_id = read_outcomes(outcomes, schema, &mut report)?;
    let mut readings = read_measurements(measurements, schema, &mut report)?;
    let k = schema.features.len();
    let log_idx: Vec<usize> = schema
        .log_transform
        .iter()
        .map(|f| schema.features.iter().position(|g| g == f).expect("validated"))
        .collect();
    let horizon = schema.interval_minutes as u64 * schema.max_slots as u64;
    let mut patients = Vec::new();
    let mut ids: Vec<&String> = outcomes_by_id.keys().filter(|id| !readings.contains_key(*id)).collect();
    ids.sort();
    for id in ids {
        report.excluded.push(Exclusion {
            patient_id: id.clone(),
            reason: "no measurements".into(),
        });
    }
    for (id, rs) in readings.iter_mut() {
        let Some(outcome) = outcomes_by_id.get(id) else {
            report.excluded.push(Exclusion {
                patient_id: id.clone(),
                reason: "no outcome label".into(),
            });
            continue;
        };
        let history = rs.iter().map(|r| r.0).max().unwrap_or(0);
        let in_window = rs.iter().filter(|r| r.0 < horizon).count();
        if history < schema.min_history_minutes as u64 {
            report.excluded.push(Exclusion {
                patient_id: id.clone(),
                reason: format!("{history} minutes of recording, fewer than {}", schema.min_history_minutes),
            });
            continue;
        }
        if in_window < schema.min_measurements {
            report.excluded.push(Exclusion {
                patient_id: id.clone(),
                reason: format!("{in_window} measurements, fewer than {}", schema.min_measurements),
            });
            continue;
        }
        for r in rs.iter_mut() {
            if log_idx.contains(&r.1) {
                r.2 = r.2.max(0.0).ln_1p();
            }
        }
        let (values, observed) = grid(rs, schema, k);
        patients.push(PatientTrajectory {
            id: id.clone(),
            values,
            observed,
            states: None,
            terminal_time: None,
            label: outcome.label,
            statics: outcome.statics.clone(),
        });
    }
    report.included = patients.len();
    let splits = default_splits(patients.len(), schema.seed);
    let mut ds = Dataset {
        feature_names: schema.features.clone(),
        static_names: schema.statics.clone(),
        patients,
        splits,
        seed: schema.seed,
        config_hash: config_hash(schema),
        provenance: Provenance::Ingested {
            interval_minutes: schema.interval_minutes,
            slots: schema.max_slots,
        },
        standardization: None,
    };
    if schema.standardize {
        standardize(&mut ds, schema.clip_z);
    }
    Ok((ds, report))
}

#[cfg(test)]
mod tests {
    use std::fs;

    use super::*;

    fn schema() -> EhrSchema {
        EhrSchema {
            features: vec!["hr".into(), "lactate".into()],
            standardize: false,
            ..EhrSchema::default()
        }
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn short_history_is_excluded_and_duplicates_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = String::from("patient_id,time_minutes,feature,value\n");
        // a: 10 hours of data.
        for t in (0..=600).step_by(60) {
            m.push_str(&format!("a,{t},hr,80\n"));
        }
        // b: 20 hours, two lactate readings in the final slot.
        for t in (0..=1200).step_by(120) {
            m.push_str(&format!("b,{t},hr,70\n"));
        }
        m.push_str("b,5,lactate,0.4\nb,20,lactate,0.6\n");
        let mp = write(dir.path(), "m.csv", &m);
        let op = write(dir.path(), "o.csv", "patient_id,label\na,0\nb,1\n");
        let (ds, report) = ingest_csv(&mp, &op, &schema()).unwrap();
        assert_eq!(report.included, 1);
        assert_eq!(report.excluded.len(), 1);
        assert_eq!(report.excluded[0].patient_id, "a");
        let b = &ds.patients[0];
        assert_eq!(b.len(), 41);
        let last = b.len() - 1;
        assert!(b.observed[last][1]);
        assert!((b.values[last][1] - 0.5).abs() < 1e-15);
        assert!(b.label);
        assert!(b.observed[0][0]);
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let mp = write(dir.path(), "m.csv", "");
        let op = write(dir.path(), "o.csv", "patient_id,label\n");
        let (ds, report) = ingest_csv(&mp, &op, &schema()).unwrap();
        assert!(ds.is_empty());
        assert_eq!(report.included, 0);
        assert!(report.excluded.is_empty());
    }

    #[test]
    fn unknown_feature_and_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let op = write(dir.path(), "o.csv", "patient_id,label\na,1\n");
        let mp = write(dir.path(), "m.csv", "patient_id,time_minutes,feature,value\na,0,hr,1\na,3,spo2,9\n");
        assert!(matches!(ingest_csv(&mp, &op, &schema()), Err(Error::Schema(_))));
        let mp = write(dir.path(), "m2.csv", "patient_id,time_minutes,feature,value\na,0,hr,1\na,x,hr,2\n");
        match ingest_csv(&mp, &op, &schema()) {
            Err(Error::Row { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected a row error, got {other:?}"),
        }
        let lenient = EhrSchema {
            fail_fast: false,
            ..schema()
        };
        let (_, report) = ingest_csv(&mp, &op, &lenient).unwrap();
        assert_eq!(report.row_errors.len(), 1);
        assert_eq!(report.row_errors[0].line, 3);
    }

    #[test]
    fn row_order_does_not_matter() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = Vec::new();
        for p in ["x", "y", "z"] {
            for t in (0..900).step_by(45) {
                rows.push(format!("{p},{t},hr,{}", 60.0 + t as f64 / 7.0));
                rows.push(format!("{p},{},lactate,{}", t + 3, 0.1 + t as f64 / 1e3));
                rows.push(format!("{p},{},lactate,{}", t + 4, 0.3 + t as f64 / 3e3));
            }
        }
        let op = write(dir.path(), "o.csv", "patient_id,label\nx,1\ny,0\nz,0\n");
        let forward = format!("patient_id,time_minutes,feature,value\n{}\n", rows.join("\n"));
        rows.reverse();
        let backward = format!("patient_id,time_minutes,feature,value\n{}\n", rows.join("\n"));
        let s = EhrSchema {
            standardize: true,
            ..schema()
        };
        let a = ingest_csv(&write(dir.path(), "f.csv", &forward), &op, &s).unwrap();
        let b = ingest_csv(&write(dir.path(), "b.csv", &backward), &op, &s).unwrap();
        assert_eq!(a, b);
        assert!(a.0.standardization.is_some());
    }
}
