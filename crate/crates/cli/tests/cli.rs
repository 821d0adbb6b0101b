use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "sim": {"n_patients": 80},
  "dqn": {"hyper": {"steps": 300, "eval_interval": 150, "width": 16}, "search_draws": 2,
          "search": {"width": [16], "batch_size": [32], "representation_layers": [1], "dueling_layers": [1]}},
  "oppe": {"max_epochs": 5, "width": 16},
  "eval": {"n_rollouts": 20}
}"#;

fn measched(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_measched"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = measched(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_kind(out: &Output) -> String {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let v: serde_json::Value = serde_json::from_str(stderr.trim()).expect("structured error on stderr");
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("config.json");
    fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn simulate_is_byte_identical_across_runs_and_worker_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["--seed", "3", "simulate", "sim.n_patients=100"]);
    ok(b.path(), &["--seed", "3", "--workers", "2", "simulate", "sim.n_patients=100"]);
    for f in ["dataset.csv", "dataset.json", "manifest.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn structured_errors() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["simulate", "sim.n_patients=30"]);
    assert_eq!(error_kind(&measched(dir.path(), &["eval-oppe"])), "missing_artifact");
    assert_eq!(error_kind(&measched(dir.path(), &["simulate", "reward.lamda=1"])), "config");
    assert_eq!(error_kind(&measched(dir.path(), &["simulate", "reward.lambda=-1"])), "config");
    let empty = tempfile::tempdir().unwrap();
    assert_eq!(error_kind(&measched(empty.path(), &["gen-experience"])), "missing_artifact");
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"sim": {"n_patient": 5}}"#).unwrap();
    assert_eq!(
        error_kind(&measched(dir.path(), &["--config", cfg.to_str().unwrap(), "simulate"])),
        "config"
    );
}

#[test]
fn full_pipeline_produces_frontier_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let d = dir.path();
    for stage in [
        "simulate",
        "train-forecaster",
        "eval-forecaster",
        "gen-experience",
        "fit-oppe",
        "train-dqn",
        "search",
        "eval-oppe",
        "eval-online",
        "frontier",
        "report",
    ] {
        ok(d, &["--config", &cfg, "--seed", "11", stage]);
    }
    let frontier = fs::read_to_string(d.join("frontier.csv")).unwrap();
    let mut lines = frontier.lines();
    assert_eq!(lines.next().unwrap(), "policy_id,lambda,relative_cost,G,on_frontier");
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() >= 5, "{frontier}");
    assert!(rows.iter().any(|r| r.starts_with("dqn,")));
    assert!(rows.iter().any(|r| r.starts_with("search_00,")));
    assert!(rows.iter().any(|r| r.ends_with(",true")));

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(d.join("manifest.json")).unwrap()).unwrap();
    let artifacts = manifest["payload"]["artifacts"].as_object().unwrap();
    for name in [
        "dataset.csv",
        "forecaster.json",
        "experiences.json",
        "phi.json",
        "policy.json",
        "train_log.jsonl",
        "search_policies.json",
        "oppe.csv",
        "online.csv",
        "action_frequency.csv",
        "frontier.csv",
        "report.json",
    ] {
        let e = &artifacts[name];
        assert_eq!(e["seed"], 11, "{name}");
        assert_eq!(e["sha256"].as_str().unwrap().len(), 64, "{name}");
    }
    let policy: serde_json::Value = serde_json::from_slice(&fs::read(d.join("policy.json")).unwrap()).unwrap();
    assert_eq!(policy["meta"]["kind"], "policy");
    assert_eq!(policy["meta"]["seed"], 11);
    assert!(policy["meta"]["config_hash"].as_str().unwrap().len() >= 8);

    let log = fs::read_to_string(d.join("train_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 150);
    assert!(first["validation_gain"].is_number());

    let freq = fs::read_to_string(d.join("action_frequency.csv")).unwrap();
    assert!(freq.starts_with("policy,M1,M2,M3,M4,M5,M6,M7,M8,M9,M10\n"));
}

#[test]
fn ingest_builds_a_dataset_the_pipeline_accepts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut m = String::from("patient_id,time_minutes,feature,value\n");
    let mut o = String::from("patient_id,label,age\n");
    for p in 0..30 {
        let sick = p % 3 == 0;
        o.push_str(&format!("p{p},{},{}\n", u8::from(sick), 40 + p));
        for t in (0..1400).step_by(90) {
            let v = if sick && t < 300 { 2.0 } else { -0.5 } + (p as f64) / 100.0;
            m.push_str(&format!("p{p},{t},hr,{v}\np{p},{},lactate,{}\n", t + 7, v / 2.0));
        }
    }
    // One short patient gets excluded.
    o.push_str("short,0,50\n");
    m.push_str("short,10,hr,1\nshort,20,hr,1\n");
    fs::write(d.join("m.csv"), m).unwrap();
    fs::write(d.join("o.csv"), o).unwrap();
    let mpath = format!("io.measurements=\"{}\"", d.join("m.csv").display());
    let opath = format!("io.outcomes=\"{}\"", d.join("o.csv").display());
    let stdout = ok(
        d,
        &[
            "ingest",
            &mpath,
            &opath,
            r#"io.schema.features=["hr","lactate"]"#,
            r#"io.schema.statics=["age"]"#,
        ],
    );
    assert!(stdout.contains("ingested 30 patients, excluded 1"), "{stdout}");
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("ingest_report.json")).unwrap()).unwrap();
    assert_eq!(report["payload"]["excluded"][0]["patient_id"], "short");
    ok(
        d,
        &[
            "train-forecaster",
            "forecaster.kind=lstm",
            "forecaster.lstm.max_epochs=3",
            "forecaster.lstm.hidden=4",
        ],
    );
    ok(d, &["eval-forecaster", "forecaster.kind=lstm"]);
    let eval = fs::read_to_string(d.join("forecaster_eval.csv")).unwrap();
    assert!(eval.starts_with("forecaster,split,n,auc,aupr\nlstm,"), "{eval}");
}
