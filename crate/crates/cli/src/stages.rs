use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use measched::agent::GreedyPolicy;
use measched::data::Split;
use measched::dataio::{
    ingest_csv, load_dataset, load_experiences, load_json, read_csv_rows, save_dataset, save_experiences, save_json,
    write_action_frequency_csv, write_atomic, write_forecaster_eval_csv, write_frontier_csv, write_online_csv,
    write_oppe_csv, ArtifactMeta, ExperienceFile, ForecasterEvalRow, FrontierRow, OnlineRow, OppeRow,
};
use measched::eval::{online_rollout, pareto_frontier, random_policy, ActionFrequency, AlwaysStop, LoggedPolicy, MeasureAll};
use measched::nn::DuelingParams;
use measched::oppe::{evaluate_policy_offline, FitReport, OppeHyper};
use measched::pipeline::{build_forecaster, fit_phi, forecaster_metrics, oppe_summary, sim_of};
use measched::replay::{generate_experiences, reweight, PrioritizedBuffer};
use measched::trainer::{random_search, train_dqn_online, TrainLogRecord, ValidationSummary};
use measched::{
    Dataset, DqnHyper, Error, ExperimentConfig, Forecaster, ForecasterKind, PatientTrajectory, Policy, Pool,
    RandomPolicyConfig, Result, TrainedPolicy, TrainingMode, ValueEstimator,
};
use serde::{Deserialize, Serialize};

use crate::manifest::Manifest;

pub const DATASET: &str = "dataset.csv";
pub const DATASET_SIDECAR: &str = "dataset.json";
pub const INGEST_REPORT: &str = "ingest_report.json";
pub const FORECASTER: &str = "forecaster.json";
pub const FORECASTER_TRAIN: &str = "forecaster_train.json";
pub const FORECASTER_EVAL: &str = "forecaster_eval.csv";
pub const EXPERIENCES: &str = "experiences.json";
pub const POLICY: &str = "policy.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const SEARCH_POLICIES: &str = "search_policies.json";
pub const SEARCH_LOG: &str = "search_log.jsonl";
pub const PHI: &str = "phi.json";
pub const OPPE: &str = "oppe.csv";
pub const ONLINE: &str = "online.csv";
pub const ACTION_FREQUENCY: &str = "action_frequency.csv";
pub const FRONTIER: &str = "frontier.csv";
pub const REPORT: &str = "report.json";

/// Separates the simulator streams used for online evaluation from those
/// that generated the dataset.
const ONLINE_SEED_SALT: u64 = 0x6f6e_6c69_6e65;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhiArtifact {
    pub estimator: ValueEstimator,
    pub report: FitReport,
}

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub out: PathBuf,
    manifest: Manifest,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig, out: PathBuf) -> Result<Self> {
        fs::create_dir_all(&out)?;
        let manifest = Manifest::load_or_default(&out)?;
        Ok(Self {
            hash: cfg.hash(),
            cfg,
            out,
            manifest,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn meta(&self, kind: &str) -> ArtifactMeta {
        ArtifactMeta::new(kind, self.cfg.seed, &self.hash)
    }

    fn record(&mut self, name: &str, stage: &str, kind: &str) -> Result<()> {
        self.manifest
            .record(&self.out, name, stage, kind, self.cfg.seed, &self.hash)
    }

    fn save<T: Serialize>(&mut self, name: &str, stage: &str, kind: &str, payload: &T) -> Result<()> {
        save_json(&self.path(name), &self.meta(kind), payload)?;
        self.record(name, stage, kind)
    }

    fn write_lines(&mut self, name: &str, stage: &str, lines: &[String]) -> Result<()> {
        let mut text = String::new();
        for l in lines {
            text.push_str(l);
            text.push('\n');
        }
        write_atomic(&self.path(name), text.as_bytes())?;
        self.record(name, stage, "jsonl")
    }

    pub fn finish(&self) -> Result<()> {
        self.manifest.save(&self.out, self.cfg.seed, &self.hash)
    }

    fn dataset(&self) -> Result<Dataset> {
        load_dataset(&self.path(DATASET))
    }

    /// The saved forecaster, or the designed classifier built on the spot.
    fn forecaster(&self, ds: &Dataset) -> Result<Forecaster> {
        let path = self.path(FORECASTER);
        if path.exists() {
            return Ok(load_json::<Forecaster>(&path, "forecaster")?.1);
        }
        match self.cfg.forecaster.kind {
            ForecasterKind::Designed => Ok(build_forecaster(&self.cfg, ds)?.0),
            ForecasterKind::Lstm => Err(Error::MissingArtifact(path)),
        }
    }

    fn phi(&self) -> Result<ValueEstimator> {
        Ok(load_json::<PhiArtifact>(&self.path(PHI), "value_estimator")?.1.estimator)
    }

    fn phi_if_present(&self) -> Result<Option<ValueEstimator>> {
        if self.path(PHI).exists() {
            self.phi().map(Some)
        } else {
            Ok(None)
        }
    }

    /// DQN settings with the configured reward λ and the global seed.
    fn dqn_hyper(&self) -> DqnHyper {
        let mut h = self.cfg.dqn.hyper.clone();
        h.lambda = self.cfg.reward.lambda;
        h.seed = self.cfg.seed.wrapping_add(h.seed);
        h
    }

    fn oppe_hyper(&self) -> OppeHyper {
        let mut h = self.cfg.oppe.clone();
        h.seed = self.cfg.seed.wrapping_add(h.seed);
        h
    }
}

fn split_patients(ds: &Dataset, split: Split) -> Vec<PatientTrajectory> {
    ds.in_split(split).cloned().collect()
}

fn to_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("log records serialize")
}

pub fn simulate(ctx: &mut Ctx) -> Result<()> {
    let ds = measched::pipeline::simulate(&ctx.cfg)?;
    save_dataset(&ctx.path(DATASET), &ds)?;
    ctx.record(DATASET, "simulate", "dataset_csv")?;
    ctx.record(DATASET_SIDECAR, "simulate", "dataset")?;
    let terminal = ds.patients.iter().filter(|p| p.terminal_time.is_some()).count();
    println!("simulated {} trajectories, {terminal} reach the terminal event", ds.len());
    Ok(())
}

pub fn ingest(ctx: &mut Ctx) -> Result<()> {
    let io = &ctx.cfg.io;
    let m = io
        .measurements
        .as_deref()
        .ok_or_else(|| Error::Config("io.measurements is not set".into()))?;
    let o = io
        .outcomes
        .as_deref()
        .ok_or_else(|| Error::Config("io.outcomes is not set".into()))?;
    let mut schema = io.schema.clone();
    schema.seed = ctx.cfg.seed.wrapping_add(schema.seed);
    let (ds, report) = ingest_csv(Path::new(m), Path::new(o), &schema)?;
    save_dataset(&ctx.path(DATASET), &ds)?;
    ctx.record(DATASET, "ingest", "dataset_csv")?;
    ctx.record(DATASET_SIDECAR, "ingest", "dataset")?;
    ctx.save(INGEST_REPORT, "ingest", "ingest_report", &report)?;
    println!(
        "ingested {} patients, excluded {}, {} row errors",
        report.included,
        report.excluded.len(),
        report.row_errors.len()
    );
    Ok(())
}

pub fn train_forecaster(ctx: &mut Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let (model, report) = build_forecaster(&ctx.cfg, &ds)?;
    ctx.save(FORECASTER, "train-forecaster", "forecaster", &model)?;
    if let Some(r) = report {
        println!(
            "trained LSTM forecaster: {} epochs, best validation loss {:.5}",
            r.epochs, r.best_validation_loss
        );
        ctx.save(FORECASTER_TRAIN, "train-forecaster", "forecaster_train", &r)?;
    }
    Ok(())
}

pub fn eval_forecaster(ctx: &mut Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let model = ctx.forecaster(&ds)?;
    let name = match model {
        Forecaster::Designed(_) => "designed",
        Forecaster::Lstm(_) => "lstm",
    };
    let mut rows = Vec::new();
    for (split, label) in [(Split::Validation, "validation"), (Split::Test, "test")] {
        let patients: Vec<&PatientTrajectory> = ds.in_split(split).collect();
        if patients.is_empty() {
            continue;
        }
        let (auc, aupr) = match forecaster_metrics(&model, &patients) {
            Ok(m) => m,
            Err(Error::UndefinedMetric(_)) => (f64::NAN, f64::NAN),
            Err(e) => return Err(e),
        };
        println!("{label}: n={} auc={auc:.4} aupr={aupr:.4}", patients.len());
        rows.push(ForecasterEvalRow {
            forecaster: name.into(),
            split: label.into(),
            n: patients.len(),
            auc,
            aupr,
        });
    }
    write_forecaster_eval_csv(&ctx.path(FORECASTER_EVAL), &rows)?;
    ctx.record(FORECASTER_EVAL, "eval-forecaster", "forecaster_eval")
}

pub fn gen_experience(ctx: &mut Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let model = ctx.forecaster(&ds)?;
    let train = ds.subset(Split::Train);
    let cfg = &ctx.cfg;
    let experiences = generate_experiences(&model, &train, &cfg.reward, &cfg.dqn.generation, cfg.seed)?;
    println!("generated {} experiences from {} patients", experiences.len(), train.len());
    let file = ExperienceFile {
        reward: cfg.reward.clone(),
        generation: cfg.dqn.generation.clone(),
        experiences,
    };
    save_experiences(&ctx.path(EXPERIENCES), &ctx.meta("experiences"), &file)?;
    ctx.record(EXPERIENCES, "gen-experience", "experiences")
}

/// Experiences re-expressed for the configured λ.
fn load_training_experiences(ctx: &Ctx) -> Result<ExperienceFile> {
    let (_, mut file) = load_experiences(&ctx.path(EXPERIENCES))?;
    if file.reward.lambda != ctx.cfg.reward.lambda {
        reweight(&mut file.experiences, &file.reward, ctx.cfg.reward.lambda);
        file.reward.lambda = ctx.cfg.reward.lambda;
    }
    Ok(file)
}

pub fn train_dqn(ctx: &mut Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let model = ctx.forecaster(&ds)?;
    let hyper = ctx.dqn_hyper();
    let valid = split_patients(&ds, Split::Validation);
    let phi = ctx.phi_if_present()?.filter(|_| !valid.is_empty());
    let reward = ctx.cfg.reward.clone();
    let seed = ctx.cfg.seed;
    let mut lines = Vec::new();
    let mut log = |r: &TrainLogRecord| lines.push(to_line(r));
    let mut validator = phi.as_ref().map(|phi| {
        let (model, valid, reward) = (&model, &valid, &reward);
        move |net: &DuelingParams| {
            let policy = GreedyPolicy {
                net: net.clone(),
                label: "dqn".into(),
            };
            oppe_summary(phi, model, valid, &policy, reward, seed)
        }
    });
    let validator_ref = validator
        .as_mut()
        .map(|v| v as &mut dyn FnMut(&DuelingParams) -> Result<ValidationSummary>);
    let trained = match ctx.cfg.dqn.mode {
        TrainingMode::Batch => {
            let file = load_training_experiences(ctx)?;
            let mut buffer = PrioritizedBuffer::from_experiences(file.experiences, ctx.cfg.dqn.priority)?;
            measched::trainer::train_dqn(&mut buffer, &hyper, validator_ref, &mut log)?
        }
        TrainingMode::Online => {
            let sim = sim_of(&ds)?;
            train_dqn_online(
                sim,
                &model,
                &reward,
                &ctx.cfg.dqn.online,
                &hyper,
                ctx.cfg.dqn.priority,
                validator_ref,
                &mut log,
            )?
        }
    };
    if let Some(v) = trained.validation {
        println!(
            "best checkpoint at step {}: validation G {:.4}, relative cost {:.3}",
            v.step, v.gain, v.relative_cost
        );
    }
    ctx.save(POLICY, "train-dqn", "policy", &trained)?;
    ctx.write_lines(TRAIN_LOG, "train-dqn", &lines)
}

pub fn search(ctx: &mut Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let model = ctx.forecaster(&ds)?;
    let phi = ctx.phi()?;
    let valid = split_patients(&ds, Split::Validation);
    if valid.is_empty() {
        return Err(Error::EmptyInput("random search needs a validation split".into()));
    }
    let (_, file) = load_experiences(&ctx.path(EXPERIENCES))?;
    let reward = ctx.cfg.reward.clone();
    let seed = ctx.cfg.seed;
    let validator = |net: &DuelingParams| {
        let policy = GreedyPolicy {
            net: net.clone(),
            label: "search".into(),
        };
        oppe_summary(&phi, &model, &valid, &policy, &reward, seed)
    };
    let records: Mutex<Vec<(usize, String)>> = Mutex::new(Vec::new());
    let log = |draw: usize, r: &TrainLogRecord| {
        let mut line = serde_json::to_value(r).expect("log records serialize");
        line["draw"] = draw.into();
        records.lock().expect("log lock").push((draw, line.to_string()));
    };
    let policies = random_search(
        &ctx.cfg.dqn.search,
        ctx.cfg.dqn.search_draws,
        &ctx.dqn_hyper(),
        &file.experiences,
        &file.reward,
        ctx.cfg.dqn.priority,
        &validator,
        &log,
    )?;
    let mut records = records.into_inner().expect("log lock");
    // Draws log concurrently; a stable sort restores per-draw order.
    records.sort_by_key(|(d, _)| *d);
    let lines: Vec<String> = records.into_iter().map(|(_, l)| l).collect();
    for (i, p) in policies.iter().enumerate() {
        if let Some(v) = p.validation {
            println!(
                "search_{i:02}: lambda={} validation G {:.4}, relative cost {:.3}",
                p.hyper.lambda, v.gain, v.relative_cost
            );
        }
    }
    ctx.save(SEARCH_POLICIES, "search", "policy_set", &policies)?;
    ctx.write_lines(SEARCH_LOG, "search", &lines)
}

pub fn fit_oppe(ctx: &mut Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let model = ctx.forecaster(&ds)?;
    let (estimator, report) = fit_phi(&model, &ds, &ctx.oppe_hyper())?;
    println!(
        "fitted value estimator: {} epochs, held-out R² {:.4}",
        report.epochs, report.heldout_r2
    );
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    ctx.save(PHI, "fit-oppe", "value_estimator", &PhiArtifact { estimator, report })
}

struct Candidate {
    policy: Box<dyn Policy>,
    lambda: f64,
}

/// Baselines plus every trained policy present in the output directory.
fn candidates(ctx: &Ctx, ds: &Dataset, with_logged: bool) -> Result<Vec<Candidate>> {
    let lambda = ctx.cfg.reward.lambda;
    let k = ds.n_features();
    let mut out: Vec<Candidate> = vec![
        Candidate {
            policy: Box::new(AlwaysStop),
            lambda,
        },
        Candidate {
            policy: Box::new(MeasureAll),
            lambda,
        },
    ];
    if with_logged {
        out.push(Candidate {
            policy: Box::new(LoggedPolicy),
            lambda,
        });
    }
    let informative = sim_of(ds).ok().map(|s| s.informative.clone());
    for pool in &ctx.cfg.eval.random_pools {
        let Some(members) = (match pool {
            Pool::All => Some((0..k).collect::<Vec<_>>()),
            Pool::Informative => informative.clone(),
        }) else {
            continue;
        };
        for &x in &ctx.cfg.eval.random_x {
            if x > members.len() as f64 {
                continue;
            }
            let cfg = RandomPolicyConfig { x, pool: pool.clone() };
            out.push(Candidate {
                policy: Box::new(random_policy(&cfg, k, &members)?),
                lambda,
            });
        }
    }
    let policy_path = ctx.path(POLICY);
    if policy_path.exists() {
        let (_, p): (_, TrainedPolicy) = load_json(&policy_path, "policy")?;
        out.push(Candidate {
            lambda: p.hyper.lambda,
            policy: Box::new(GreedyPolicy {
                net: p.net,
                label: "dqn".into(),
            }),
        });
    }
    let search_path = ctx.path(SEARCH_POLICIES);
    if search_path.exists() {
        let (_, ps): (_, Vec<TrainedPolicy>) = load_json(&search_path, "policy_set")?;
        for (i, p) in ps.into_iter().enumerate() {
            out.push(Candidate {
                lambda: p.hyper.lambda,
                policy: Box::new(GreedyPolicy {
                    net: p.net,
                    label: format!("search_{i:02}"),
                }),
            });
        }
    }
    Ok(out)
}

pub fn eval_oppe(ctx: &mut Ctx) -> Result<()> {
    let phi = ctx.phi()?;
    let ds = ctx.dataset()?;
    let model = ctx.forecaster(&ds)?;
    let test = split_patients(&ds, Split::Test);
    if test.is_empty() {
        return Err(Error::EmptyInput("the test split is empty".into()));
    }
    let mut rows = Vec::new();
    for c in candidates(ctx, &ds, true)? {
        let r = evaluate_policy_offline(&phi, &model, &test, c.policy.as_ref(), &ctx.cfg.reward, ctx.cfg.seed)?;
        println!("{:<28} G={:>10.4} relative cost={:.3}", r.policy, r.gain, r.relative_cost);
        rows.push(OppeRow::new(&r, c.lambda));
    }
    write_oppe_csv(&ctx.path(OPPE), &rows)?;
    ctx.record(OPPE, "eval-oppe", "oppe")
}

pub fn eval_online(ctx: &mut Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let sim = sim_of(&ds)?.clone();
    let model = ctx.forecaster(&ds)?;
    let seed = ctx.cfg.seed ^ ONLINE_SEED_SALT;
    let mut rows = Vec::new();
    let mut freqs: Vec<ActionFrequency> = Vec::new();
    for c in candidates(ctx, &ds, false)? {
        let m = online_rollout(&sim, c.policy.as_ref(), &model, &ctx.cfg.reward, ctx.cfg.eval.n_rollouts, seed)?;
        println!(
            "{:<28} measurements/trajectory={:>7.2} disease gain={:.4} G_online={:.4}",
            m.policy, m.action_freq, m.disease_gain, m.g_online
        );
        rows.push(OnlineRow::new(&m, c.lambda));
        freqs.push(ActionFrequency::from(&m));
    }
    write_online_csv(&ctx.path(ONLINE), &rows)?;
    ctx.record(ONLINE, "eval-online", "online")?;
    write_action_frequency_csv(&ctx.path(ACTION_FREQUENCY), &freqs)?;
    ctx.record(ACTION_FREQUENCY, "eval-online", "action_frequency")
}

pub fn frontier(ctx: &mut Ctx) -> Result<()> {
    let rows: Vec<OppeRow> = read_csv_rows(&ctx.path(OPPE))?;
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.relative_cost, r.gain)).collect();
    let front = pareto_frontier(&points);
    let mut out: Vec<FrontierRow> = rows
        .iter()
        .map(|r| FrontierRow {
            policy_id: r.policy_id.clone(),
            lambda: r.lambda,
            relative_cost: r.relative_cost,
            gain: r.gain,
            on_frontier: front.contains(&(r.relative_cost, r.gain)),
        })
        .collect();
    out.sort_by(|a, b| {
        a.relative_cost
            .total_cmp(&b.relative_cost)
            .then(a.policy_id.cmp(&b.policy_id))
    });
    for r in out.iter().filter(|r| r.on_frontier) {
        println!("frontier: {:<28} relative cost={:.3} G={:.4}", r.policy_id, r.relative_cost, r.gain);
    }
    write_frontier_csv(&ctx.path(FRONTIER), &out)?;
    ctx.record(FRONTIER, "frontier", "frontier")
}

#[derive(Serialize)]
struct Report {
    artifacts: Manifest,
    forecaster: Option<Vec<ForecasterEvalRow>>,
    oppe: Option<Vec<OppeRow>>,
    online: Option<Vec<OnlineRow>>,
    frontier: Option<Vec<FrontierRow>>,
}

fn optional_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<Vec<T>>> {
    if path.exists() {
        read_csv_rows(path).map(Some)
    } else {
        Ok(None)
    }
}

pub fn report(ctx: &mut Ctx) -> Result<()> {
    let report = Report {
        artifacts: ctx.manifest.clone(),
        forecaster: optional_rows(&ctx.path(FORECASTER_EVAL))?,
        oppe: optional_rows(&ctx.path(OPPE))?,
        online: optional_rows(&ctx.path(ONLINE))?,
        frontier: optional_rows(&ctx.path(FRONTIER))?,
    };
    println!("{} artifacts in {}", report.artifacts.artifacts.len(), ctx.out.display());
    for (name, e) in &report.artifacts.artifacts {
        println!("  {name:<24} {:<18} {}", e.stage, &e.sha256[..12]);
    }
    if let Some(front) = &report.frontier {
        let n = front.iter().filter(|r| r.on_frontier).count();
        println!("{} policies evaluated, {n} on the frontier", front.len());
    }
    ctx.save(REPORT, "report", "report", &report)
}
