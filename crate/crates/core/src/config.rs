//! The experiment document: one JSON object with a section per stage.
//!
//! Every field has a default, unknown keys are rejected, and any field can be
//! replaced from the command line with a dotted path such as
//! `reward.lambda=0.01`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataio::EhrSchema;
use crate::error::{Error, Result};
use crate::eval::Pool;
use crate::forecast::{DesignedClassifier, LstmHyper, DEFAULT_IMPORTANCE};
use crate::oppe::OppeHyper;
use crate::replay::{GenerationConfig, PriorityConfig, RewardConfig};
use crate::sim::SimConfig;
use crate::trainer::{DqnHyper, OnlineConfig, SearchSpace};
use crate::util::config_hash;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub n_patients: usize,
    /// When set, `p01` is searched so this fraction of trajectories reach
    /// the terminal event.
    pub target_terminal_rate: Option<f64>,
    pub calibration_paths: usize,
    pub model: SimConfig,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            n_patients: 2000,
            target_terminal_rate: None,
            calibration_paths: 100_000,
            model: SimConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ForecasterKind {
    #[default]
    Designed,
    Lstm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecasterSection {
    pub kind: ForecasterKind,
    /// Per-feature weights of the designed classifier; the fixed weights
    /// when unset.
    pub importance: Option<Vec<f64>>,
    /// Feature groups scored as one signal by the designed classifier.
    pub groups: Vec<Vec<usize>>,
    pub lstm: LstmHyper,
}

impl Default for ForecasterSection {
    fn default() -> Self {
        Self {
            kind: ForecasterKind::Designed,
            importance: None,
            groups: Vec::new(),
            lstm: LstmHyper::default(),
        }
    }
}

impl ForecasterSection {
    pub fn designed(&self, decay: f64) -> Result<DesignedClassifier> {
        let importance = self.importance.clone().unwrap_or_else(|| DEFAULT_IMPORTANCE.to_vec());
        let model = DesignedClassifier::with_importance(importance, decay)?;
        if self.groups.is_empty() {
            Ok(model)
        } else {
            model.with_groups(self.groups.clone())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Fixed replay buffer built from logged data.
    #[default]
    Batch,
    /// ε-greedy interaction with the simulator.
    Online,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnSection {
    /// `hyper.lambda` is replaced by `reward.lambda` at training time.
    pub hyper: DqnHyper,
    pub priority: PriorityConfig,
    pub generation: GenerationConfig,
    pub mode: TrainingMode,
    pub online: OnlineConfig,
    pub search: SearchSpace,
    pub search_draws: usize,
}

impl Default for DqnSection {
    fn default() -> Self {
        Self {
            hyper: DqnHyper {
                steps: 20_000,
                sync_interval: 2_000,
                double: true,
                ..DqnHyper::default()
            },
            priority: PriorityConfig::default(),
            generation: GenerationConfig::default(),
            mode: TrainingMode::Batch,
            online: OnlineConfig::default(),
            search: SearchSpace::default(),
            search_draws: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Simulated trajectories per online rollout.
    pub n_rollouts: usize,
    /// Measurements per timepoint for the random baselines.
    pub random_x: Vec<f64>,
    pub random_pools: Vec<Pool>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_rollouts: 500,
            random_x: vec![1.0, 2.0, 5.0, 10.0],
            random_pools: vec![Pool::All, Pool::Informative],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    pub measurements: Option<String>,
    pub outcomes: Option<String>,
    pub schema: EhrSchema,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub sim: SimSection,
    pub forecaster: ForecasterSection,
    pub reward: RewardConfig,
    pub dqn: DqnSection,
    pub oppe: OppeHyper,
    pub eval: EvalSection,
    pub io: IoSection,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Applies `a.b.c=value` overrides. Values parse as JSON when they can
    /// and are taken as strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, path, value)?;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.model.validate()?;
        if let Some(r) = self.sim.target_terminal_rate {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config("target_terminal_rate must lie in (0, 1)".into()));
            }
        }
        self.forecaster.lstm.validate()?;
        self.reward.validate()?;
        self.dqn.hyper.validate()?;
        self.dqn.search.validate()?;
        self.oppe.validate()?;
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{} is not a section", keys[..i].join("."))))?;
        let slot = obj
            .get_mut(*key)
            .ok_or_else(|| Error::Config(format!("unknown config key {}", keys[..=i].join("."))))?;
        if i + 1 == keys.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(Error::Config("empty override path".into()))
}
