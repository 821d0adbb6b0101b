//! Measurement scheduling with a sequential dueling DQN.
//!
//! An event forecaster turns revealed measurements into probability changes;
//! those changes, signed by the outcome label and net of measurement cost,
//! are the rewards a dueling Q network learns from. Regression-based
//! off-policy evaluation scores any policy on logged data, and a two-state
//! Markov simulator provides cohorts with known ground truth.

pub mod agent;
pub mod config;
pub mod data;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod forecast;
pub mod nn;
pub mod oppe;
pub mod pipeline;
pub mod replay;
pub mod sim;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};

pub use agent::{run_policy, ActionIndex, ActionSet, DecisionContext, GreedyPolicy, Policy, QFunction};
pub use config::{ExperimentConfig, ForecasterKind, TrainingMode};
pub use data::{Dataset, PatientTrajectory, Slot, Split};
pub use dataio::ArtifactMeta;
pub use eval::{OnlineMetrics, Pool, RandomPolicyConfig};
pub use forecast::{DesignedClassifier, ForecastModel, Forecaster, LstmForecaster};
pub use oppe::{OppeReport, ValueEstimator};
pub use replay::{Experience, PrioritizedBuffer, RewardConfig};
pub use sim::SimConfig;
pub use trainer::{DqnHyper, TrainedPolicy};
