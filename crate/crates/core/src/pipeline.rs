//! Stage helpers shared by the command-line tool and the experiment suites.

use rayon::prelude::*;

use crate::agent::Policy;
use crate::config::{ExperimentConfig, ForecasterKind};
use crate::data::{Dataset, PatientTrajectory, Provenance, Split};
use crate::error::{Error, Result};
use crate::forecast::{auc, aupr, query, train_lstm, ForecastModel, Forecaster, History, LstmTrainReport};
use crate::oppe::{build_regression_pairs, evaluate_policy_offline, fit_value_estimator, FitReport, ValueEstimator};
use crate::replay::RewardConfig;
use crate::sim::{calibrate_transitions, gen_dataset, SimConfig};
use crate::trainer::ValidationSummary;

/// The simulator settings after optional calibration of the transitions.
pub fn resolve_sim(cfg: &ExperimentConfig) -> Result<SimConfig> {
    let mut sim = cfg.sim.model.clone();
    if let Some(rate) = cfg.sim.target_terminal_rate {
        sim.transition = calibrate_transitions(&sim, rate, cfg.sim.calibration_paths, cfg.seed)?;
    }
    sim.validate()?;
    Ok(sim)
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<Dataset> {
    gen_dataset(&resolve_sim(cfg)?, cfg.sim.n_patients, cfg.seed)
}

/// The generating simulator of a simulated dataset.
pub fn sim_of(dataset: &Dataset) -> Result<&SimConfig> {
    match &dataset.provenance {
        Provenance::Simulation(s) => Ok(s),
        Provenance::Ingested { .. } => Err(Error::Config("this stage needs a simulated dataset".into())),
    }
}

/// The configured forecaster for `dataset`: the designed classifier, or an
/// LSTM trained on the dataset's training split.
pub fn build_forecaster(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<(Forecaster, Option<LstmTrainReport>)> {
    match cfg.forecaster.kind {
        ForecasterKind::Designed => {
            let decay = sim_of(dataset).map_or(cfg.sim.model.decay, |s| s.decay);
            let model = cfg.forecaster.designed(decay)?;
            if model.n_features() != dataset.n_features() {
                return Err(Error::Shape(format!(
                    "designed classifier weights {} features, dataset has {}",
                    model.n_features(),
                    dataset.n_features()
                )));
            }
            Ok((Forecaster::Designed(model), None))
        }
        ForecasterKind::Lstm => {
            let (model, report) = train_lstm(dataset, &cfg.forecaster.lstm, cfg.seed)?;
            Ok((Forecaster::Lstm(model), Some(report)))
        }
    }
}

/// Final-slot predicted probability for every patient in `patients`.
pub fn final_predictions(model: &dyn ForecastModel, patients: &[&PatientTrajectory]) -> Vec<f64> {
    patients
        .par_iter()
        .map(|p| {
            let history = History {
                slots: (0..p.len()).map(|t| p.slot(t)).collect(),
                statics: p.statics.clone(),
            };
            query(model, &history, p.len().saturating_sub(1)).prob
        })
        .collect()
}

/// AUC and AUPR of final-slot predictions against trajectory labels.
pub fn forecaster_metrics(model: &dyn ForecastModel, patients: &[&PatientTrajectory]) -> Result<(f64, f64)> {
    let scores = final_predictions(model, patients);
    let labels: Vec<bool> = patients.iter().map(|p| p.label).collect();
    Ok((auc(&scores, &labels)?, aupr(&scores, &labels)?))
}

/// φ fitted on the regression pairs of the training split.
pub fn fit_phi(
    model: &dyn ForecastModel,
    dataset: &Dataset,
    hyper: &crate::oppe::OppeHyper,
) -> Result<(ValueEstimator, FitReport)> {
    let train: Vec<PatientTrajectory> = dataset.in_split(Split::Train).cloned().collect();
    fit_value_estimator(&build_regression_pairs(model, &train), hyper)
}

/// Per-patient OPPE gain and cost of `policy`, for checkpoint selection.
pub fn oppe_summary(
    phi: &ValueEstimator,
    model: &dyn ForecastModel,
    patients: &[PatientTrajectory],
    policy: &dyn Policy,
    reward: &RewardConfig,
    seed: u64,
) -> Result<ValidationSummary> {
    let r = evaluate_policy_offline(phi, model, patients, policy, reward, seed)?;
    Ok(ValidationSummary {
        step: 0,
        gain: r.mean_gain(),
        total_cost: r.mean_cost(),
        relative_cost: r.relative_cost,
    })
}
