//! Regression-based off-policy evaluation: a network φ predicts the
//! probability change from `(h_t, action set)` on logged data and scores any
//! policy by replaying its choices through φ.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{ActionSet, DecisionContext, Policy};
use crate::data::{PatientTrajectory, Slot};
use crate::error::{Error, Result};
use crate::forecast::ForecastModel;
use crate::nn::{Activation, AdamState, Dropout, Mlp, Tensor2};
use crate::replay::{info_gain, RewardConfig};
use crate::sim::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OppeHyper {
    pub layers: usize,
    pub width: usize,
    pub lr: f64,
    pub l2: f64,
    pub keep: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for OppeHyper {
    fn default() -> Self {
        Self {
            layers: 1,
            width: 64,
            lr: 1e-3,
            l2: 1e-4,
            keep: 0.7,
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            seed: 0,
        }
    }
}

impl OppeHyper {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("OPPE width, batch size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0) || self.l2 < 0.0 || !(self.keep > 0.0 && self.keep <= 1.0) {
            return Err(Error::Config("invalid OPPE learning rate, L2 or keep probability".into()));
        }
        Ok(())
    }
}

/// One regression example: `h_t` with the logged action set, and the
/// probability change to the next timepoint.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionPair {
    pub hidden: Vec<f64>,
    pub actions: ActionSet,
    pub target: f64,
    pub label: bool,
    pub patient: usize,
    pub t: usize,
}

impl RegressionPair {
    /// `[h_t, multi-hot]`, Ω slot included.
    pub fn input(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.hidden.len() + self.actions.n_actions());
        x.extend_from_slice(&self.hidden);
        x.extend(self.actions.multi_hot());
        x
    }
}

/// φ: the fitted regressor with its input layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimator {
    pub net: Mlp,
    pub hidden_dim: usize,
    pub n_features: usize,
    pub hyper: OppeHyper,
}

impl ValueEstimator {
    pub fn predict(&self, h: &[f64], actions: &ActionSet) -> Result<f64> {
        if h.len() != self.hidden_dim || actions.n_features() != self.n_features {
            return Err(Error::Shape(format!(
                "estimator expects h[{}] and {} measurements, got h[{}] and {}",
                self.hidden_dim,
                self.n_features,
                h.len(),
                actions.n_features()
            )));
        }
        let mut x = h.to_vec();
        x.extend(actions.multi_hot());
        Ok(self.net.forward(&x)?[0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: usize,
    pub best_epoch: usize,
    pub heldout_mse: f64,
    /// `1 − MSE / Var` on the held-out fifth; NaN for constant targets.
    pub heldout_r2: f64,
    pub warnings: Vec<String>,
}

/// `h_t` and the logged action set for `t = 0..T-1`, paired with
/// `p(q_t, t+1) − p(q_{t-1}, t)`.
pub fn patient_pairs(model: &dyn ForecastModel, patient: &PatientTrajectory, index: usize) -> Vec<RegressionPair> {
    let k = patient.n_features();
    let empty = Slot::empty(k);
    let mut carry = model.initial(&patient.statics);
    let mut cur = model.peek(&carry, &empty);
    let mut out = Vec::with_capacity(patient.len().saturating_sub(1));
    for t in 0..patient.len().saturating_sub(1) {
        let actions = ActionSet::closed(k, patient.observed_at(t)).expect("observed indices in range");
        carry = model.advance(&carry, &patient.slot(t));
        let next = model.peek(&carry, &empty);
        out.push(RegressionPair {
            hidden: std::mem::take(&mut cur.hidden),
            actions,
            target: next.prob - cur.prob,
            label: patient.label,
            patient: index,
            t,
        });
        cur = next;
    }
    out
}

pub fn build_regression_pairs(model: &dyn ForecastModel, patients: &[PatientTrajectory]) -> Vec<RegressionPair> {
    let per: Vec<Vec<RegressionPair>> = patients
        .par_iter()
        .enumerate()
        .map(|(i, p)| patient_pairs(model, p, i))
        .collect();
    per.into_iter().flatten().collect()
}

fn inputs(pairs: &[&RegressionPair]) -> Result<Tensor2> {
    let rows: Vec<Vec<f64>> = pairs.iter().map(|p| p.input()).collect();
    Tensor2::from_rows(&rows)
}

fn mse(net: &Mlp, pairs: &[&RegressionPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let pred = net.forward_batch(&inputs(pairs)?)?;
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (pred.get(i, 0) - p.target).powi(2))
        .sum::<f64>()
        / pairs.len() as f64)
}

fn variance(pairs: &[&RegressionPair]) -> f64 {
    let n = pairs.len().max(1) as f64;
    let mean = pairs.iter().map(|p| p.target).sum::<f64>() / n;
    pairs.iter().map(|p| (p.target - mean).powi(2)).sum::<f64>() / n
}

/// Squared-error regression with Adam, early-stopped on a held-out fifth.
pub fn fit_value_estimator(pairs: &[RegressionPair], hyper: &OppeHyper) -> Result<(ValueEstimator, FitReport)> {
    hyper.validate()?;
    if pairs.len() < 2 {
        return Err(Error::EmptyInput("OPPE fitting needs at least two pairs".into()));
    }
    let (hidden_dim, n_features) = (pairs[0].hidden.len(), pairs[0].actions.n_features());
    if pairs
        .iter()
        .any(|p| p.hidden.len() != hidden_dim || p.actions.n_features() != n_features)
    {
        return Err(Error::Shape("regression inputs differ in layout".into()));
    }
    let mut warnings = Vec::new();
    if pairs
        .iter()
        .all(|p| p.hidden == pairs[0].hidden && p.actions == pairs[0].actions)
    {
        warnings.push("all regression inputs are identical; the fit can only learn a constant".to_string());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let n_held = (pairs.len() / 5).max(1);
    let held: Vec<&RegressionPair> = order[..n_held].iter().map(|&i| &pairs[i]).collect();
    let mut train: Vec<&RegressionPair> = order[n_held..].iter().map(|&i| &pairs[i]).collect();
    let dim = hidden_dim + n_features + 1;
    let mut net = Mlp::with_hidden(dim, hyper.layers, hyper.width, 1, Activation::Identity, &mut rng);
    // Start from the zero predictor: probability changes are centred near 0.
    let out = net.layers.last_mut().expect("at least one layer");
    out.weight.data_mut().fill(0.0);
    out.bias.fill(0.0);
    let mut opt = AdamState::new(&net, hyper.lr, hyper.l2);
    let mut best = (net.clone(), mse(&net, &held)?, 0usize);
    let mut epochs = 0;
    for epoch in 1..=hyper.max_epochs {
        epochs = epoch;
        train.shuffle(&mut rng);
        for batch in train.chunks(hyper.batch_size) {
            let x = inputs(batch)?;
            let mut dropout = Dropout {
                keep: hyper.keep,
                rng: &mut rng,
            };
            let (pred, cache) = net.forward_cached(&x, (hyper.keep < 1.0).then_some(&mut dropout), false)?;
            let n = batch.len() as f64;
            let mut grad = Tensor2::zeros(batch.len(), 1);
            for (r, p) in batch.iter().enumerate() {
                grad.set(r, 0, 2.0 * (pred.get(r, 0) - p.target) / n);
            }
            let (grads, _) = net.backward(&cache, &grad)?;
            opt.step(&mut net, &grads)?;
        }
        let loss = mse(&net, &held)?;
        if loss < best.1 {
            best = (net.clone(), loss, epoch);
        } else if epoch - best.2 >= hyper.patience {
            break;
        }
    }
    let var = variance(&held);
    let r2 = if var > 0.0 { 1.0 - best.1 / var } else { f64::NAN };
    Ok((
        ValueEstimator {
            net: best.0,
            hidden_dim,
            n_features,
            hyper: hyper.clone(),
        },
        FitReport {
            epochs,
            best_epoch: best.2,
            heldout_mse: best.1,
            heldout_r2: r2,
            warnings,
        },
    ))
}

/// Off-policy estimate for one policy over a set of patients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OppeReport {
    pub policy: String,
    pub n_patients: usize,
    /// Σ over patients and timepoints of `γ^t · g(φ(h_t, a_t), label)`.
    pub gain: f64,
    /// Σ of measurement costs of the chosen actions.
    pub total_cost: f64,
    /// `total_cost` over the cost of measuring everything on the same grid.
    pub relative_cost: f64,
}

impl OppeReport {
    pub fn mean_gain(&self) -> f64 {
        self.gain / self.n_patients.max(1) as f64
    }

    pub fn mean_cost(&self) -> f64 {
        self.total_cost / self.n_patients.max(1) as f64
    }
}

struct PatientScore {
    gain: f64,
    cost: f64,
    full_cost: f64,
}

/// Replays `policy` over every evaluation timepoint (`t = 0..T-1`, matching
/// the regression pairs) and accumulates φ's label-signed estimate.
pub fn evaluate_policy_offline(
    phi: &ValueEstimator,
    model: &dyn ForecastModel,
    patients: &[PatientTrajectory],
    policy: &dyn Policy,
    reward: &RewardConfig,
    seed: u64,
) -> Result<OppeReport> {
    if model.hidden_dim() != phi.hidden_dim || model.n_features() != phi.n_features {
        return Err(Error::Shape("estimator and forecaster layouts differ".into()));
    }
    let gamma = reward.gamma;
    let scores = patients
        .par_iter()
        .enumerate()
        .map(|(i, p)| -> Result<PatientScore> {
            let mut rng = stream_rng(seed, i as u64);
            let k = p.n_features();
            let all = ActionSet::closed(k, 0..k)?;
            let mut s = PatientScore {
                gain: 0.0,
                cost: 0.0,
                full_cost: 0.0,
            };
            let mut discount = 1.0;
            for pair in patient_pairs(model, p, i) {
                let ctx = DecisionContext {
                    hidden: &pair.hidden,
                    n_features: k,
                    logged: Some(&pair.actions),
                };
                let chosen = policy.choose(&ctx, &mut rng)?;
                s.gain += discount * info_gain(phi.predict(&pair.hidden, &chosen)?, p.label);
                s.cost += reward.set_cost(&chosen);
                s.full_cost += reward.set_cost(&all);
                discount *= gamma;
            }
            Ok(s)
        })
        .collect::<Result<Vec<PatientScore>>>()?;
    let gain = scores.iter().map(|s| s.gain).sum();
    let total_cost: f64 = scores.iter().map(|s| s.cost).sum();
    let full: f64 = scores.iter().map(|s| s.full_cost).sum();
    Ok(OppeReport {
        policy: policy.name(),
        n_patients: patients.len(),
        gain,
        total_cost,
        relative_cost: if full > 0.0 { total_cost / full } else { 0.0 },
    })
}

/// Σ `γ^t · g(ΔP_t, label)` of the logged trajectories themselves.
pub fn logged_gain(pairs: &[RegressionPair], gamma: f64) -> f64 {
    pairs
        .iter()
        .map(|p| gamma.powi(p.t as i32) * info_gain(p.target, p.label))
        .sum()
}

#[cfg(test)]
mod tests {
    use rand::RngCore;

    use super::*;
    use crate::forecast::{designed_predict, DesignedClassifier};
    use crate::nn::DenseParams;

    fn patient(obs: &[(usize, usize, f64)], len: usize, label: bool) -> PatientTrajectory {
        let mut values = vec![vec![0.0; 10]; len];
        let mut observed = vec![vec![false; 10]; len];
        for &(t, k, v) in obs {
            values[t][k] = v;
            observed[t][k] = true;
        }
        PatientTrajectory {
            id: "p".into(),
            values,
            observed,
            states: None,
            terminal_time: None,
            label,
            statics: vec![],
        }
    }

    struct AlwaysStop;

    impl Policy for AlwaysStop {
        fn name(&self) -> String {
            "stop".into()
        }
        fn choose(&self, ctx: &DecisionContext<'_>, _: &mut dyn RngCore) -> Result<ActionSet> {
            ActionSet::closed(ctx.n_features, [])
        }
    }

    fn constant_phi(c: f64, hidden_dim: usize, k: usize) -> ValueEstimator {
        let w = Tensor2::zeros(1, hidden_dim + k + 1);
        ValueEstimator {
            net: Mlp::new(vec![DenseParams::new(w, vec![c], Activation::Identity).unwrap()]).unwrap(),
            hidden_dim,
            n_features: k,
            hyper: OppeHyper::default(),
        }
    }

    #[test]
    fn pair_layout_and_count() {
        let model = DesignedClassifier::new(0.9).unwrap();
        let ps = vec![patient(&[(0, 4, 1.0)], 4, true), patient(&[], 3, false), patient(&[], 1, true)];
        let pairs = build_regression_pairs(&model, &ps);
        assert_eq!(pairs.len(), 3 + 2);
        let empty = &pairs[1];
        assert_eq!(empty.actions.multi_hot(), {
            let mut v = vec![0.0; 11];
            v[10] = 1.0;
            v
        });
        assert_eq!(pairs[0].input().len(), 50 + 11);
        assert_eq!(pairs[0].actions, ActionSet::closed(10, [4]).unwrap());
    }

    #[test]
    fn targets_match_direct_formula() {
        let model = DesignedClassifier::new(0.9).unwrap();
        let p = patient(&[(0, 4, 1.0), (0, 1, -1.0), (1, 2, 1.0), (2, 0, 1.0)], 4, true);
        let pairs = patient_pairs(&model, &p, 0);
        let window_at = |x: usize, upto: usize| {
            let mut w = vec![vec![0.0; 10]; 5];
            for t in 0..=x {
                if t < upto && x - t < 5 {
                    for k in 0..10 {
                        w[4 - (x - t)][k] = p.values[t][k];
                    }
                }
            }
            designed_predict(&w, 0.9).unwrap()
        };
        for pair in &pairs {
            let t = pair.t;
            let want = window_at(t + 1, t + 1) - window_at(t, t);
            assert!((pair.target - want).abs() < 1e-15);
        }
    }

    #[test]
    fn stub_estimator_hand_traces() {
        let model = DesignedClassifier::new(0.9).unwrap();
        let phi = constant_phi(0.1, 50, 10);
        let one = vec![patient(&[], 2, true)];
        let r = evaluate_policy_offline(&phi, &model, &one, &AlwaysStop, &RewardConfig::default(), 0).unwrap();
        assert!((r.gain - 0.1).abs() < 1e-15);
        assert_eq!(r.total_cost, 0.0);
        let long = vec![patient(&[], 6, false)];
        let g0 = RewardConfig {
            gamma: 0.0,
            ..RewardConfig::default()
        };
        let r = evaluate_policy_offline(&phi, &model, &long, &AlwaysStop, &g0, 0).unwrap();
        assert!((r.gain + 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_targets_fit_to_zero() {
        let model = DesignedClassifier::new(0.9).unwrap();
        let ps: Vec<PatientTrajectory> = (0..400).map(|i| patient(&[(0, 7, i as f64 / 400.0)], 5, i % 2 == 0)).collect();
        let pairs: Vec<RegressionPair> = build_regression_pairs(&model, &ps)
            .into_iter()
            .map(|p| RegressionPair { target: 0.0, ..p })
            .collect();
        let (phi, report) = fit_value_estimator(&pairs, &OppeHyper::default()).unwrap();
        for p in &pairs {
            let v = phi.predict(&p.hidden, &p.actions).unwrap();
            assert!(v.abs() < 1e-3, "{v} after {} epochs", report.epochs);
        }
        assert!(report.heldout_r2.is_nan());
    }

    #[test]
    fn linear_targets_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        use rand::Rng;
        let pairs: Vec<RegressionPair> = (0..2000)
            .map(|i| {
                let hidden: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let actions = ActionSet::closed(3, (0..3).filter(|_| rng.random::<bool>())).unwrap();
                let m = actions.multi_hot();
                let target = 0.3 * hidden[0] - 0.2 * hidden[2] + 0.1 * m[1] - 0.05 * m[2] + 0.02;
                RegressionPair {
                    hidden,
                    actions,
                    target,
                    label: true,
                    patient: i,
                    t: 0,
                }
            })
            .collect();
        let hyper = OppeHyper {
            keep: 1.0,
            l2: 0.0,
            ..OppeHyper::default()
        };
        let (_, report) = fit_value_estimator(&pairs, &hyper).unwrap();
        assert!(report.heldout_r2 >= 0.99, "R² = {}", report.heldout_r2);
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let model = DesignedClassifier::new(0.9).unwrap();
        let phi = constant_phi(0.0, 20, 10);
        let r = evaluate_policy_offline(&phi, &model, &[], &AlwaysStop, &RewardConfig::default(), 0);
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
