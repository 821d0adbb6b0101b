//! Q-learning on generated experience: masked Bellman targets, a hard-synced
//! target network, random search over the architecture grid, the
//! independent-DQN baseline and an online ε-greedy variant.

mod independent;
mod online;
mod search;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{masked_argmax, masked_max, q_values, QFunction};
use crate::error::{Error, Result};
use crate::nn::{clip_global_norm, AdamState, Dropout, DuelingArch, DuelingParams, Tensor2};
use crate::replay::{Experience, PrioritizedBuffer};

pub use independent::{independent_target, train_independent_dqn, IndependentPolicy, TrainedIndependent};
pub use online::{train_dqn_online, EpsilonSchedule, OnlineConfig};
pub use search::{random_search, SearchSpace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnHyper {
    pub representation_layers: usize,
    pub dueling_layers: usize,
    pub width: usize,
    pub lr: f64,
    pub l2: f64,
    /// Dropout keep probability on hidden layers.
    pub keep: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub sync_interval: usize,
    pub steps: usize,
    pub eval_interval: usize,
    pub grad_clip: f64,
    /// Choose the bootstrap action with the online network and value it
    /// with the target network.
    pub double: bool,
    pub seed: u64,
}

impl Default for DqnHyper {
    fn default() -> Self {
        Self {
            representation_layers: 2,
            dueling_layers: 2,
            width: 64,
            lr: 5e-4,
            l2: 1e-4,
            keep: 1.0,
            batch_size: 64,
            lambda: 1e-3,
            sync_interval: 500,
            steps: 50_000,
            eval_interval: 2_000,
            grad_clip: 10.0,
            double: false,
            seed: 0,
        }
    }
}

impl DqnHyper {
    pub fn arch(&self) -> DuelingArch {
        DuelingArch {
            representation_layers: self.representation_layers,
            dueling_layers: self.dueling_layers,
            width: self.width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.representation_layers == 0 || self.dueling_layers == 0 || self.width == 0 {
            return Err(Error::Config("layer counts and width must be positive".into()));
        }
        if self.batch_size == 0 || self.sync_interval == 0 {
            return Err(Error::Config("batch size and sync interval must be positive".into()));
        }
        if !(self.lr > 0.0) || self.l2 < 0.0 || !(self.keep > 0.0 && self.keep <= 1.0) {
            return Err(Error::Config("invalid learning rate, L2 or keep probability".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        Ok(())
    }
}

/// Validation score of a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub step: usize,
    /// Estimated cumulative information gain per patient.
    pub gain: f64,
    /// Measurement cost per patient.
    pub total_cost: f64,
    pub relative_cost: f64,
}

impl ValidationSummary {
    /// The training objective at cost coefficient `lambda`.
    pub fn objective(&self, lambda: f64) -> f64 {
        self.gain - lambda * self.total_cost
    }
}

/// One line of the training progress log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub loss: f64,
    pub validation_gain: Option<f64>,
    pub relative_cost: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedPolicy {
    pub net: DuelingParams,
    pub hyper: DqnHyper,
    pub validation: Option<ValidationSummary>,
}

/// `r + γ_e · max_{a' ∉ m'} Q_target([h', m'], a')`, or `r` when terminal.
pub fn bellman_target(e: &Experience, target: &dyn QFunction) -> Result<f64> {
    if e.terminal || e.gamma == 0.0 {
        return Ok(e.reward);
    }
    assert!(!e.m_next.is_full(), "next action set closes every action");
    let q = q_values(target, &e.h_next, &e.m_next)?;
    Ok(e.reward + e.gamma * masked_max(&q, &e.m_next).expect("an untaken action remains"))
}

/// Double-estimator variant of [`bellman_target`]: the untaken action that
/// `online` ranks highest, valued by `target`.
pub fn double_target(e: &Experience, online: &dyn QFunction, target: &dyn QFunction) -> Result<f64> {
    if e.terminal || e.gamma == 0.0 {
        return Ok(e.reward);
    }
    assert!(!e.m_next.is_full(), "next action set closes every action");
    let pick = masked_argmax(&q_values(online, &e.h_next, &e.m_next)?, &e.m_next).expect("an untaken action remains");
    Ok(e.reward + e.gamma * q_values(target, &e.h_next, &e.m_next)?[pick])
}

/// Result of one gradient step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Importance-weighted mean squared TD error.
    pub loss: f64,
    pub td_errors: Vec<f64>,
}

fn state_batch(batch: &[&Experience]) -> Result<Tensor2> {
    let rows: Vec<Vec<f64>> = batch
        .iter()
        .map(|e| crate::agent::assemble_state(&e.h, &e.m))
        .collect();
    Tensor2::from_rows(&rows)
}

/// Gradient of the importance-weighted squared TD loss for precomputed
/// `targets`; `None` when every weight is zero.
pub fn td_gradient(
    net: &DuelingParams,
    batch: &[&Experience],
    targets: &[f64],
    weights: &[f64],
    keep: f64,
    rng: &mut dyn RngCore,
) -> Result<(StepOutcome, DuelingParams)> {
    if batch.is_empty() || batch.len() != targets.len() || batch.len() != weights.len() {
        return Err(Error::Shape("batch, targets and weights must be non-empty and equal length".into()));
    }
    let x = state_batch(batch)?;
    let mut dropout = Dropout { keep, rng };
    let (q, cache) = net.forward_cached(&x, (keep < 1.0).then_some(&mut dropout))?;
    let n = batch.len() as f64;
    let mut dq = Tensor2::zeros(q.rows(), q.cols());
    let mut td_errors = Vec::with_capacity(batch.len());
    let mut loss = 0.0;
    for (i, e) in batch.iter().enumerate() {
        let td = q.get(i, e.action) - targets[i];
        loss += weights[i] * td * td / n;
        dq.set(i, e.action, 2.0 * weights[i] * td / n);
        td_errors.push(td);
    }
    let grads = net.backward(&cache, &dq)?;
    Ok((StepOutcome { loss, td_errors }, grads))
}

/// Sampled-batch update: targets from `target`, one clipped Adam step on
/// `net`. A batch whose weights are all zero leaves `net` untouched.
pub fn train_step(
    net: &mut DuelingParams,
    target: &DuelingParams,
    opt: &mut AdamState,
    batch: &[&Experience],
    weights: &[f64],
    hyper: &DqnHyper,
    rng: &mut dyn RngCore,
) -> Result<StepOutcome> {
    let targets = batch
        .iter()
        .map(|e| {
            if hyper.double {
                double_target(e, &*net, target)
            } else {
                bellman_target(e, target)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let (outcome, mut grads) = td_gradient(net, batch, &targets, weights, hyper.keep, rng)?;
    if weights.iter().all(|w| *w == 0.0) {
        return Ok(outcome);
    }
    clip_global_norm(&mut grads, hyper.grad_clip);
    opt.step(net, &grads)?;
    Ok(outcome)
}

fn experience_dims(buffer: &PrioritizedBuffer) -> Result<(usize, usize)> {
    if buffer.is_empty() {
        return Err(Error::State("cannot train on an empty buffer".into()));
    }
    let e = buffer.get(0);
    Ok((e.h.len() + e.m.n_actions(), e.m.n_actions()))
}

/// Shared loop: sample, step, update priorities, sync, validate.
pub(crate) struct Checkpointing<'a, 'v, 'l, N> {
    pub validator: Option<&'a mut (dyn FnMut(&N) -> Result<ValidationSummary> + 'v)>,
    pub log: &'a mut (dyn FnMut(&TrainLogRecord) + 'l),
    pub best: Option<(N, ValidationSummary)>,
    pub lambda: f64,
}

impl<N: Clone> Checkpointing<'_, '_, '_, N> {
    pub fn evaluate(&mut self, net: &N, step: usize, loss: f64) -> Result<()> {
        let summary = match self.validator.as_mut() {
            Some(v) => Some(ValidationSummary { step, ..v(net)? }),
            None => None,
        };
        (self.log)(&TrainLogRecord {
            step,
            loss,
            validation_gain: summary.map(|s| s.gain),
            relative_cost: summary.map(|s| s.relative_cost),
        });
        if let Some(s) = summary {
            let better = match &self.best {
                None => true,
                Some((_, b)) => s.objective(self.lambda) > b.objective(self.lambda),
            };
            if better {
                self.best = Some((net.clone(), s));
            }
        }
        Ok(())
    }
}

/// Trains a dueling network on `buffer` for `hyper.steps` steps. With a
/// validator, snapshots are scored every `eval_interval` steps and the best
/// by `gain − λ·cost` is returned; otherwise the final network.
pub fn train_dqn(
    buffer: &mut PrioritizedBuffer,
    hyper: &DqnHyper,
    validator: Option<&mut dyn FnMut(&DuelingParams) -> Result<ValidationSummary>>,
    log: &mut dyn FnMut(&TrainLogRecord),
) -> Result<TrainedPolicy> {
    hyper.validate()?;
    let (input_dim, n_actions) = experience_dims(buffer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut net = DuelingParams::init(input_dim, n_actions, hyper.arch(), &mut rng);
    let mut target = net.clone();
    let mut opt = AdamState::new(&net, hyper.lr, hyper.l2);
    let mut ckpt = Checkpointing {
        validator,
        log,
        best: None,
        lambda: hyper.lambda,
    };
    let mut running = 0.0;
    for step in 1..=hyper.steps {
        let outcome = sample_and_step(buffer, &mut net, &target, &mut opt, hyper, &mut rng)?;
        running = if step == 1 { outcome.loss } else { 0.99 * running + 0.01 * outcome.loss };
        if step % hyper.sync_interval == 0 {
            target = net.clone();
        }
        if hyper.eval_interval > 0 && (step % hyper.eval_interval == 0 || step == hyper.steps) {
            ckpt.evaluate(&net, step, running)?;
        }
    }
    if hyper.steps == 0 || hyper.eval_interval == 0 {
        ckpt.evaluate(&net, hyper.steps, running)?;
    }
    let (net, validation) = match ckpt.best {
        Some((n, s)) => (n, Some(s)),
        None => (net, None),
    };
    Ok(TrainedPolicy {
        net,
        hyper: hyper.clone(),
        validation,
    })
}

pub(crate) fn sample_and_step(
    buffer: &mut PrioritizedBuffer,
    net: &mut DuelingParams,
    target: &DuelingParams,
    opt: &mut AdamState,
    hyper: &DqnHyper,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let sample = buffer.sample(hyper.batch_size, rng)?;
    let batch: Vec<&Experience> = sample.indices.iter().map(|&i| buffer.get(i)).collect();
    let outcome = train_step(net, target, opt, &batch, &sample.weights, hyper, rng)?;
    buffer.update(&sample.indices, &outcome.td_errors)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::nn::Parameters;
    use crate::agent::ActionSet;
    use crate::replay::PriorityConfig;

    struct Stub(Vec<f64>);

    impl QFunction for Stub {
        fn input_dim(&self) -> usize {
            1 + self.0.len()
        }
        fn n_actions(&self) -> usize {
            self.0.len()
        }
        fn q(&self, _: &[f64]) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    fn exp(m_next: ActionSet, reward: f64, gamma: f64, terminal: bool) -> Experience {
        let h: Arc<[f64]> = Arc::from(vec![0.3]);
        Experience {
            h: h.clone(),
            m: ActionSet::empty(m_next.n_features()),
            h_next: h,
            m_next,
            action: 0,
            reward,
            gamma,
            terminal,
        }
    }

    #[test]
    fn bellman_target_examples() {
        let stub = Stub(vec![5.0, 7.0, 1.0]);
        assert_eq!(bellman_target(&exp(ActionSet::empty(2), 0.4, 0.0, false), &stub).unwrap(), 0.4);
        assert_eq!(bellman_target(&exp(ActionSet::empty(2), 0.4, 0.9, true), &stub).unwrap(), 0.4);
        let all = ActionSet::from_indices(2, [0, 1]).unwrap();
        assert_eq!(bellman_target(&exp(all, 0.4, 1.0, false), &stub).unwrap(), 1.4);
        let one = ActionSet::from_indices(2, [1]).unwrap();
        assert_eq!(bellman_target(&exp(one, 0.0, 0.5, false), &stub).unwrap(), 2.5);
    }

    fn small_net(seed: u64) -> DuelingParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DuelingParams::init(
            4,
            3,
            DuelingArch {
                representation_layers: 1,
                dueling_layers: 2,
                width: 8,
            },
            &mut rng,
        )
    }

    #[test]
    fn zero_weight_batch_changes_nothing() {
        let mut net = small_net(1);
        let before = net.clone();
        let target = net.clone();
        let hyper = DqnHyper::default();
        let mut opt = AdamState::new(&net, 1e-2, 1e-2);
        let e = exp(ActionSet::empty(2), 1.0, 0.0, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train_step(&mut net, &target, &mut opt, &[&e, &e], &[0.0, 0.0], &hyper, &mut rng).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn duplicates_scale_the_gradient() {
        let net = small_net(2);
        let e = exp(ActionSet::empty(2), 1.0, 0.0, false);
        let f = Experience {
            action: 2,
            reward: -0.5,
            ..exp(ActionSet::empty(2), 0.0, 0.0, false)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, g3) = td_gradient(&net, &[&e, &e, &e, &f], &[1.0, 1.0, 1.0, -0.5], &[0.5; 4], 1.0, &mut rng).unwrap();
        let (_, g1) = td_gradient(&net, &[&e, &f], &[1.0, -0.5], &[1.5, 0.5], 1.0, &mut rng).unwrap();
        // Means over 4 and 2 items respectively.
        let mut g1 = g1;
        g1.scale(0.5);
        for (a, b) in g3.flatten().iter().zip(g1.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_rewards_regress_down() {
        let exps: Vec<Experience> = (0..20)
            .map(|i| Experience {
                action: i % 3,
                reward: (i % 3) as f64 * 0.5,
                ..exp(ActionSet::empty(2), 0.0, 0.0, false)
            })
            .collect();
        let mut buffer = PrioritizedBuffer::from_experiences(exps, PriorityConfig::default()).unwrap();
        let hyper = DqnHyper {
            representation_layers: 1,
            dueling_layers: 1,
            width: 16,
            lr: 1e-2,
            batch_size: 16,
            steps: 300,
            eval_interval: 0,
            ..DqnHyper::default()
        };
        let mut losses = Vec::new();
        let mut log = |r: &TrainLogRecord| losses.push(r.loss);
        let p = train_dqn(&mut buffer, &hyper, None, &mut log).unwrap();
        let q = q_values(&p.net, &[0.3], &ActionSet::empty(2)).unwrap();
        for (a, want) in [0.0, 0.5, 1.0].iter().enumerate() {
            assert!((q[a] - want).abs() < 0.05, "q = {q:?}");
        }
    }

    #[test]
    fn empty_buffer_is_a_state_error() {
        let mut buffer = PrioritizedBuffer::new(4, PriorityConfig::default()).unwrap();
        let mut log = |_: &TrainLogRecord| {};
        assert!(matches!(
            train_dqn(&mut buffer, &DqnHyper::default(), None, &mut log),
            Err(Error::State(_))
        ));
    }
}
