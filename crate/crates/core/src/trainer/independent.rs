use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Checkpointing, DqnHyper, StepOutcome, TrainLogRecord, ValidationSummary};
use crate::agent::{ActionSet, DecisionContext, Policy, QFunction};
use crate::error::{Error, Result};
use crate::nn::{clip_global_norm, Activation, AdamState, Dropout, Mlp, Tensor2};
use crate::replay::{Experience, PrioritizedBuffer};

/// Multi-output network scoring every measurement independently from `h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndependentPolicy {
    pub net: Mlp,
    pub label: String,
}

impl IndependentPolicy {
    /// Every measurement whose value exceeds the stop value, then Ω.
    pub fn select(&self, h: &[f64]) -> Result<ActionSet> {
        let q = self.net.forward(h)?;
        let k = q.len() - 1;
        ActionSet::closed(k, (0..k).filter(|&a| q[a] > q[k]))
    }
}

impl Policy for IndependentPolicy {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn choose(&self, ctx: &DecisionContext<'_>, _rng: &mut dyn RngCore) -> Result<ActionSet> {
        self.select(ctx.hidden)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedIndependent {
    pub net: Mlp,
    pub hyper: DqnHyper,
    pub validation: Option<ValidationSummary>,
}

/// Per-action target. A measurement's value is its own reward on top of
/// stopping from the same state; stopping bootstraps from the next state's
/// stop value plus every measurement worth taking there.
pub fn independent_target(e: &Experience, target: &Mlp) -> Result<f64> {
    let k = e.m.n_features();
    if e.action < k {
        let q = target.forward(&e.h)?;
        return Ok(e.reward + q[k]);
    }
    if e.terminal || e.gamma == 0.0 {
        return Ok(e.reward);
    }
    let q = target.forward(&e.h_next)?;
    let stop = q[k];
    let v = stop + q[..k].iter().map(|&x| (x - stop).max(0.0)).sum::<f64>();
    Ok(e.reward + e.gamma * v)
}

fn step(
    net: &mut Mlp,
    target: &Mlp,
    opt: &mut AdamState,
    batch: &[&Experience],
    weights: &[f64],
    hyper: &DqnHyper,
    rng: &mut dyn RngCore,
) -> Result<StepOutcome> {
    let targets = batch
        .iter()
        .map(|e| independent_target(e, target))
        .collect::<Result<Vec<f64>>>()?;
    let rows: Vec<Vec<f64>> = batch.iter().map(|e| e.h.to_vec()).collect();
    let x = Tensor2::from_rows(&rows)?;
    let mut dropout = Dropout { keep: hyper.keep, rng };
    let (q, cache) = net.forward_cached(&x, (hyper.keep < 1.0).then_some(&mut dropout), false)?;
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
    if weights.iter().any(|w| *w != 0.0) {
        let (mut grads, _) = net.backward(&cache, &dq)?;
        clip_global_norm(&mut grads, hyper.grad_clip);
        opt.step(net, &grads)?;
    }
    Ok(StepOutcome { loss, td_errors })
}

/// Trains the independent baseline on experiences generated in independent
/// mode. The network has `representation_layers + dueling_layers − 1` hidden
/// ReLU layers so its depth matches the dueling counterpart.
pub fn train_independent_dqn(
    buffer: &mut PrioritizedBuffer,
    hyper: &DqnHyper,
    validator: Option<&mut dyn FnMut(&Mlp) -> Result<ValidationSummary>>,
    log: &mut dyn FnMut(&TrainLogRecord),
) -> Result<TrainedIndependent> {
    hyper.validate()?;
    if buffer.is_empty() {
        return Err(Error::State("cannot train on an empty buffer".into()));
    }
    let first = buffer.get(0);
    let (input_dim, n_actions) = (first.h.len(), first.m.n_actions());
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let hidden = hyper.representation_layers + hyper.dueling_layers - 1;
    let mut net = Mlp::with_hidden(input_dim, hidden, hyper.width, n_actions, Activation::Identity, &mut rng);
    let mut target = net.clone();
    let mut opt = AdamState::new(&net, hyper.lr, hyper.l2);
    let mut ckpt = Checkpointing {
        validator,
        log,
        best: None,
        lambda: hyper.lambda,
    };
    let mut running = 0.0;
    for s in 1..=hyper.steps {
        let sample = buffer.sample(hyper.batch_size, &mut rng)?;
        let batch: Vec<&Experience> = sample.indices.iter().map(|&i| buffer.get(i)).collect();
        let outcome = step(&mut net, &target, &mut opt, &batch, &sample.weights, hyper, &mut rng)?;
        buffer.update(&sample.indices, &outcome.td_errors)?;
        running = if s == 1 { outcome.loss } else { 0.99 * running + 0.01 * outcome.loss };
        if s % hyper.sync_interval == 0 {
            target = net.clone();
        }
        if hyper.eval_interval > 0 && (s % hyper.eval_interval == 0 || s == hyper.steps) {
            ckpt.evaluate(&net, s, running)?;
        }
    }
    if hyper.steps == 0 || hyper.eval_interval == 0 {
        ckpt.evaluate(&net, hyper.steps, running)?;
    }
    let (net, validation) = match ckpt.best {
        Some((n, v)) => (n, Some(v)),
        None => (net, None),
    };
    Ok(TrainedIndependent {
        net,
        hyper: hyper.clone(),
        validation,
    })
}

impl QFunction for IndependentPolicy {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn n_actions(&self) -> usize {
        self.net.output_dim()
    }

    fn q(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(state)
    }
}


#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::nn::DenseParams;

    fn linear(q: &[f64]) -> Mlp {
        let w = Tensor2::zeros(q.len(), 1);
        Mlp::new(vec![DenseParams::new(w, q.to_vec(), Activation::Identity).unwrap()]).unwrap()
    }

    fn exp(action: usize, reward: f64, terminal: bool) -> Experience {
        let h: Arc<[f64]> = Arc::from(vec![0.0]);
        Experience {
            h: h.clone(),
            m: ActionSet::empty(2),
            h_next: h,
            m_next: ActionSet::empty(2),
            action,
            reward,
            gamma: 0.5,
            terminal,
        }
    }

    #[test]
    fn targets() {
        let net = linear(&[0.3, -0.2, 0.1]);
        assert!((independent_target(&exp(0, 0.05, false), &net).unwrap() - 0.15).abs() < 1e-15);
        assert!((independent_target(&exp(2, 1.0, false), &net).unwrap() - (1.0 + 0.5 * 0.3)).abs() < 1e-15);
        assert_eq!(independent_target(&exp(2, 1.0, true), &net).unwrap(), 1.0);
    }

    #[test]
    fn takes_everything_above_stop() {
        let p = IndependentPolicy {
            net: linear(&[0.3, -0.2, 0.5, 0.1]),
            label: "ind".into(),
        };
        assert_eq!(p.select(&[0.0]).unwrap(), ActionSet::closed(3, [0, 2]).unwrap());
        let stop = IndependentPolicy {
            net: linear(&[0.0, 0.0, 0.0, 1.0]),
            label: "ind".into(),
        };
        assert_eq!(stop.select(&[0.0]).unwrap().measurement_count(), 0);
    }
}
