use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_and_step, Checkpointing, DqnHyper, TrainLogRecord, TrainedPolicy, ValidationSummary};
use crate::agent::{masked_argmax, q_values, ActionSet};
use crate::data::{PatientTrajectory, Slot};
use crate::error::{Error, Result};
use crate::forecast::ForecastModel;
use crate::nn::{AdamState, DuelingParams};
use crate::replay::{experiences_with_orders, PrioritizedBuffer, PriorityConfig, RewardConfig};
use crate::sim::{sample_latent, stream_rng, SimConfig};

/// Linear annealing of the exploration rate over `episodes`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub episodes: usize,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.05,
            episodes: 1_000,
        }
    }
}

impl EpsilonSchedule {
    pub fn at(&self, episode: usize) -> f64 {
        if self.episodes == 0 {
            return self.end;
        }
        let frac = (episode as f64 / self.episodes as f64).min(1.0);
        self.start + (self.end - self.start) * frac
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineConfig {
    pub episodes: usize,
    /// Gradient steps after each simulated trajectory.
    pub steps_per_episode: usize,
    pub capacity: usize,
    pub epsilon: EpsilonSchedule,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            episodes: 2_000,
            steps_per_episode: 10,
            capacity: 200_000,
            epsilon: EpsilonSchedule::default(),
        }
    }
}

/// ε-greedy sequential selection over the actions not yet taken.
fn explore(
    net: &DuelingParams,
    h: &[f64],
    k: usize,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let mut taken = ActionSet::empty(k);
    let mut order = Vec::new();
    loop {
        let a = if rng.random::<f64>() < epsilon {
            let free: Vec<usize> = (0..=k).filter(|&a| !taken.contains(a)).collect();
            free[rng.random_range(0..free.len())]
        } else {
            let q = q_values(net, h, &taken)?;
            masked_argmax(&q, &taken).expect("Ω is untaken while the set is open")
        };
        taken.insert(a);
        if a == k {
            return Ok(order);
        }
        order.push(a);
    }
}

/// Trains by interacting with the simulator: each episode samples a fresh
/// trajectory, lets the ε-greedy agent choose which values to reveal, turns
/// the choices into experiences and takes gradient steps.
#[allow(clippy::too_many_arguments)]
pub fn train_dqn_online(
    sim: &SimConfig,
    model: &dyn ForecastModel,
    reward: &RewardConfig,
    online: &OnlineConfig,
    hyper: &DqnHyper,
    priority: PriorityConfig,
    validator: Option<&mut dyn FnMut(&DuelingParams) -> Result<ValidationSummary>>,
    log: &mut dyn FnMut(&TrainLogRecord),
) -> Result<TrainedPolicy> {
    hyper.validate()?;
    sim.validate()?;
    reward.validate()?;
    if online.episodes == 0 {
        return Err(Error::Config("online training needs at least one episode".into()));
    }
    let k = sim.n_features;
    if model.n_features() != k {
        return Err(Error::Shape("forecaster and simulator disagree on feature count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut net = DuelingParams::init(model.hidden_dim() + k + 1, k + 1, hyper.arch(), &mut rng);
    let mut target = net.clone();
    let mut opt = AdamState::new(&net, hyper.lr, hyper.l2);
    let mut buffer = PrioritizedBuffer::new(online.capacity, priority)?;
    let mut ckpt = Checkpointing {
        validator,
        log,
        best: None,
        lambda: reward.lambda,
    };
    let empty = Slot::empty(k);
    let mut step = 0usize;
    let mut running = 0.0;
    for episode in 0..online.episodes {
        let mut sim_rng = stream_rng(sim.seed ^ hyper.seed, episode as u64);
        let latent = sample_latent(&mut sim_rng, sim);
        let epsilon = online.epsilon.at(episode);
        let mut patient = PatientTrajectory {
            id: format!("online{episode}"),
            values: vec![vec![0.0; k]; latent.len()],
            observed: vec![vec![false; k]; latent.len()],
            states: Some(latent.states.clone()),
            terminal_time: latent.terminal_time,
            label: latent.terminal_time.is_some(),
            statics: Vec::new(),
        };
        let mut orders = Vec::with_capacity(latent.len());
        let mut carry = model.initial(&[]);
        for t in 0..latent.len() {
            let h = model.peek(&carry, &empty).hidden;
            let order = explore(&net, &h, k, epsilon, &mut rng)?;
            for &a in &order {
                patient.values[t][a] = latent.values[t][a];
                patient.observed[t][a] = true;
            }
            carry = model.advance(&carry, &patient.slot(t));
            orders.push(order);
        }
        for e in experiences_with_orders(model, &patient, reward, &orders) {
            buffer.insert(e, None);
        }
        for _ in 0..online.steps_per_episode {
            step += 1;
            let outcome = sample_and_step(&mut buffer, &mut net, &target, &mut opt, hyper, &mut rng)?;
            running = if step == 1 { outcome.loss } else { 0.99 * running + 0.01 * outcome.loss };
            if step % hyper.sync_interval == 0 {
                target = net.clone();
            }
            if hyper.eval_interval > 0 && step % hyper.eval_interval == 0 {
                ckpt.evaluate(&net, step, running)?;
            }
        }
    }
    ckpt.evaluate(&net, step, running)?;
    let (net, validation) = match ckpt.best {
        Some((n, v)) => (n, Some(v)),
        None => (net, None),
    };
    Ok(TrainedPolicy {
        net,
        hyper: DqnHyper {
            lambda: reward.lambda,
            ..hyper.clone()
        },
        validation,
    })
}
