//! Rewards, experience generation from logged trajectories, and the
//! prioritized replay buffer.

mod buffer;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{ActionIndex, ActionSet};
use crate::data::{Dataset, PatientTrajectory, Slot};
use crate::error::{Error, Result};
use crate::forecast::{Carry, ForecastModel};
use crate::sim::stream_rng;

pub use buffer::{PrioritizedBuffer, PriorityConfig, Sample, SumTree};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub lambda: f64,
    /// Per-measurement cost; empty means 1 for every measurement.
    pub costs: Vec<f64>,
    pub gamma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            costs: Vec::new(),
            gamma: 0.999,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.costs.iter().any(|c| !(*c >= 0.0)) {
            return Err(Error::Config("measurement costs must be non-negative".into()));
        }
        Ok(())
    }

    /// `c(a)`: 0 for Ω, the configured cost otherwise.
    pub fn action_cost(&self, a: ActionIndex, n_features: usize) -> f64 {
        if a >= n_features {
            0.0
        } else {
            self.costs.get(a).copied().unwrap_or(1.0)
        }
    }

    pub fn set_cost(&self, set: &ActionSet) -> f64 {
        set.measurements().map(|a| self.action_cost(a, set.n_features())).sum()
    }
}

/// Probability change signed by the outcome label.
pub fn info_gain(delta_p: f64, label: bool) -> f64 {
    if label {
        delta_p
    } else {
        -delta_p
    }
}

pub fn action_cost(cfg: &RewardConfig, a: ActionIndex, n_features: usize) -> f64 {
    cfg.action_cost(a, n_features)
}

/// One transition `[h, m, h', m', a, r, γ_e, terminal]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    pub h: Arc<[f64]>,
    pub m: ActionSet,
    pub h_next: Arc<[f64]>,
    pub m_next: ActionSet,
    pub action: ActionIndex,
    pub reward: f64,
    pub gamma: f64,
    pub terminal: bool,
}

impl Experience {
    pub fn is_time_passing(&self) -> bool {
        self.action == self.m.stop()
    }
}

/// How measurement rewards are attributed within one timepoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExperienceMode {
    /// Shuffled sequential reveal; each reward is relative to the prefix.
    #[default]
    Sequential,
    /// Each measurement's change is computed against the previous history
    /// alone; action sets are left empty.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub n_orders: usize,
    pub mode: ExperienceMode,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            n_orders: 3,
            mode: ExperienceMode::Sequential,
        }
    }
}

fn factorial_capped(n: usize, cap: usize) -> usize {
    let mut f: usize = 1;
    for i in 2..=n {
        f = f.saturating_mul(i);
        if f > cap {
            return f;
        }
    }
    f
}

fn all_permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let first = rest.remove(i);
        for mut p in all_permutations(&rest) {
            p.insert(0, first);
            out.push(p);
        }
    }
    out
}

/// `min(n_orders, |y|!)` reveal orders: every permutation when that many
/// exist, otherwise independent shuffles.
pub fn reveal_orders(observed: &[usize], n_orders: usize, rng: &mut dyn RngCore) -> Vec<Vec<usize>> {
    if factorial_capped(observed.len(), n_orders) <= n_orders {
        return all_permutations(observed);
    }
    (0..n_orders)
        .map(|_| {
            let mut o = observed.to_vec();
            o.shuffle(rng);
            o
        })
        .collect()
}

/// Measurement experiences for revealing `slot` at the time following
/// `carry`, one per observation per order. `h` is the frozen hidden state.
#[allow(clippy::too_many_arguments)]
pub fn measurement_experiences(
    model: &dyn ForecastModel,
    carry: &Carry,
    h: &Arc<[f64]>,
    slot: &Slot,
    label: bool,
    cfg: &RewardConfig,
    orders: &[Vec<usize>],
) -> Vec<Experience> {
    let k = slot.values.len();
    let mut out = Vec::new();
    for order in orders {
        let mut set = ActionSet::empty(k);
        let mut p_before = model.peek_prob(carry, &Slot::empty(k));
        for (i, &a) in order.iter().enumerate() {
            let p_after = model.peek_prob(carry, &slot.restricted(&order[..=i]));
            let next = set.with(a);
            out.push(Experience {
                h: h.clone(),
                m: set,
                h_next: h.clone(),
                m_next: next,
                action: a,
                reward: info_gain(p_after - p_before, label) - cfg.lambda * cfg.action_cost(a, k),
                gamma: 1.0,
                terminal: false,
            });
            set = next;
            p_before = p_after;
        }
    }
    out
}

fn independent_experiences(
    model: &dyn ForecastModel,
    carry: &Carry,
    h: &Arc<[f64]>,
    slot: &Slot,
    label: bool,
    cfg: &RewardConfig,
) -> Vec<Experience> {
    let k = slot.values.len();
    let p0 = model.peek_prob(carry, &Slot::empty(k));
    let empty = ActionSet::empty(k);
    (0..k)
        .filter(|&a| slot.observed[a])
        .map(|a| {
            let p = model.peek_prob(carry, &slot.restricted(&[a]));
            Experience {
                h: h.clone(),
                m: empty,
                h_next: h.clone(),
                m_next: empty,
                action: a,
                reward: info_gain(p - p0, label) - cfg.lambda * cfg.action_cost(a, k),
                gamma: 1.0,
                terminal: false,
            }
        })
        .collect()
}

/// All experiences of one trajectory in time order.
///
/// Within time `t` the agent sees the frozen state `h(q_{t-1}, t)` and
/// reveals `y_t` one observation at a time. The stop action then carries the
/// probability change from `(q_t, t)` to `(q_t, t+1)` into the next
/// timepoint's empty selection state; the move past the last slot is
/// terminal.
pub fn patient_experiences(
    model: &dyn ForecastModel,
    patient: &PatientTrajectory,
    cfg: &RewardConfig,
    gen: &GenerationConfig,
    rng: &mut dyn RngCore,
) -> Vec<Experience> {
    let n_orders = gen.n_orders.max(1);
    trajectory_experiences(model, patient, cfg, gen.mode, &mut |_, observed| {
        reveal_orders(observed, n_orders, rng)
    })
}

/// Sequential-mode experiences with one given reveal order per timepoint,
/// as produced by an acting agent.
pub fn experiences_with_orders(
    model: &dyn ForecastModel,
    patient: &PatientTrajectory,
    cfg: &RewardConfig,
    orders: &[Vec<usize>],
) -> Vec<Experience> {
    trajectory_experiences(model, patient, cfg, ExperienceMode::Sequential, &mut |t, _| {
        vec![orders[t].clone()]
    })
}

fn trajectory_experiences(
    model: &dyn ForecastModel,
    patient: &PatientTrajectory,
    cfg: &RewardConfig,
    mode: ExperienceMode,
    orders_at: &mut dyn FnMut(usize, &[usize]) -> Vec<Vec<usize>>,
) -> Vec<Experience> {
    let k = patient.n_features();
    let empty_slot = Slot::empty(k);
    let mut out = Vec::new();
    let mut carry = model.initial(&patient.statics);
    for t in 0..patient.len() {
        let slot = patient.slot(t);
        let frozen: Arc<[f64]> = Arc::from(model.peek(&carry, &empty_slot).hidden);
        let observed = patient.observed_at(t);
        let taken = match mode {
            ExperienceMode::Sequential => {
                let orders = orders_at(t, &observed);
                out.extend(measurement_experiences(model, &carry, &frozen, &slot, patient.label, cfg, &orders));
                ActionSet::from_indices(k, observed.iter().copied()).expect("observed indices in range")
            }
            ExperienceMode::Independent => {
                out.extend(independent_experiences(model, &carry, &frozen, &slot, patient.label, cfg));
                ActionSet::empty(k)
            }
        };
        let p_end = model.peek_prob(&carry, &slot);
        carry = model.advance(&carry, &slot);
        let next = model.peek(&carry, &empty_slot);
        out.push(Experience {
            h: frozen,
            m: taken,
            h_next: Arc::from(next.hidden),
            m_next: ActionSet::empty(k),
            action: k,
            reward: info_gain(next.prob - p_end, patient.label),
            gamma: cfg.gamma,
            terminal: t + 1 == patient.len(),
        });
    }
    out
}

/// Experiences for every patient, generated in parallel with one generator
/// stream per patient index and concatenated in dataset order.
pub fn generate_experiences(
    model: &dyn ForecastModel,
    dataset: &Dataset,
    cfg: &RewardConfig,
    gen: &GenerationConfig,
    seed: u64,
) -> Result<Vec<Experience>> {
    cfg.validate()?;
    if gen.n_orders == 0 {
        return Err(Error::Config("n_orders must be at least 1".into()));
    }
    if model.n_features() != dataset.n_features() {
        return Err(Error::Shape(format!(
            "forecaster has {} features, dataset {}",
            model.n_features(),
            dataset.n_features()
        )));
    }
    let per_patient: Vec<Vec<Experience>> = dataset
        .patients
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = stream_rng(seed, i as u64);
            patient_experiences(model, p, cfg, gen, &mut rng)
        })
        .collect();
    Ok(per_patient.into_iter().flatten().collect())
}

/// [`generate_experiences`] inserted at maximum priority.
pub fn generate_all(
    model: &dyn ForecastModel,
    dataset: &Dataset,
    cfg: &RewardConfig,
    gen: &GenerationConfig,
    priority: PriorityConfig,
    seed: u64,
) -> Result<PrioritizedBuffer> {
    PrioritizedBuffer::from_experiences(generate_experiences(model, dataset, cfg, gen, seed)?, priority)
}

/// Re-expresses rewards generated under `from` for cost coefficient
/// `lambda`: `r' = r + (λ_from − λ)·c(a)`.
pub fn reweight(experiences: &mut [Experience], from: &RewardConfig, lambda: f64) {
    for e in experiences {
        let c = from.action_cost(e.action, e.m.n_features());
        e.reward += (from.lambda - lambda) * c;
    }
}
