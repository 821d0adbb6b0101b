//! Action encoding with the stop action Ω, state assembly and the
//! sequential greedy selection loop.

use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{shape_err, Error, Result};
use crate::nn::{DuelingParams, Mlp};

/// Index in `0..=K`; `K` is the stop action Ω.
pub type ActionIndex = usize;

/// Largest supported measurement catalog.
pub const MAX_FEATURES: usize = 127;

/// Multi-hot set over `K` measurements plus Ω.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActionSet {
    bits: u128,
    n_features: usize,
}

impl ActionSet {
    pub fn empty(n_features: usize) -> Self {
        assert!(n_features <= MAX_FEATURES, "at most {MAX_FEATURES} measurements supported");
        Self { bits: 0, n_features }
    }

    pub fn from_indices(n_features: usize, indices: impl IntoIterator<Item = ActionIndex>) -> Result<Self> {
        let mut s = Self::empty(n_features);
        for a in indices {
            if a > n_features {
                return Err(Error::Shape(format!("action {a} outside 0..={n_features}")));
            }
            s.bits |= 1 << a;
        }
        Ok(s)
    }

    /// The given measurements followed by Ω.
    pub fn closed(n_features: usize, measurements: impl IntoIterator<Item = ActionIndex>) -> Result<Self> {
        let mut s = Self::from_indices(n_features, measurements)?;
        s.insert(n_features);
        Ok(s)
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_actions(&self) -> usize {
        self.n_features + 1
    }

    pub fn stop(&self) -> ActionIndex {
        self.n_features
    }

    pub fn contains(&self, a: ActionIndex) -> bool {
        a <= self.n_features && self.bits >> a & 1 == 1
    }

    pub fn insert(&mut self, a: ActionIndex) {
        assert!(a <= self.n_features, "action {a} outside 0..={}", self.n_features);
        self.bits |= 1 << a;
    }

    pub fn with(mut self, a: ActionIndex) -> Self {
        self.insert(a);
        self
    }

    pub fn is_closed(&self) -> bool {
        self.contains(self.n_features)
    }

    /// Every action, Ω included, is present.
    pub fn is_full(&self) -> bool {
        self.bits.count_ones() as usize == self.n_actions()
    }

    /// Number of measurements, Ω excluded.
    pub fn measurement_count(&self) -> usize {
        (self.bits & !(1 << self.n_features)).count_ones() as usize
    }

    pub fn measurements(&self) -> impl Iterator<Item = ActionIndex> + '_ {
        (0..self.n_features).filter(|&a| self.contains(a))
    }

    pub fn indices(&self) -> impl Iterator<Item = ActionIndex> + '_ {
        (0..=self.n_features).filter(|&a| self.contains(a))
    }

    /// Length `K + 1` vector of 0/1.
    pub fn multi_hot(&self) -> Vec<f64> {
        (0..=self.n_features).map(|a| if self.contains(a) { 1.0 } else { 0.0 }).collect()
    }

    pub fn bits(&self) -> u128 {
        self.bits
    }
}

impl fmt::Debug for ActionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set()
            .entries(self.indices().map(|a| {
                if a == self.n_features {
                    "Ω".to_string()
                } else {
                    format!("M{}", a + 1)
                }
            }))
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct ActionSetRepr {
    k: usize,
    set: Vec<usize>,
}

impl Serialize for ActionSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ActionSetRepr {
            k: self.n_features,
            set: self.indices().collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ActionSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = ActionSetRepr::deserialize(d)?;
        if r.k > MAX_FEATURES {
            return Err(serde::de::Error::custom("too many measurements"));
        }
        ActionSet::from_indices(r.k, r.set).map_err(serde::de::Error::custom)
    }
}

/// `s = [h, m]`, `m` as a `K + 1` multi-hot.
pub fn assemble_state(h: &[f64], m: &ActionSet) -> Vec<f64> {
    let mut s = Vec::with_capacity(h.len() + m.n_actions());
    s.extend_from_slice(h);
    s.extend((0..=m.n_features()).map(|a| if m.contains(a) { 1.0 } else { 0.0 }));
    s
}

/// Assembles a state for a network expecting `expected_len` inputs.
pub fn assemble_state_checked(h: &[f64], m: &ActionSet, expected_len: usize) -> Result<Vec<f64>> {
    if h.len() + m.n_actions() != expected_len {
        return shape_err(format!(
            "state of length {} + {} does not match expected {expected_len}",
            h.len(),
            m.n_actions()
        ));
    }
    Ok(assemble_state(h, m))
}

/// Anything producing one value per action for an assembled state.
pub trait QFunction: Send + Sync {
    fn input_dim(&self) -> usize;

    fn n_actions(&self) -> usize;

    fn q(&self, state: &[f64]) -> Result<Vec<f64>>;
}

impl QFunction for DuelingParams {
    fn input_dim(&self) -> usize {
        DuelingParams::input_dim(self)
    }

    fn n_actions(&self) -> usize {
        DuelingParams::n_actions(self)
    }

    fn q(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.forward(state)
    }
}

impl QFunction for Mlp {
    fn input_dim(&self) -> usize {
        Mlp::input_dim(self)
    }

    fn n_actions(&self) -> usize {
        self.output_dim()
    }

    fn q(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.forward(state)
    }
}

pub fn q_values(net: &dyn QFunction, h: &[f64], m: &ActionSet) -> Result<Vec<f64>> {
    if net.n_actions() != m.n_actions() {
        return shape_err(format!(
            "network has {} actions, action set {}",
            net.n_actions(),
            m.n_actions()
        ));
    }
    net.q(&assemble_state_checked(h, m, net.input_dim())?)
}

/// Highest value among actions not in `taken`; ties go to the lowest index.
/// `None` when every action is taken.
pub fn masked_argmax(q: &[f64], taken: &ActionSet) -> Option<ActionIndex> {
    let mut best: Option<(ActionIndex, f64)> = None;
    for (a, &v) in q.iter().enumerate() {
        if taken.contains(a) {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((a, v));
        }
    }
    best.map(|(a, _)| a)
}

/// Largest value among actions not in `taken`.
pub fn masked_max(q: &[f64], taken: &ActionSet) -> Option<f64> {
    masked_argmax(q, taken).map(|a| q[a])
}

/// Greedy sequential selection: repeatedly take the best action not yet in
/// the set, re-evaluating the network on `[h, A]`, until Ω is chosen.
pub fn run_policy(net: &dyn QFunction, h: &[f64]) -> Result<ActionSet> {
    let k = net
        .n_actions()
        .checked_sub(1)
        .ok_or_else(|| Error::Shape("network needs at least the stop action".into()))?;
    let mut taken = ActionSet::empty(k);
    while !taken.is_closed() {
        let q = q_values(net, h, &taken)?;
        let a = masked_argmax(&q, &taken).expect("Ω is untaken while the set is open");
        taken.insert(a);
    }
    Ok(taken)
}

/// What a policy sees at one timepoint.
#[derive(Clone, Copy, Debug)]
pub struct DecisionContext<'a> {
    pub hidden: &'a [f64],
    pub n_features: usize,
    /// Measurements the logging policy took here, when evaluating on logs.
    pub logged: Option<&'a ActionSet>,
}

/// Chooses the measurements for one timepoint. The returned set always
/// contains Ω.
pub trait Policy: Send + Sync {
    fn name(&self) -> String;

    fn choose(&self, ctx: &DecisionContext<'_>, rng: &mut dyn RngCore) -> Result<ActionSet>;
}

/// Greedy sequential policy of a trained Q network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyPolicy {
    pub net: DuelingParams,
    pub label: String,
}

impl Policy for GreedyPolicy {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn choose(&self, ctx: &DecisionContext<'_>, _rng: &mut dyn RngCore) -> Result<ActionSet> {
        run_policy(&self.net, ctx.hidden)
    }
}
