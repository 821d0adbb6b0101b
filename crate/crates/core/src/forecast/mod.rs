//! Event-probability providers exposing a hidden state `h` and probability
//! `p` for a history of observations and a query time.
//!
//! Models are queried incrementally: a [`Carry`] summarizes every slot before
//! the query time, and [`ForecastModel::peek`] evaluates the query time with a
//! (possibly partial) slot of observations. [`query`] rebuilds the carry from
//! scratch and is the reference path.

mod designed;
mod lstm;
mod metrics;

use serde::{Deserialize, Serialize};

use crate::data::Slot;

pub use designed::{designed_hidden, designed_predict, DesignedClassifier, DEFAULT_IMPORTANCE};
pub use lstm::{featurize_slot, featurize_window, train_lstm, Imputation, LstmDropout, LstmForecaster, LstmHyper, LstmNet, LstmTrainReport};
pub use metrics::{auc, aupr};

/// Output of a forecaster query.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub hidden: Vec<f64>,
    pub prob: f64,
}

/// Model-specific summary of all slots before the query time.
#[derive(Clone, Debug, PartialEq)]
pub struct Carry(pub Vec<f64>);

pub trait ForecastModel: Send + Sync {
    fn n_features(&self) -> usize;

    fn hidden_dim(&self) -> usize;

    /// Summary of an empty history.
    fn initial(&self, statics: &[f64]) -> Carry;

    /// Consumes a complete slot.
    fn advance(&self, carry: &Carry, slot: &Slot) -> Carry;

    /// `(h, p)` at the time right after `carry`, with `slot` observed there.
    fn peek(&self, carry: &Carry, slot: &Slot) -> Forecast;

    fn peek_prob(&self, carry: &Carry, slot: &Slot) -> f64 {
        self.peek(carry, slot).prob
    }
}

/// Observations available to a query: full slots `0..x` and optionally a
/// partial slot at `x`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct History {
    pub slots: Vec<Slot>,
    pub statics: Vec<f64>,
}

impl History {
    pub fn new(statics: Vec<f64>) -> Self {
        Self {
            slots: Vec::new(),
            statics,
        }
    }

    /// Returns a new history with `k = v` observed at time `t`.
    pub fn with_observation(&self, n_features: usize, t: usize, k: usize, v: f64) -> History {
        let mut h = self.clone();
        while h.slots.len() <= t {
            h.slots.push(Slot::empty(n_features));
        }
        h.slots[t].reveal(k, v);
        h
    }
}

/// `(h_I(q, x), p_I(q, x))`: hidden state and probability at time `x` given
/// the observations in `history` up to and including `x`.
pub fn query(model: &dyn ForecastModel, history: &History, x: usize) -> Forecast {
    let k = model.n_features();
    let empty = Slot::empty(k);
    let mut carry = model.initial(&history.statics);
    for t in 0..x {
        carry = model.advance(&carry, history.slots.get(t).unwrap_or(&empty));
    }
    model.peek(&carry, history.slots.get(x).unwrap_or(&empty))
}

/// Any supported forecaster, for checkpoints and configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Forecaster {
    Designed(DesignedClassifier),
    Lstm(LstmForecaster),
}

impl ForecastModel for Forecaster {
    fn n_features(&self) -> usize {
        match self {
            Forecaster::Designed(m) => m.n_features(),
            Forecaster::Lstm(m) => m.n_features(),
        }
    }

    fn hidden_dim(&self) -> usize {
        match self {
            Forecaster::Designed(m) => m.hidden_dim(),
            Forecaster::Lstm(m) => m.hidden_dim(),
        }
    }

    fn initial(&self, statics: &[f64]) -> Carry {
        match self {
            Forecaster::Designed(m) => m.initial(statics),
            Forecaster::Lstm(m) => m.initial(statics),
        }
    }

    fn advance(&self, carry: &Carry, slot: &Slot) -> Carry {
        match self {
            Forecaster::Designed(m) => m.advance(carry, slot),
            Forecaster::Lstm(m) => m.advance(carry, slot),
        }
    }

    fn peek(&self, carry: &Carry, slot: &Slot) -> Forecast {
        match self {
            Forecaster::Designed(m) => m.peek(carry, slot),
            Forecaster::Lstm(m) => m.peek(carry, slot),
        }
    }

    fn peek_prob(&self, carry: &Carry, slot: &Slot) -> f64 {
        match self {
            Forecaster::Designed(m) => m.peek_prob(carry, slot),
            Forecaster::Lstm(m) => m.peek_prob(carry, slot),
        }
    }
}
