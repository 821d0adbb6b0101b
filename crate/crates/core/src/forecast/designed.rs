use serde::{Deserialize, Serialize};

use super::{Carry, Forecast, ForecastModel};
use crate::data::Slot;
use crate::error::{shape_err, Error, Result};
use crate::nn::sigmoid;

/// Importance of M1..M10 in the simulated task.
pub const DEFAULT_IMPORTANCE: [f64; 10] = [1.0, 2.0, 3.0, 4.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0];

/// Analytic forecaster: logistic transform of an importance-weighted,
/// age-decayed sum over the most recent `window` timepoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignedClassifier {
    pub importance: Vec<f64>,
    pub decay: f64,
    pub window: usize,
    pub horizon: usize,
    /// Redundant feature groups. A group contributes its largest member
    /// importance times the mean of its observed members, so observing a
    /// second member adds nothing when the values agree.
    #[serde(default)]
    pub groups: Vec<Vec<usize>>,
}

impl DesignedClassifier {
    pub fn new(decay: f64) -> Result<Self> {
        Self::with_importance(DEFAULT_IMPORTANCE.to_vec(), decay)
    }

    pub fn with_importance(importance: Vec<f64>, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::Config(format!("decay {decay} outside (0, 1]")));
        }
        Ok(Self {
            importance,
            decay,
            window: 5,
            horizon: 5,
            groups: Vec::new(),
        })
    }

    pub fn with_groups(mut self, groups: Vec<Vec<usize>>) -> Result<Self> {
        let k = self.importance.len();
        let mut seen = vec![false; k];
        for g in &groups {
            for &i in g {
                if i >= k || seen[i] {
                    return Err(Error::Config("feature groups must be disjoint and in range".into()));
                }
                seen[i] = true;
            }
        }
        self.groups = groups;
        Ok(self)
    }

    fn row_score(&self, values: &[f64], observed: &[bool]) -> f64 {
        if self.groups.is_empty() {
            return values.iter().zip(&self.importance).map(|(y, f)| y * f).sum();
        }
        let mut grouped = vec![false; values.len()];
        let mut score = 0.0;
        for g in &self.groups {
            let (mut sum, mut n, mut f) = (0.0, 0usize, 0.0f64);
            for &k in g {
                grouped[k] = true;
                f = f.max(self.importance[k]);
                if observed[k] {
                    sum += values[k];
                    n += 1;
                }
            }
            if n > 0 {
                score += f * sum / n as f64;
            }
        }
        for k in 0..values.len() {
            if !grouped[k] {
                score += values[k] * self.importance[k];
            }
        }
        score
    }

    /// Probability from `window` rows ordered oldest first.
    fn window_prob(&self, rows: &[&[f64]], masks: &[&[bool]]) -> f64 {
        let n = rows.len();
        let score: f64 = (0..n)
            .map(|i| self.decay.powi((n - 1 - i) as i32) * self.row_score(rows[i], masks[i]))
            .sum();
        sigmoid(score)
    }

    fn split_carry<'a>(&self, carry: &'a Carry) -> (&'a [f64], &'a [f64]) {
        let cells = (self.window - 1) * self.importance.len();
        carry.0.split_at(cells)
    }
}

impl ForecastModel for DesignedClassifier {
    fn n_features(&self) -> usize {
        self.importance.len()
    }

    fn hidden_dim(&self) -> usize {
        self.window * self.importance.len()
    }

    /// Values then observation flags of the last `window - 1` slots, oldest first.
    fn initial(&self, _statics: &[f64]) -> Carry {
        Carry(vec![0.0; 2 * (self.window - 1) * self.importance.len()])
    }

    fn advance(&self, carry: &Carry, slot: &Slot) -> Carry {
        let k = self.importance.len();
        let (vals, obs) = self.split_carry(carry);
        let mut next = Vec::with_capacity(carry.0.len());
        next.extend_from_slice(&vals[k..]);
        next.extend_from_slice(&slot.values);
        next.extend_from_slice(&obs[k..]);
        next.extend(slot.observed.iter().map(|&o| if o { 1.0 } else { 0.0 }));
        Carry(next)
    }

    fn peek(&self, carry: &Carry, slot: &Slot) -> Forecast {
        let (vals, _) = self.split_carry(carry);
        let mut hidden = Vec::with_capacity(self.hidden_dim());
        hidden.extend_from_slice(vals);
        hidden.extend_from_slice(&slot.values);
        Forecast {
            prob: self.peek_prob(carry, slot),
            hidden,
        }
    }

    fn peek_prob(&self, carry: &Carry, slot: &Slot) -> f64 {
        let k = self.importance.len();
        let (vals, obs) = self.split_carry(carry);
        let obs_bool: Vec<bool> = obs.iter().map(|&o| o != 0.0).collect();
        let mut rows: Vec<&[f64]> = vals.chunks(k).collect();
        let mut masks: Vec<&[bool]> = obs_bool.chunks(k).collect();
        rows.push(&slot.values);
        masks.push(&slot.observed);
        self.window_prob(&rows, &masks)
    }
}

/// `σ(Σ_d Σ_k y · f_k · η^d)` over a 5×10 window (oldest row first,
/// missing entries 0), `d` being the age of the row.
pub fn designed_predict(window: &[Vec<f64>], decay: f64) -> Result<f64> {
    check_window(window)?;
    let score: f64 = window
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let age = (window.len() - 1 - i) as i32;
            decay.powi(age) * row.iter().zip(DEFAULT_IMPORTANCE).map(|(y, f)| y * f).sum::<f64>()
        })
        .sum();
    Ok(sigmoid(score))
}

/// The flattened window, used directly as the agent's hidden state.
pub fn designed_hidden(window: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_window(window)?;
    Ok(window.iter().flatten().copied().collect())
}

fn check_window(window: &[Vec<f64>]) -> Result<()> {
    if window.len() != 5 || window.iter().any(|r| r.len() != DEFAULT_IMPORTANCE.len()) {
        return shape_err("designed classifier expects a 5x10 window");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecast::{query, History};

    fn zero_window() -> Vec<Vec<f64>> {
        vec![vec![0.0; 10]; 5]
    }

    #[test]
    fn zero_window_is_one_half() {
        assert_eq!(designed_predict(&zero_window(), 0.9).unwrap(), 0.5);
    }

    #[test]
    fn recent_and_aged_single_observations() {
        let mut w = zero_window();
        w[4][4] = 1.0;
        for eta in [0.3, 0.9, 1.0] {
            assert!((designed_predict(&w, eta).unwrap() - 0.9933071490757153).abs() < 1e-12);
        }
        let mut aged = zero_window();
        aged[3][4] = 1.0;
        assert!((designed_predict(&aged, 0.9).unwrap() - 0.9890130573694068).abs() < 1e-12);
    }

    #[test]
    fn wrong_shape_rejected() {
        assert!(designed_predict(&vec![vec![0.0; 10]; 4], 0.9).is_err());
        assert!(designed_hidden(&vec![vec![0.0; 9]; 5]).is_err());
    }

    #[test]
    fn hidden_is_the_flattened_window() {
        assert_eq!(designed_hidden(&zero_window()).unwrap(), vec![0.0; 50]);
        let mut a = zero_window();
        a[2][7] = 0.25;
        let ha = designed_hidden(&a).unwrap();
        let hb = designed_hidden(&zero_window()).unwrap();
        let diffs = ha.iter().zip(&hb).filter(|(x, y)| x != y).count();
        assert_eq!(diffs, 1);
        assert_eq!(ha.chunks(10).map(<[f64]>::to_vec).collect::<Vec<_>>(), a);
    }

    #[test]
    fn incremental_query_matches_window_formula() {
        let m = DesignedClassifier::new(0.9).unwrap();
        let mut h = History::new(vec![]);
        let obs = [(0, 4, 1.0), (2, 3, -1.0), (5, 0, 1.1), (6, 4, 0.9), (6, 8, 3.0), (7, 2, -0.8)];
        for &(t, k, v) in &obs {
            h = h.with_observation(10, t, k, v);
        }
        for x in 0..9 {
            let mut w = zero_window();
            for &(t, k, v) in &obs {
                if t <= x && x - t < 5 {
                    w[4 - (x - t)][k] = v;
                }
            }
            let f = query(&m, &h, x);
            assert!((f.prob - designed_predict(&w, 0.9).unwrap()).abs() < 1e-15);
            assert_eq!(f.hidden, designed_hidden(&w).unwrap());
        }
    }

    #[test]
    fn empty_history_gives_one_half() {
        let m = DesignedClassifier::new(0.9).unwrap();
        let f = query(&m, &History::default(), 3);
        assert_eq!(f.prob, 0.5);
        assert_eq!(f.hidden.len(), 50);
    }

    #[test]
    fn grouped_twins_are_redundant() {
        let mut f = DEFAULT_IMPORTANCE.to_vec();
        f[3] = 5.0;
        let m = DesignedClassifier::with_importance(f, 0.9)
            .unwrap()
            .with_groups(vec![vec![3, 4]])
            .unwrap();
        let one = History::default().with_observation(10, 0, 4, 1.0);
        let both = one.with_observation(10, 0, 3, 1.0);
        let p1 = query(&m, &one, 0).prob;
        let p2 = query(&m, &both, 0).prob;
        assert_eq!(p1, p2);
        assert!((p1 - sigmoid(5.0)).abs() < 1e-15);
    }
}
