use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::Experience;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorityConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for PriorityConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            beta: 0.4,
            epsilon: 1e-3,
        }
    }
}

/// Binary tree of partial sums over a power-of-two leaf array. Parents are
/// recomputed from their children on every update, so the root never drifts
/// from the sum of the leaves.
#[derive(Clone, Debug, PartialEq)]
pub struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        Self {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    pub fn set(&mut self, i: usize, value: f64) {
        let mut n = self.leaves + i;
        self.nodes[n] = value;
        while n > 1 {
            n /= 2;
            self.nodes[n] = self.nodes[2 * n] + self.nodes[2 * n + 1];
        }
    }

    /// Leaf whose cumulative interval contains `mass`, skipping zero leaves.
    pub fn find(&self, mut mass: f64) -> usize {
        let mut n = 1;
        while n < self.leaves {
            let left = self.nodes[2 * n];
            if mass < left || self.nodes[2 * n + 1] <= 0.0 {
                n *= 2;
            } else {
                mass -= left;
                n = 2 * n + 1;
            }
        }
        n - self.leaves
    }

    pub fn leaf_sum(&self) -> f64 {
        self.nodes[self.leaves..].iter().sum()
    }
}

/// A sampled minibatch.
#[derive(Clone, Debug)]
pub struct Sample {
    pub indices: Vec<usize>,
    /// Importance weights normalized by the batch maximum.
    pub weights: Vec<f64>,
}

/// Fixed-capacity ring of experiences sampled proportionally to
/// `priority^alpha`.
#[derive(Clone, Debug)]
pub struct PrioritizedBuffer {
    capacity: usize,
    items: Vec<Experience>,
    next: usize,
    tree: SumTree,
    priorities: Vec<f64>,
    max_priority: f64,
    pub config: PriorityConfig,
}

impl PrioritizedBuffer {
    pub fn new(capacity: usize, config: PriorityConfig) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        if config.alpha < 0.0 || config.beta < 0.0 || !(config.epsilon > 0.0) {
            return Err(Error::Config("priority exponents must be non-negative and epsilon positive".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::new(),
            next: 0,
            tree: SumTree::new(capacity),
            priorities: Vec::new(),
            max_priority: 1.0,
            config,
        })
    }

    pub fn from_experiences(experiences: Vec<Experience>, config: PriorityConfig) -> Result<Self> {
        let mut b = Self::new(experiences.len().max(1), config)?;
        for e in experiences {
            b.insert(e, None);
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn experiences(&self) -> &[Experience] {
        &self.items
    }

    pub fn experiences_mut(&mut self) -> &mut [Experience] {
        &mut self.items
    }

    pub fn get(&self, i: usize) -> &Experience {
        &self.items[i]
    }

    pub fn priority(&self, i: usize) -> f64 {
        self.priorities[i]
    }

    pub fn max_priority(&self) -> f64 {
        self.max_priority
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    /// Inserts at `priority`, or at the current maximum when `None`; the
    /// oldest item is overwritten once full. Returns the slot used.
    pub fn insert(&mut self, e: Experience, priority: Option<f64>) -> usize {
        let p = priority.unwrap_or(self.max_priority).max(self.config.epsilon);
        let slot = self.next;
        if self.items.len() < self.capacity {
            self.items.push(e);
            self.priorities.push(p);
        } else {
            self.items[slot] = e;
            self.priorities[slot] = p;
        }
        self.next = (slot + 1) % self.capacity;
        self.max_priority = self.max_priority.max(p);
        self.tree.set(slot, p.powf(self.config.alpha));
        slot
    }

    /// Probability of drawing slot `i`.
    pub fn probability(&self, i: usize) -> f64 {
        self.tree.get(i) / self.tree.total()
    }

    pub fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<Sample> {
        if self.items.is_empty() {
            return Err(Error::State("cannot sample from an empty buffer".into()));
        }
        let total = self.tree.total();
        let len = self.items.len() as f64;
        let mut indices = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            let i = self.tree.find(rng.random::<f64>() * total).min(self.items.len() - 1);
            indices.push(i);
            weights.push((len * self.probability(i)).powf(-self.config.beta));
        }
        let max = weights.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            for w in &mut weights {
                *w /= max;
            }
        }
        Ok(Sample { indices, weights })
    }

    /// Sets the priority of each index to `|td| + epsilon`.
    pub fn update(&mut self, indices: &[usize], td_errors: &[f64]) -> Result<()> {
        if indices.len() != td_errors.len() {
            return Err(Error::Shape("indices and TD errors differ in length".into()));
        }
        for (&i, &td) in indices.iter().zip(td_errors) {
            if i >= self.items.len() {
                return Err(Error::Shape(format!("buffer index {i} out of range")));
            }
            let p = td.abs() + self.config.epsilon;
            self.priorities[i] = p;
            self.max_priority = self.max_priority.max(p);
            self.tree.set(i, p.powf(self.config.alpha));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::agent::ActionSet;
    use std::sync::Arc;

    fn dummy(r: f64) -> Experience {
        let h: Arc<[f64]> = Arc::from(vec![0.0]);
        Experience {
            h: h.clone(),
            m: ActionSet::empty(1),
            h_next: h,
            m_next: ActionSet::empty(1),
            action: 1,
            reward: r,
            gamma: 1.0,
            terminal: true,
        }
    }

    fn filled(n: usize, cfg: PriorityConfig) -> PrioritizedBuffer {
        PrioritizedBuffer::from_experiences((0..n).map(|i| dummy(i as f64)).collect(), cfg).unwrap()
    }

    fn counts(b: &PrioritizedBuffer, draws: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = b.sample(draws, &mut rng).unwrap();
        let mut c = vec![0; b.len()];
        for i in s.indices {
            c[i] += 1;
        }
        c
    }

    fn chi_square_uniform(c: &[usize]) -> f64 {
        let n: usize = c.iter().sum();
        let e = n as f64 / c.len() as f64;
        c.iter().map(|&o| (o as f64 - e).powi(2) / e).sum()
    }

    #[test]
    fn equal_priorities_sample_uniformly() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let b = filled(20, PriorityConfig::default());
        let stat = chi_square_uniform(&counts(&b, 10_000, 1));
        let p = 1.0 - ChiSquared::new(19.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi-square p = {p}");
    }

    #[test]
    fn zero_alpha_ignores_priorities() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut b = filled(10, PriorityConfig {
            alpha: 0.0,
            ..PriorityConfig::default()
        });
        b.update(&[0, 3, 7], &[100.0, 0.5, 42.0]).unwrap();
        let stat = chi_square_uniform(&counts(&b, 10_000, 2));
        assert!(1.0 - ChiSquared::new(9.0).unwrap().cdf(stat) > 0.01);
    }

    #[test]
    fn dominant_priority_dominates() {
        let mut b = filled(10, PriorityConfig::default());
        b.update(&(0..10).collect::<Vec<_>>(), &[1.0; 10]).unwrap();
        b.update(&[6], &[1e6]).unwrap();
        let c = counts(&b, 10_000, 3);
        assert!(c[6] as f64 / 10_000.0 > 0.99);
    }

    #[test]
    fn empty_buffer_sampling_is_a_state_error() {
        let b = PrioritizedBuffer::new(4, PriorityConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample(1, &mut rng), Err(Error::State(_))));
    }

    #[test]
    fn weights_and_updates() {
        let mut b = filled(4, PriorityConfig::default());
        b.update(&[0, 1], &[3.0, -0.5]).unwrap();
        assert_eq!(b.priority(0), 3.001);
        assert_eq!(b.priority(1), 0.501);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = b.sample(64, &mut rng).unwrap();
        let max = s.weights.iter().copied().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        for (&i, &w) in s.indices.iter().zip(&s.weights) {
            let raw = (4.0 * b.probability(i)).powf(-0.4);
            let min_p = (0..4).filter(|j| s.indices.contains(j)).map(|j| b.probability(j)).fold(1.0, f64::min);
            assert!((w - raw / (4.0 * min_p).powf(-0.4)).abs() < 1e-12);
        }
        b.insert(dummy(9.0), None);
        assert_eq!(b.priority(0), 3.001);
        assert_eq!(b.get(0).reward, 9.0);
    }

    #[test]
    fn root_matches_leaves_after_interleaving() {
        let mut b = PrioritizedBuffer::new(37, PriorityConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for step in 0..2000 {
            if step % 3 == 0 || b.is_empty() {
                b.insert(dummy(0.0), if step % 2 == 0 { None } else { Some(rng.random::<f64>() * 5.0) });
            } else {
                let i = rng.random_range(0..b.len());
                b.update(&[i], &[rng.random::<f64>() * 10.0 - 5.0]).unwrap();
            }
            assert!((b.tree().total() - b.tree().leaf_sum()).abs() < 1e-9);
        }
    }
}
