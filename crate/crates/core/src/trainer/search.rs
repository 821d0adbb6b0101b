use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_dqn, DqnHyper, TrainLogRecord, TrainedPolicy, ValidationSummary};
use crate::error::{Error, Result};
use crate::nn::DuelingParams;
use crate::replay::{reweight, Experience, PrioritizedBuffer, PriorityConfig, RewardConfig};

/// Candidate values for each searched hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub representation_layers: Vec<usize>,
    pub dueling_layers: Vec<usize>,
    pub width: Vec<usize>,
    pub lr: Vec<f64>,
    pub l2: Vec<f64>,
    pub keep: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub lambda: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            representation_layers: vec![1, 2, 3, 4],
            dueling_layers: vec![1, 2, 3, 4],
            width: vec![16, 32, 64, 128],
            lr: vec![5e-2, 1e-3, 5e-3, 1e-4, 5e-4, 1e-5, 5e-5, 1e-6],
            l2: vec![5e-1, 1e-1, 5e-2, 1e-2, 5e-3, 1e-3, 5e-4, 1e-4],
            keep: vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.5],
            batch_size: vec![32, 64, 128, 256, 512],
            lambda: vec![1e-4, 5e-4, 1e-3, 5e-3, 1e-2],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let empty = self.representation_layers.is_empty()
            || self.dueling_layers.is_empty()
            || self.width.is_empty()
            || self.lr.is_empty()
            || self.l2.is_empty()
            || self.keep.is_empty()
            || self.batch_size.is_empty()
            || self.lambda.is_empty();
        if empty {
            return Err(Error::Config("every search dimension needs at least one value".into()));
        }
        Ok(())
    }

    /// One uniform draw per dimension; non-searched fields come from `base`.
    pub fn sample(&self, base: &DqnHyper, rng: &mut ChaCha8Rng) -> DqnHyper {
        DqnHyper {
            representation_layers: *self.representation_layers.choose(rng).expect("validated"),
            dueling_layers: *self.dueling_layers.choose(rng).expect("validated"),
            width: *self.width.choose(rng).expect("validated"),
            lr: *self.lr.choose(rng).expect("validated"),
            l2: *self.l2.choose(rng).expect("validated"),
            keep: *self.keep.choose(rng).expect("validated"),
            batch_size: *self.batch_size.choose(rng).expect("validated"),
            lambda: *self.lambda.choose(rng).expect("validated"),
            seed: rng.random(),
            ..base.clone()
        }
    }

    pub fn contains(&self, h: &DqnHyper) -> bool {
        self.representation_layers.contains(&h.representation_layers)
            && self.dueling_layers.contains(&h.dueling_layers)
            && self.width.contains(&h.width)
            && self.lr.contains(&h.lr)
            && self.l2.contains(&h.l2)
            && self.keep.contains(&h.keep)
            && self.batch_size.contains(&h.batch_size)
            && self.lambda.contains(&h.lambda)
    }
}

/// Trains `n` policies with hyperparameters drawn from `space`, in parallel.
///
/// `experiences` were generated under `generated_under`; each draw re-weights
/// the rewards to its own λ. Results are sorted by validation gain,
/// descending; unscored policies go last.
#[allow(clippy::too_many_arguments)]
pub fn random_search(
    space: &SearchSpace,
    n: usize,
    base: &DqnHyper,
    experiences: &[Experience],
    generated_under: &RewardConfig,
    priority: PriorityConfig,
    validator: &(dyn Fn(&DuelingParams) -> Result<ValidationSummary> + Sync),
    log: &(dyn Fn(usize, &TrainLogRecord) + Sync),
) -> Result<Vec<TrainedPolicy>> {
    space.validate()?;
    if n == 0 {
        return Err(Error::Config("random search needs at least one draw".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
    let draws: Vec<DqnHyper> = (0..n).map(|_| space.sample(base, &mut rng)).collect();
    let mut trained = draws
        .par_iter()
        .enumerate()
        .map(|(i, hyper)| {
            let mut exps = experiences.to_vec();
            reweight(&mut exps, generated_under, hyper.lambda);
            let mut buffer = PrioritizedBuffer::from_experiences(exps, priority)?;
            let mut v = |net: &DuelingParams| validator(net);
            let mut l = |r: &TrainLogRecord| log(i, r);
            train_dqn(&mut buffer, hyper, Some(&mut v), &mut l)
        })
        .collect::<Result<Vec<TrainedPolicy>>>()?;
    trained.sort_by(|a, b| {
        let ga = a.validation.map_or(f64::NEG_INFINITY, |v| v.gain);
        let gb = b.validation.map_or(f64::NEG_INFINITY, |v| v.gain);
        gb.total_cmp(&ga)
    });
    Ok(trained)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_stay_in_the_grid() {
        let space = SearchSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = DqnHyper::default();
        let draws: Vec<DqnHyper> = (0..500).map(|_| space.sample(&base, &mut rng)).collect();
        assert!(draws.iter().all(|h| space.contains(h)));
        let lambdas: std::collections::BTreeSet<u64> = draws.iter().map(|h| h.lambda.to_bits()).collect();
        assert_eq!(lambdas.len(), 5);
        let mut again = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(space.sample(&base, &mut again), draws[0]);
    }
}
