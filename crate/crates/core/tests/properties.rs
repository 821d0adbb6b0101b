use std::sync::Arc;

use measched::agent::{masked_argmax, run_policy, ActionSet, QFunction};
use measched::error::Result;
use measched::eval::pareto_frontier;
use measched::forecast::{DesignedClassifier, ForecastModel};
use measched::replay::{info_gain, measurement_experiences, PrioritizedBuffer, PriorityConfig, RewardConfig, SumTree};
use measched::{Experience, Slot};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Linear Q over the assembled state, optionally pushed through `a·q + b`.
struct LinearQ {
    weights: Vec<Vec<f64>>,
    scale: f64,
    shift: f64,
}

impl QFunction for LinearQ {
    fn input_dim(&self) -> usize {
        self.weights[0].len()
    }

    fn n_actions(&self) -> usize {
        self.weights.len()
    }

    fn q(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .weights
            .iter()
            .map(|w| self.scale * w.iter().zip(state).map(|(a, b)| a * b).sum::<f64>() + self.shift)
            .collect())
    }
}

fn linear_q(k: usize, h_dim: usize, seed: u64) -> LinearQ {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = (0..=k)
        .map(|_| (0..h_dim + k + 1).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    LinearQ {
        weights,
        scale: 1.0,
        shift: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn run_policy_terminates_without_duplicates(k in 1usize..12, seed in any::<u64>(), h in prop::collection::vec(-3.0f64..3.0, 4)) {
        let net = linear_q(k, h.len(), seed);
        let set = run_policy(&net, &h).unwrap();
        prop_assert!(set.is_closed());
        prop_assert!(set.measurement_count() <= k);
        let idx: Vec<usize> = set.indices().collect();
        let mut dedup = idx.clone();
        dedup.dedup();
        prop_assert_eq!(idx, dedup);
    }

    #[test]
    fn run_policy_affine_invariant(k in 1usize..10, seed in any::<u64>(), a in 0.1f64..10.0, b in -5.0f64..5.0,
                                   h in prop::collection::vec(-3.0f64..3.0, 3)) {
        let base = linear_q(k, h.len(), seed);
        let moved = LinearQ { scale: a, shift: b, weights: base.weights.clone() };
        prop_assert_eq!(run_policy(&base, &h).unwrap(), run_policy(&moved, &h).unwrap());
    }

    #[test]
    fn masked_argmax_prefers_lowest_index_on_ties(k in 1usize..20, taken in prop::collection::vec(any::<bool>(), 20)) {
        let q = vec![1.0; k + 1];
        let set = ActionSet::from_indices(k, (0..k).filter(|&i| taken[i])).unwrap();
        let expect = (0..=k).find(|&i| !set.contains(i));
        prop_assert_eq!(masked_argmax(&q, &set), expect);
    }

    #[test]
    fn action_set_json_round_trip(k in 1usize..127, picks in prop::collection::vec(0usize..127, 0..20)) {
        let set = ActionSet::from_indices(k, picks.into_iter().filter(|&i| i <= k)).unwrap();
        let text = serde_json::to_string(&set).unwrap();
        prop_assert_eq!(serde_json::from_str::<ActionSet>(&text).unwrap(), set);
    }

    #[test]
    fn sum_tree_root_equals_leaf_sum(cap in 1usize..200, ops in prop::collection::vec((0usize..200, 0.0f64..10.0), 1..300)) {
        let mut tree = SumTree::new(cap);
        let mut shadow = vec![0.0; cap];
        for (i, v) in ops {
            let i = i % cap;
            tree.set(i, v);
            shadow[i] = v;
        }
        let direct: f64 = shadow.iter().sum();
        prop_assert!((tree.total() - direct).abs() <= 1e-9 * direct.max(1.0));
        prop_assert!((tree.total() - tree.leaf_sum()).abs() <= 1e-9 * direct.max(1.0));
    }

    #[test]
    fn sum_tree_find_lands_in_interval(prios in prop::collection::vec(0.0f64..5.0, 1..64), u in 0.0f64..1.0) {
        let mut tree = SumTree::new(prios.len());
        for (i, &p) in prios.iter().enumerate() {
            tree.set(i, p);
        }
        prop_assume!(tree.total() > 0.0);
        let mass = u * tree.total();
        let i = tree.find(mass);
        prop_assert!(i < prios.len());
        prop_assert!(prios[i] > 0.0);
        let before: f64 = prios[..i].iter().sum();
        prop_assert!(before <= mass + 1e-9);
        prop_assert!(mass <= before + prios[i] + 1e-9);
    }

    #[test]
    fn importance_weights_peak_at_one(n in 1usize..60, batch in 1usize..40, seed in any::<u64>(),
                                      tds in prop::collection::vec(0.0f64..3.0, 60)) {
        let h: Arc<[f64]> = Arc::from(vec![0.0]);
        let e = Experience {
            h: h.clone(),
            m: ActionSet::empty(1),
            h_next: h,
            m_next: ActionSet::empty(1),
            action: 1,
            reward: 0.0,
            gamma: 1.0,
            terminal: true,
        };
        let mut buf = PrioritizedBuffer::from_experiences(vec![e; n], PriorityConfig::default()).unwrap();
        let idx: Vec<usize> = (0..n).collect();
        buf.update(&idx, &tds[..n]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = buf.sample(batch, &mut rng).unwrap();
        prop_assert!(s.indices.iter().all(|&i| i < n));
        let max = s.weights.iter().cloned().fold(0.0, f64::max);
        prop_assert!((max - 1.0).abs() < 1e-12);
        prop_assert!(s.weights.iter().all(|&w| w > 0.0 && w <= 1.0 + 1e-12));
    }

    #[test]
    fn measurement_rewards_telescope(values in prop::collection::vec(-2.0f64..2.0, 10), mask in prop::collection::vec(any::<bool>(), 10),
                                     history in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 10), 0..6),
                                     label in any::<bool>(), lambda in 0.0f64..0.1, seed in any::<u64>()) {
        let model = DesignedClassifier::new(0.9).unwrap();
        let mut carry = model.initial(&[]);
        for row in &history {
            carry = model.advance(&carry, &Slot { values: row.clone(), observed: vec![true; 10] });
        }
        let slot = Slot {
            values: values.iter().zip(&mask).map(|(v, &m)| if m { *v } else { 0.0 }).collect(),
            observed: mask.clone(),
        };
        let observed: Vec<usize> = (0..10).filter(|&k| mask[k]).collect();
        let h: Arc<[f64]> = model.peek(&carry, &Slot::empty(10)).hidden.into();
        let cfg = RewardConfig { lambda, ..RewardConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let orders = measched::replay::reveal_orders(&observed, 6, &mut rng);
        let exps = measurement_experiences(&model, &carry, &h, &slot, label, &cfg, &orders);
        let expected = info_gain(model.peek_prob(&carry, &slot) - model.peek_prob(&carry, &Slot::empty(10)), label)
            - lambda * observed.len() as f64;
        let per = observed.len();
        for chunk in exps.chunks(per.max(1)) {
            if per == 0 { break; }
            let total: f64 = chunk.iter().map(|e| e.reward).sum();
            prop_assert!((total - expected).abs() < 1e-12, "{total} vs {expected}");
        }
    }

    #[test]
    fn frontier_is_undominated_and_covers(points in prop::collection::vec((0.0f64..10.0, -5.0f64..5.0), 1..40)) {
        let front = pareto_frontier(&points);
        prop_assert!(!front.is_empty());
        for w in front.windows(2) {
            prop_assert!(w[0].0 < w[1].0 && w[0].1 < w[1].1);
        }
        for &(c, g) in &points {
            prop_assert!(front.iter().any(|&(fc, fg)| fc <= c && fg >= g));
        }
    }
}
