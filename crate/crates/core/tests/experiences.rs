use measched::forecast::{DesignedClassifier, ForecastModel};
use measched::replay::{experiences_with_orders, info_gain, RewardConfig};
use measched::sim::gen_dataset;
use measched::{SimConfig, Slot};

/// Following one logged order through every timepoint, the undiscounted
/// rewards telescope to the label-signed change between the empty-history
/// prior and the final prediction, minus the cost of every measurement.
#[test]
fn logged_chain_return_telescopes_over_a_trajectory() {
    let ds = gen_dataset(&SimConfig::default(), 40, 5).unwrap();
    let model = DesignedClassifier::new(0.9).unwrap();
    let cfg = RewardConfig {
        lambda: 0.01,
        gamma: 1.0,
        ..RewardConfig::default()
    };
    for p in &ds.patients {
        let orders: Vec<Vec<usize>> = (0..p.len()).map(|t| p.observed_at(t).into_iter().rev().collect()).collect();
        let exps = experiences_with_orders(&model, p, &cfg, &orders);
        assert_eq!(exps.len(), p.len() + p.measurement_count());
        assert!(exps.last().unwrap().terminal);
        assert_eq!(exps.iter().filter(|e| e.terminal).count(), 1);
        let total: f64 = exps.iter().map(|e| e.reward).sum();
        let mut carry = model.initial(&[]);
        let p0 = model.peek_prob(&carry, &Slot::empty(10));
        for t in 0..p.len() {
            carry = model.advance(&carry, &p.slot(t));
        }
        let p_end = model.peek_prob(&carry, &Slot::empty(10));
        let expected = info_gain(p_end - p0, p.label) - 0.01 * p.measurement_count() as f64;
        assert!((total - expected).abs() < 1e-9, "{total} vs {expected}");
        // Consecutive experiences chain: each next state is the following source state.
        for w in exps.windows(2) {
            if !w[0].terminal {
                assert_eq!(&*w[0].h_next, &*w[1].h);
                assert_eq!(w[0].m_next, w[1].m);
            }
        }
    }
}
