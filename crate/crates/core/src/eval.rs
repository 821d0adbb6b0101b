//! Baseline policies, online rollouts in the simulator, Pareto frontiers and
//! per-measurement action frequencies.

use rand::seq::index::sample;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{ActionSet, DecisionContext, Policy};
use crate::data::{PatientTrajectory, Slot};
use crate::error::{Error, Result};
use crate::forecast::ForecastModel;
use crate::replay::{info_gain, RewardConfig};
use crate::sim::{sample_latent, stream_rng, SimConfig};

/// Never measures.
#[derive(Clone, Copy, Debug, Default)]
pub struct AlwaysStop;

impl Policy for AlwaysStop {
    fn name(&self) -> String {
        "always_stop".into()
    }

    fn choose(&self, ctx: &DecisionContext<'_>, _rng: &mut dyn RngCore) -> Result<ActionSet> {
        ActionSet::closed(ctx.n_features, [])
    }
}

/// Measures every feature at every timepoint.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeasureAll;

impl Policy for MeasureAll {
    fn name(&self) -> String {
        "measure_all".into()
    }

    fn choose(&self, ctx: &DecisionContext<'_>, _rng: &mut dyn RngCore) -> Result<ActionSet> {
        ActionSet::closed(ctx.n_features, 0..ctx.n_features)
    }
}

/// Replays the logged measurements.
#[derive(Clone, Copy, Debug, Default)]
pub struct LoggedPolicy;

impl Policy for LoggedPolicy {
    fn name(&self) -> String {
        "logged".into()
    }

    fn choose(&self, ctx: &DecisionContext<'_>, _rng: &mut dyn RngCore) -> Result<ActionSet> {
        let logged = ctx
            .logged
            .ok_or_else(|| Error::State("the logged policy needs logged actions".into()))?;
        ActionSet::closed(ctx.n_features, logged.measurements())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    All,
    Informative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomPolicyConfig {
    /// Measurements per timepoint. A fractional part is taken as the
    /// probability of one extra measurement, which gives any mean rate.
    pub x: f64,
    pub pool: Pool,
}

/// Uniformly random distinct measurements from a pool, then Ω.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomPolicy {
    pub x: f64,
    pub pool: Vec<usize>,
    pub label: String,
}

/// Builds a random policy; `informative` lists the informative features.
pub fn random_policy(cfg: &RandomPolicyConfig, n_features: usize, informative: &[usize]) -> Result<RandomPolicy> {
    let pool: Vec<usize> = match cfg.pool {
        Pool::All => (0..n_features).collect(),
        Pool::Informative => informative.to_vec(),
    };
    if !(cfg.x >= 0.0) || cfg.x > pool.len() as f64 {
        return Err(Error::Config(format!(
            "cannot draw {} measurements from a pool of {}",
            cfg.x,
            pool.len()
        )));
    }
    let name = match cfg.pool {
        Pool::All => "random",
        Pool::Informative => "random_informative",
    };
    Ok(RandomPolicy {
        x: cfg.x,
        label: format!("{name}_x{}", cfg.x),
        pool,
    })
}

impl Policy for RandomPolicy {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn choose(&self, ctx: &DecisionContext<'_>, rng: &mut dyn RngCore) -> Result<ActionSet> {
        let base = self.x.floor();
        let frac = self.x - base;
        let mut n = base as usize;
        if frac > 0.0 && rng.random::<f64>() < frac {
            n += 1;
        }
        let n = n.min(self.pool.len());
        let picks = sample(rng, self.pool.len(), n);
        ActionSet::closed(ctx.n_features, picks.iter().map(|i| self.pool[i]))
    }
}

/// Aggregates of an online evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineMetrics {
    pub policy: String,
    pub n_trajectories: usize,
    /// Mean measurements per trajectory.
    pub action_freq: f64,
    /// Mean measurements per timepoint.
    pub action_freq_per_step: f64,
    /// Mean over critical-state timepoints of the probability with the
    /// policy's measurements minus the probability with none.
    pub disease_gain: f64,
    /// Mean per trajectory of `Σ γ^t g(p(q_t, t+1) − p(q_{t-1}, t))`.
    pub g_online: f64,
    /// Mean selections of each measurement per trajectory.
    pub per_action: Vec<f64>,
    /// Mean selections of each measurement per timepoint.
    pub per_action_per_step: Vec<f64>,
}

#[derive(Default)]
struct RolloutTally {
    steps: usize,
    measurements: usize,
    disease_points: usize,
    disease_gain: f64,
    g: f64,
    per_action: Vec<usize>,
}

fn rollout_one(
    sim: &SimConfig,
    policy: &dyn Policy,
    model: &dyn ForecastModel,
    reward: &RewardConfig,
    seed: u64,
    index: usize,
) -> Result<RolloutTally> {
    let k = sim.n_features;
    let latent = sample_latent(&mut stream_rng(seed, index as u64), sim);
    let mut policy_rng = stream_rng(seed ^ 0x0b5e_47ed, index as u64);
    let label = latent.terminal_time.is_some();
    let empty = Slot::empty(k);
    let mut carry = model.initial(&[]);
    let mut blind = model.initial(&[]);
    let mut tally = RolloutTally {
        per_action: vec![0; k],
        ..RolloutTally::default()
    };
    let mut current = model.peek(&carry, &empty);
    let mut discount = 1.0;
    for t in 0..latent.len() {
        let ctx = DecisionContext {
            hidden: &current.hidden,
            n_features: k,
            logged: None,
        };
        let chosen = policy.choose(&ctx, &mut policy_rng)?;
        let mut slot = Slot::empty(k);
        for a in chosen.measurements() {
            slot.reveal(a, latent.values[t][a]);
            tally.per_action[a] += 1;
        }
        tally.measurements += chosen.measurement_count();
        tally.steps += 1;
        if latent.states[t] == 1 {
            tally.disease_points += 1;
            tally.disease_gain += model.peek_prob(&carry, &slot) - model.peek_prob(&blind, &empty);
        }
        carry = model.advance(&carry, &slot);
        blind = model.advance(&blind, &empty);
        let next = model.peek(&carry, &empty);
        if t + 1 < latent.len() {
            tally.g += discount * info_gain(next.prob - current.prob, label);
            discount *= reward.gamma;
        }
        current = next;
    }
    Ok(tally)
}

/// Runs `policy` on `n` fresh simulated trajectories. Trajectory `i` is
/// drawn from stream `i` of `seed`, so every policy sees the same cohort.
pub fn online_rollout(
    sim: &SimConfig,
    policy: &dyn Policy,
    model: &dyn ForecastModel,
    reward: &RewardConfig,
    n: usize,
    seed: u64,
) -> Result<OnlineMetrics> {
    sim.validate()?;
    if n == 0 {
        return Err(Error::Config("online rollout needs at least one trajectory".into()));
    }
    if model.n_features() != sim.n_features {
        return Err(Error::Shape("forecaster and simulator disagree on feature count".into()));
    }
    let tallies = (0..n)
        .into_par_iter()
        .map(|i| rollout_one(sim, policy, model, reward, seed, i))
        .collect::<Result<Vec<RolloutTally>>>()?;
    let k = sim.n_features;
    let steps: usize = tallies.iter().map(|t| t.steps).sum();
    let measurements: usize = tallies.iter().map(|t| t.measurements).sum();
    let disease_points: usize = tallies.iter().map(|t| t.disease_points).sum();
    let disease_gain: f64 = tallies.iter().map(|t| t.disease_gain).sum();
    let g: f64 = tallies.iter().map(|t| t.g).sum();
    let per_action: Vec<usize> = (0..k).map(|a| tallies.iter().map(|t| t.per_action[a]).sum()).collect();
    let nf = n as f64;
    Ok(OnlineMetrics {
        policy: policy.name(),
        n_trajectories: n,
        action_freq: measurements as f64 / nf,
        action_freq_per_step: measurements as f64 / steps.max(1) as f64,
        disease_gain: if disease_points > 0 {
            disease_gain / disease_points as f64
        } else {
            0.0
        },
        g_online: g / nf,
        per_action: per_action.iter().map(|&c| c as f64 / nf).collect(),
        per_action_per_step: per_action.iter().map(|&c| c as f64 / steps.max(1) as f64).collect(),
    })
}

/// Points not dominated by another with lower-or-equal cost and
/// higher-or-equal gain (one strictly), deduplicated, sorted by cost.
pub fn pareto_frontier(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.dedup();
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut best_gain = f64::NEG_INFINITY;
    for (c, g) in pts {
        if g > best_gain {
            out.push((c, g));
            best_gain = g;
        }
    }
    out
}

/// Per-measurement selection frequencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionFrequency {
    pub policy: String,
    /// Selections of each measurement per timepoint.
    pub per_step: Vec<f64>,
    /// Selections of each measurement per trajectory.
    pub per_trajectory: Vec<f64>,
}

/// Frequencies of `policy` over every timepoint of logged patients, with
/// the logged actions available to the policy.
pub fn action_frequency_report(
    policy: &dyn Policy,
    model: &dyn ForecastModel,
    patients: &[PatientTrajectory],
    seed: u64,
) -> Result<ActionFrequency> {
    let k = model.n_features();
    let counts = patients
        .par_iter()
        .enumerate()
        .map(|(i, p)| -> Result<(Vec<usize>, usize)> {
            let mut rng = stream_rng(seed, i as u64);
            let empty = Slot::empty(k);
            let mut carry = model.initial(&p.statics);
            let mut c = vec![0usize; k];
            for t in 0..p.len() {
                let hidden = model.peek(&carry, &empty).hidden;
                let logged = ActionSet::closed(k, p.observed_at(t))?;
                let ctx = DecisionContext {
                    hidden: &hidden,
                    n_features: k,
                    logged: Some(&logged),
                };
                for a in policy.choose(&ctx, &mut rng)?.measurements() {
                    c[a] += 1;
                }
                carry = model.advance(&carry, &p.slot(t));
            }
            Ok((c, p.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let steps: usize = counts.iter().map(|(_, n)| n).sum();
    let total: Vec<usize> = (0..k).map(|a| counts.iter().map(|(c, _)| c[a]).sum()).collect();
    Ok(ActionFrequency {
        policy: policy.name(),
        per_step: total.iter().map(|&c| c as f64 / steps.max(1) as f64).collect(),
        per_trajectory: total.iter().map(|&c| c as f64 / patients.len().max(1) as f64).collect(),
    })
}

impl From<&OnlineMetrics> for ActionFrequency {
    fn from(m: &OnlineMetrics) -> Self {
        Self {
            policy: m.policy.clone(),
            per_step: m.per_action_per_step.clone(),
            per_trajectory: m.per_action.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::forecast::{designed_predict, DesignedClassifier};

    fn ctx(k: usize) -> DecisionContext<'static> {
        DecisionContext {
            hidden: &[],
            n_features: k,
            logged: None,
        }
    }

    #[test]
    fn random_policy_examples() {
        let info = [0, 1, 2, 3, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all = random_policy(&RandomPolicyConfig { x: 10.0, pool: Pool::All }, 10, &info).unwrap();
        for _ in 0..20 {
            let a = all.choose(&ctx(10), &mut rng).unwrap();
            assert_eq!(a.measurement_count(), 10);
            assert!(a.is_closed());
        }
        let one = random_policy(&RandomPolicyConfig { x: 1.0, pool: Pool::Informative }, 10, &info).unwrap();
        for _ in 0..50 {
            let a = one.choose(&ctx(10), &mut rng).unwrap();
            assert_eq!(a.measurement_count(), 1);
            assert!(a.measurements().all(|m| m < 5));
        }
        let six = random_policy(&RandomPolicyConfig { x: 6.0, pool: Pool::Informative }, 10, &info);
        assert!(matches!(six, Err(Error::Config(_))));
    }

    #[test]
    fn fractional_rate_hits_the_mean() {
        let info = [0, 1, 2, 3, 4];
        let p = random_policy(&RandomPolicyConfig { x: 1.3, pool: Pool::Informative }, 10, &info).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 20_000;
        let total: usize = (0..n).map(|_| p.choose(&ctx(10), &mut rng).unwrap().measurement_count()).sum();
        assert!((total as f64 / n as f64 - 1.3).abs() < 0.02);
    }

    #[test]
    fn frontier_examples() {
        assert_eq!(pareto_frontier(&[(1.0, 0.5), (2.0, 0.4)]), vec![(1.0, 0.5)]);
        assert_eq!(pareto_frontier(&[(1.0, 0.3), (2.0, 0.5)]), vec![(1.0, 0.3), (2.0, 0.5)]);
        assert_eq!(pareto_frontier(&[(1.0, 0.3), (1.0, 0.3)]), vec![(1.0, 0.3)]);
        assert_eq!(pareto_frontier(&[(1.0, 0.3), (1.0, 0.4)]), vec![(1.0, 0.4)]);
        assert!(pareto_frontier(&[]).is_empty());
    }

    #[test]
    fn always_stop_rollout_is_flat() {
        let sim = SimConfig::default();
        let model = DesignedClassifier::new(0.9).unwrap();
        let m = online_rollout(&sim, &AlwaysStop, &model, &RewardConfig::default(), 50, 3).unwrap();
        assert_eq!(m.action_freq, 0.0);
        assert_eq!(m.disease_gain, 0.0);
        assert_eq!(m.g_online, 0.0);
        assert!(m.per_action.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn measure_all_noiseless_gain_matches_closed_form() {
        let sim = SimConfig {
            noise_std: 0.0,
            ..SimConfig::default()
        };
        let model = DesignedClassifier::new(0.9).unwrap();
        let reward = RewardConfig::default();
        let n = 200;
        let m = online_rollout(&sim, &MeasureAll, &model, &reward, n, 11).unwrap();
        // Closed form: full window of ±1 informative values vs the all-zero window.
        let mut sum = 0.0;
        let mut points = 0;
        for i in 0..n {
            let latent = sample_latent(&mut stream_rng(11, i as u64), &sim);
            for t in 0..latent.len() {
                if latent.states[t] != 1 {
                    continue;
                }
                let mut w = vec![vec![0.0; 10]; 5];
                for d in 0..5.min(t + 1) {
                    w[4 - d] = latent.values[t - d].clone();
                }
                sum += designed_predict(&w, 0.9).unwrap() - 0.5;
                points += 1;
            }
        }
        assert!(points > 0);
        assert!((m.disease_gain - sum / points as f64).abs() < 1e-12);
        assert!((m.action_freq_per_step - 10.0).abs() < 1e-12);
        let total: f64 = m.per_action.iter().sum();
        assert!((total - m.action_freq).abs() < 1e-9);
    }

    #[test]
    fn frequency_reports() {
        let sim = SimConfig::default();
        let ds = crate::sim::gen_dataset(&sim, 40, 5).unwrap();
        let model = DesignedClassifier::new(0.9).unwrap();
        let stop = action_frequency_report(&AlwaysStop, &model, &ds.patients, 0).unwrap();
        assert!(stop.per_step.iter().all(|&f| f == 0.0));
        let all = action_frequency_report(&MeasureAll, &model, &ds.patients, 0).unwrap();
        assert!(all.per_step.iter().all(|&f| f == 1.0));
        let logged = action_frequency_report(&LoggedPolicy, &model, &ds.patients, 0).unwrap();
        let steps: usize = ds.patients.iter().map(|p| p.len()).sum();
        for k in 0..10 {
            let count: usize = ds
                .patients
                .iter()
                .map(|p| p.observed.iter().filter(|o| o[k]).count())
                .sum();
            assert_eq!(logged.per_step[k], count as f64 / steps as f64);
        }
    }

    #[test]
    fn rollout_is_deterministic() {
        let sim = SimConfig::default();
        let model = DesignedClassifier::new(0.9).unwrap();
        let p = random_policy(&RandomPolicyConfig { x: 2.0, pool: Pool::All }, 10, &[0, 1, 2, 3, 4]).unwrap();
        let a = online_rollout(&sim, &p, &model, &RewardConfig::default(), 64, 9).unwrap();
        let b = online_rollout(&sim, &p, &model, &RewardConfig::default(), 64, 9).unwrap();
        assert_eq!(a, b);
    }
}
