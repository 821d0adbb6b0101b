//! Two-state Markov cohort simulator.
//!
//! Each patient is Healthy (0) or Critical (1) at every timepoint. Informative
//! features read `±1 + noise` depending on the state, noise features read
//! pure noise, and half of all entries are then hidden. A run of
//! `terminal_run` consecutive critical states is the terminal event, and the
//! trajectory ends there.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{default_splits, Dataset, PatientTrajectory, Provenance};
use crate::error::{Error, Result};
use crate::util::config_hash;

/// Healthy→critical probability giving a 5% terminal rate with the default
/// lengths and `DEFAULT_P11` (Monte Carlo calibration, 100,000 paths).
pub const DEFAULT_P01: f64 = 0.00304;
pub const DEFAULT_P11: f64 = 0.85;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_features: usize,
    /// Zero-based indices of state-dependent features; all others are noise.
    pub informative: Vec<usize>,
    pub noise_std: f64,
    /// Row-stochastic `P[from][to]`.
    pub transition: [[f64; 2]; 2],
    pub min_len: usize,
    pub max_len: usize,
    pub missing_rate: f64,
    pub terminal_run: usize,
    /// Time decay consumed by the designed classifier.
    pub decay: f64,
    /// `(source, copy)` pairs: `copy` repeats `source`'s value exactly.
    pub twins: Vec<(usize, usize)>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_features: 10,
            informative: (0..5).collect(),
            noise_std: 0.1,
            transition: [[1.0 - DEFAULT_P01, DEFAULT_P01], [1.0 - DEFAULT_P11, DEFAULT_P11]],
            min_len: 25,
            max_len: 50,
            missing_rate: 0.5,
            terminal_run: 5,
            decay: 0.9,
            twins: Vec::new(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        for row in &self.transition {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row[0] + row[1] - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!("transition row {row:?} is not stochastic")));
            }
        }
        if !(0.0..=1.0).contains(&self.missing_rate) {
            return Err(Error::Config("missing_rate must lie in [0, 1]".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("need 1 <= min_len <= max_len".into()));
        }
        if self.terminal_run == 0 {
            return Err(Error::Config("terminal_run must be positive".into()));
        }
        if self.informative.iter().any(|&k| k >= self.n_features) {
            return Err(Error::Config("informative index out of range".into()));
        }
        if self
            .twins
            .iter()
            .any(|&(a, b)| a >= self.n_features || b >= self.n_features || a == b)
        {
            return Err(Error::Config("invalid twin pair".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }

    /// Sets `P[0][1] = p01` and `P[1][1] = p11`.
    pub fn with_transitions(mut self, p01: f64, p11: f64) -> Self {
        self.transition = [[1.0 - p01, p01], [1.0 - p11, p11]];
        self
    }

    pub fn is_informative(&self, k: usize) -> bool {
        self.informative.contains(&k)
    }

    pub fn feature_names(&self) -> Vec<String> {
        (1..=self.n_features).map(|k| format!("M{k}")).collect()
    }
}

/// A simulated patient before any values are hidden.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory {
    pub states: Vec<u8>,
    pub values: Vec<Vec<f64>>,
    pub terminal_time: Option<usize>,
}

impl LatentTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Generator stream for item `index` under `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// First `t` such that the `run` states ending at `t` are all critical.
pub fn first_terminal(states: &[u8], run: usize) -> Option<usize> {
    let mut streak = 0;
    for (t, &s) in states.iter().enumerate() {
        streak = if s == 1 { streak + 1 } else { 0 };
        if streak >= run {
            return Some(t);
        }
    }
    None
}

/// State path from Healthy, truncated at the terminal event.
pub fn sample_states(rng: &mut dyn RngCore, cfg: &SimConfig) -> (Vec<u8>, Option<usize>) {
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let mut states = Vec::with_capacity(len);
    let mut s = 0u8;
    let mut streak = 0;
    for t in 0..len {
        if t > 0 {
            let p_critical = cfg.transition[s as usize][1];
            s = u8::from(rng.random::<f64>() < p_critical);
        }
        states.push(s);
        streak = if s == 1 { streak + 1 } else { 0 };
        if streak >= cfg.terminal_run {
            return (states, Some(t));
        }
    }
    (states, None)
}

/// Measurement values for a given state path.
pub fn sample_values(rng: &mut dyn RngCore, cfg: &SimConfig, states: &[u8]) -> Vec<Vec<f64>> {
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("validated noise");
    states
        .iter()
        .map(|&s| {
            let sign = if s == 1 { 1.0 } else { -1.0 };
            let mut row: Vec<f64> = (0..cfg.n_features)
                .map(|k| {
                    let eps = if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                    if cfg.is_informative(k) {
                        sign + eps
                    } else {
                        eps
                    }
                })
                .collect();
            for &(src, copy) in &cfg.twins {
                row[copy] = row[src];
            }
            row
        })
        .collect()
}

pub fn sample_latent(rng: &mut dyn RngCore, cfg: &SimConfig) -> LatentTrajectory {
    let (states, terminal_time) = sample_states(rng, cfg);
    let values = sample_values(rng, cfg, &states);
    LatentTrajectory {
        states,
        values,
        terminal_time,
    }
}

/// Hides each entry independently with probability `cfg.missing_rate`.
pub fn apply_missingness(rng: &mut dyn RngCore, cfg: &SimConfig, latent: &LatentTrajectory, id: String) -> PatientTrajectory {
    let mut values = latent.values.clone();
    let mut observed = vec![vec![true; cfg.n_features]; latent.len()];
    for (row, obs) in values.iter_mut().zip(observed.iter_mut()) {
        for (v, o) in row.iter_mut().zip(obs.iter_mut()) {
            if rng.random::<f64>() < cfg.missing_rate {
                *v = 0.0;
                *o = false;
            }
        }
    }
    PatientTrajectory {
        id,
        values,
        observed,
        states: Some(latent.states.clone()),
        terminal_time: latent.terminal_time,
        label: latent.terminal_time.is_some(),
        statics: Vec::new(),
    }
}

pub fn gen_trajectory(rng: &mut dyn RngCore, cfg: &SimConfig) -> PatientTrajectory {
    let latent = sample_latent(rng, cfg);
    apply_missingness(rng, cfg, &latent, String::new())
}

/// `n` independent trajectories; patient `i` draws from stream `i` of `seed`,
/// so the result does not depend on thread count.
pub fn gen_dataset(cfg: &SimConfig, n: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let patients: Vec<PatientTrajectory> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let mut p = gen_trajectory(&mut rng, cfg);
            p.id = format!("p{i:06}");
            p
        })
        .collect();
    let mut sim_cfg = cfg.clone();
    sim_cfg.seed = seed;
    Ok(Dataset {
        feature_names: cfg.feature_names(),
        static_names: Vec::new(),
        splits: default_splits(n, seed),
        patients,
        seed,
        config_hash: config_hash(&sim_cfg),
        provenance: Provenance::Simulation(sim_cfg),
        standardization: None,
    })
}

/// Fraction of `n_mc` state paths reaching the terminal event, using common
/// random numbers across calls with the same `seed`.
pub fn terminal_rate(cfg: &SimConfig, n_mc: usize, seed: u64) -> f64 {
    let hits: usize = (0..n_mc)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            usize::from(sample_states(&mut rng, cfg).1.is_some())
        })
        .sum();
    hits as f64 / n_mc as f64
}

/// Allowed gap between the calibrated Monte Carlo rate and the target.
pub const CALIBRATION_TOLERANCE: f64 = 0.01;

/// Bisection over `P[0][1]` with `P[1][1]` held at its configured value so the
/// Monte Carlo terminal rate matches `target`.
pub fn calibrate_transitions(cfg: &SimConfig, target: f64, n_mc: usize, seed: u64) -> Result<[[f64; 2]; 2]> {
    if n_mc < 10_000 {
        return Err(Error::Config("calibration needs at least 10,000 Monte Carlo paths".into()));
    }
    let p11 = cfg.transition[1][1];
    let rate_at = |p01: f64| terminal_rate(&cfg.clone().with_transitions(p01, p11), n_mc, seed);
    if target <= 0.0 {
        return Ok(cfg.clone().with_transitions(0.0, p11).transition);
    }
    let max_rate = rate_at(1.0);
    if target > max_rate {
        return Err(Error::Calibration(format!(
            "target rate {target} unreachable with p11 = {p11}; achievable range is [0, {max_rate:.4}]"
        )));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if rate_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p01 = 0.5 * (lo + hi);
    let achieved = rate_at(p01);
    if (achieved - target).abs() > CALIBRATION_TOLERANCE {
        return Err(Error::Calibration(format!(
            "bisection settled at p01 = {p01} with rate {achieved}, outside {target} ± {CALIBRATION_TOLERANCE}"
        )));
    }
    Ok(cfg.clone().with_transitions(p01, p11).transition)
}
