//! Trajectory and dataset types shared by the simulator, ingestion and the
//! learning pipeline.

use serde::{Deserialize, Serialize};

use crate::sim::SimConfig;

/// One patient's gridded measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientTrajectory {
    pub id: String,
    /// `T × K` values; unobserved entries hold 0.
    pub values: Vec<Vec<f64>>,
    /// `T × K` observation mask.
    pub observed: Vec<Vec<bool>>,
    /// Latent health state per timepoint, when known (simulation only).
    pub states: Option<Vec<u8>>,
    /// First index completing the terminal run, when the event occurred.
    pub terminal_time: Option<usize>,
    pub label: bool,
    pub statics: Vec<f64>,
}

impl PatientTrajectory {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Indices of the features observed at `t`.
    pub fn observed_at(&self, t: usize) -> Vec<usize> {
        self.observed[t]
            .iter()
            .enumerate()
            .filter_map(|(k, &o)| o.then_some(k))
            .collect()
    }

    pub fn slot(&self, t: usize) -> Slot {
        Slot {
            values: self.values[t].clone(),
            observed: self.observed[t].clone(),
        }
    }

    pub fn measurement_count(&self) -> usize {
        self.observed.iter().flatten().filter(|o| **o).count()
    }
}

/// Observations at one grid time. Unobserved entries hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
}

impl Slot {
    pub fn empty(n_features: usize) -> Self {
        Self {
            values: vec![0.0; n_features],
            observed: vec![false; n_features],
        }
    }

    /// Reveal feature `k` with value `v`.
    pub fn reveal(&mut self, k: usize, v: f64) {
        self.values[k] = v;
        self.observed[k] = true;
    }

    /// Copy of `self` keeping only the features in `keep`.
    pub fn restricted(&self, keep: &[usize]) -> Self {
        let mut s = Self::empty(self.values.len());
        for &k in keep {
            if self.observed[k] {
                s.reveal(k, self.values[k]);
            }
        }
        s
    }

    pub fn count(&self) -> usize {
        self.observed.iter().filter(|o| **o).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Per-feature z-scoring statistics computed on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Simulation(SimConfig),
    Ingested { interval_minutes: u32, slots: usize },
}

/// An ordered cohort with split assignments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub static_names: Vec<String>,
    pub patients: Vec<PatientTrajectory>,
    pub splits: Vec<Split>,
    pub seed: u64,
    pub config_hash: String,
    pub provenance: Provenance,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &PatientTrajectory> {
        self.patients
            .iter()
            .zip(&self.splits)
            .filter(move |(_, s)| **s == split)
            .map(|(p, _)| p)
    }

    /// A dataset holding only `split`'s patients, all tagged with `split`.
    pub fn subset(&self, split: Split) -> Dataset {
        let patients: Vec<_> = self.in_split(split).cloned().collect();
        Dataset {
            splits: vec![split; patients.len()],
            patients,
            ..self.clone_header()
        }
    }

    /// Same metadata with no patients.
    pub fn clone_header(&self) -> Dataset {
        Dataset {
            feature_names: self.feature_names.clone(),
            static_names: self.static_names.clone(),
            patients: Vec::new(),
            splits: Vec::new(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            provenance: self.provenance.clone(),
            standardization: self.standardization.clone(),
        }
    }

    pub fn label_rate(&self) -> f64 {
        if self.patients.is_empty() {
            return 0.0;
        }
        self.patients.iter().filter(|p| p.label).count() as f64 / self.patients.len() as f64
    }
}

/// Deterministic 70/15/15 assignment of `n` items from `seed`.
pub fn default_splits(n: usize, seed: u64) -> Vec<Split> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5b1e);
    order.shuffle(&mut rng);
    let n_train = (n as f64 * 0.70).round() as usize;
    let n_val = (n as f64 * 0.15).round() as usize;
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    splits
}
