use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{load_json, save_json, ArtifactMeta};
use crate::agent::{ActionIndex, ActionSet};
use crate::error::{Error, Result};
use crate::replay::{Experience, GenerationConfig, RewardConfig};

/// Experiences with the settings that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperienceFile {
    pub reward: RewardConfig,
    pub generation: GenerationConfig,
    pub experiences: Vec<Experience>,
}

/// `[h, m, h', m', a, r, γ_e, terminal]` with hidden states as indices into
/// a shared pool.
type Row = (usize, Vec<ActionIndex>, usize, Vec<ActionIndex>, ActionIndex, f64, f64, bool);

#[derive(Serialize, Deserialize)]
struct Payload {
    reward: RewardConfig,
    generation: GenerationConfig,
    n_features: usize,
    hidden_dim: usize,
    /// Little-endian f64 bytes, base64-encoded, one entry per distinct
    /// hidden state.
    hidden_pool: Vec<String>,
    experiences: Vec<Row>,
}

fn encode(h: &[f64]) -> String {
    let bytes: Vec<u8> = h.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(s: &str, dim: usize) -> Result<Arc<[f64]>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::Format(format!("bad hidden-state encoding: {e}")))?;
    if bytes.len() != dim * 8 {
        return Err(Error::Format("hidden state has the wrong length".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn save_experiences(path: &Path, meta: &ArtifactMeta, file: &ExperienceFile) -> Result<()> {
    let mut pool: Vec<String> = Vec::new();
    let mut index: HashMap<*const f64, usize> = HashMap::new();
    let mut intern = |h: &Arc<[f64]>| -> usize {
        *index.entry(h.as_ptr()).or_insert_with(|| {
            pool.push(encode(h));
            pool.len() - 1
        })
    };
    let (n_features, hidden_dim) = file
        .experiences
        .first()
        .map_or((0, 0), |e| (e.m.n_features(), e.h.len()));
    let rows: Vec<Row> = file
        .experiences
        .iter()
        .map(|e| {
            (
                intern(&e.h),
                e.m.indices().collect(),
                intern(&e.h_next),
                e.m_next.indices().collect(),
                e.action,
                e.reward,
                e.gamma,
                e.terminal,
            )
        })
        .collect();
    let payload = Payload {
        reward: file.reward.clone(),
        generation: file.generation.clone(),
        n_features,
        hidden_dim,
        hidden_pool: pool,
        experiences: rows,
    };
    save_json(path, &ArtifactMeta { kind: "experiences".into(), ..meta.clone() }, &payload)
}

pub fn load_experiences(path: &Path) -> Result<(ArtifactMeta, ExperienceFile)> {
    let (meta, p): (ArtifactMeta, Payload) = load_json(path, "experiences")?;
    let pool = p
        .hidden_pool
        .iter()
        .map(|s| decode(s, p.hidden_dim))
        .collect::<Result<Vec<_>>>()?;
    let get = |i: usize| {
        pool.get(i)
            .cloned()
            .ok_or_else(|| Error::Format(format!("hidden-state index {i} out of range")))
    };
    let k = p.n_features;
    let experiences = p
        .experiences
        .into_iter()
        .map(|(h, m, hn, mn, a, r, g, term)| {
            if a > k {
                return Err(Error::Format(format!("action {a} out of range")));
            }
            let set = |v: Vec<usize>| ActionSet::from_indices(k, v).map_err(|e| Error::Format(e.to_string()));
            Ok(Experience {
                h: get(h)?,
                m: set(m)?,
                h_next: get(hn)?,
                m_next: set(mn)?,
                action: a,
                reward: r,
                gamma: g,
                terminal: term,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        meta,
        ExperienceFile {
            reward: p.reward,
            generation: p.generation,
            experiences,
        },
    ))
}
