use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use measched::dataio::{load_json, save_json, ArtifactMeta};
use measched::util::sha256_hex;
use measched::Result;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub stage: String,
    pub kind: String,
    pub sha256: String,
    pub seed: u64,
    pub config_hash: String,
}

/// Every artifact in an output directory, keyed by relative path.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: BTreeMap<String, Entry>,
}

impl Manifest {
    pub fn load_or_default(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(Self::default());
        }
        Ok(load_json::<Manifest>(&path, "manifest")?.1)
    }

    pub fn record(&mut self, dir: &Path, name: &str, stage: &str, kind: &str, seed: u64, config_hash: &str) -> Result<()> {
        let bytes = fs::read(dir.join(name))?;
        self.artifacts.insert(
            name.to_string(),
            Entry {
                stage: stage.to_string(),
                kind: kind.to_string(),
                sha256: sha256_hex(&bytes),
                seed,
                config_hash: config_hash.to_string(),
            },
        );
        Ok(())
    }

    pub fn save(&self, dir: &Path, seed: u64, config_hash: &str) -> Result<()> {
        save_json(&dir.join(MANIFEST), &ArtifactMeta::new("manifest", seed, config_hash), self)
    }
}
