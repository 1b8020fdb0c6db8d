//! The nested run document shared by every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, PatchConfig};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::eval::BenchConfig;
use crate::policy::{PolicyConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub episodes: usize,
    pub max_steps: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            episodes: 150,
            max_steps: 200,
        }
    }
}

/// Dataset-level PGD settings shared by the offline perturbation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfflineConfig {
    pub epochs: usize,
    pub batch: usize,
    pub alpha: f64,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 64,
            alpha: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub policy: PathBuf,
    pub artifacts: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: "runs/dataset.dpab".into(),
            policy: "runs/policy.dpab".into(),
            artifacts: "runs/artifacts".into(),
            reports: "runs/reports".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stream derives from it.
    pub seed: u64,
    pub env: EnvConfig,
    pub data: DataConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    /// Online attack settings.
    pub attack: AttackConfig,
    pub offline: OfflineConfig,
    pub patch: PatchConfig,
    pub eval: BenchConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Strict JSON parsing: unknown keys are errors.
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Hex prefix of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        content_hash(self)
    }
}

/// 16 hex digits of the SHA-256 of `value`'s JSON encoding.
pub fn content_hash<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
}
