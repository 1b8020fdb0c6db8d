//! Expert demonstrations recorded as 8-bit frames, agent states and actions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::render::{render, to_u8};
use super::{reset, score_episode, scripted_expert, step, EnvConfig, ACTION_DIM, AGENT_STATE_DIM};
use crate::error::{Error, Result};
use crate::io::{Container, Payload};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `len × 3 × S × S`; frame `t` shows the state before action `t`.
    pub frames: Vec<u8>,
    pub states: Vec<[f32; AGENT_STATE_DIM]>,
    pub actions: Vec<[f32; ACTION_DIM]>,
    pub env_seed: u64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn frame(&self, t: usize, image_size: usize) -> &[u8] {
        let n = 3 * image_size * image_size;
        &self.frames[t * n..(t + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub env: EnvConfig,
    pub env_hash: String,
    pub seed: u64,
    pub max_steps: usize,
    pub episodes: usize,
    pub attempts: usize,
    pub lengths: Vec<usize>,
    pub env_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoDataset {
    pub meta: DatasetMeta,
    pub episodes: Vec<Episode>,
}

/// Runs the expert from one reset; `Some` only if it reaches the success threshold.
fn record(cfg: &EnvConfig, env_seed: u64, max_steps: usize) -> Option<Episode> {
    let mut s = reset(cfg, env_seed);
    let mut ep = Episode {
        frames: Vec::new(),
        states: Vec::new(),
        actions: Vec::new(),
        env_seed,
    };
    let mut cov = Vec::new();
    for _ in 0..max_steps {
        ep.frames.extend(to_u8(&render(cfg, &s, None)));
        ep.states.push(s.agent_state().map(|v| v as f32));
        let a = scripted_expert(cfg, &s);
        ep.actions.push(a.map(|v| v as f32));
        let r = step(cfg, &s, a);
        s = r.0;
        cov.push(r.1);
        if score_episode(cfg, &cov).1 {
            return Some(ep);
        }
    }
    None
}

/// Collects `n_episodes` successful expert episodes. Attempts use seeds derived
/// from `seed`; failed attempts are discarded. Fails once more than 20% of
/// attempts have failed.
pub fn generate_dataset(cfg: &EnvConfig, n_episodes: usize, max_steps: usize, seed: u64) -> Result<DemoDataset> {
    if n_episodes == 0 {
        return Err(Error::usage("n_episodes must be positive"));
    }
    let mut episodes = Vec::with_capacity(n_episodes);
    let mut attempts = 0usize;
    let mut failures = 0usize;
    while episodes.len() < n_episodes {
        let env_seed = seed::derive(seed, seed::ENV, attempts as u64);
        attempts += 1;
        match record(cfg, env_seed, max_steps) {
            Some(ep) => episodes.push(ep),
            None => {
                failures += 1;
                // failures / (n + failures) > 0.2 is now unavoidable.
                if failures * 4 > n_episodes {
                    return Err(Error::Generation(format!(
                        "expert failed {failures} of {attempts} attempts (limit 20%)"
                    )));
                }
            }
        }
    }
    let meta = DatasetMeta {
        env: cfg.clone(),
        env_hash: cfg.hash(),
        seed,
        max_steps,
        episodes: episodes.len(),
        attempts,
        lengths: episodes.iter().map(Episode::len).collect(),
        env_seeds: episodes.iter().map(|e| e.env_seed).collect(),
    };
    Ok(DemoDataset { meta, episodes })
}

impl DemoDataset {
    pub fn image_size(&self) -> usize {
        self.meta.env.image_size
    }

    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut meta = serde_json::to_value(&self.meta)?;
        meta["kind"] = "dataset".into();
        let mut c = Container::new(meta);
        let s = self.image_size();
        for (i, ep) in self.episodes.iter().enumerate() {
            let t = ep.len();
            c.push(format!("ep{i}/frames"), vec![t, 3, s, s], Payload::U8(ep.frames.clone()))?;
            c.push(
                format!("ep{i}/states"),
                vec![t, AGENT_STATE_DIM],
                Payload::F32(ep.states.iter().flatten().copied().collect()),
            )?;
            c.push(
                format!("ep{i}/actions"),
                vec![t, ACTION_DIM],
                Payload::F32(ep.actions.iter().flatten().copied().collect()),
            )?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.metadata.get("kind").and_then(|k| k.as_str()) != Some("dataset") {
            return Err(Error::Format("container is not a dataset".into()));
        }
        let mut meta = c.metadata.clone();
        if let Some(m) = meta.as_object_mut() {
            m.remove("kind");
            m.remove("run");
        }
        let meta: DatasetMeta = serde_json::from_value(meta)?;
        if meta.lengths.len() != meta.episodes || meta.env_seeds.len() != meta.episodes {
            return Err(Error::Format("dataset metadata counts disagree".into()));
        }
        let s = meta.env.image_size;
        let mut episodes = Vec::with_capacity(meta.episodes);
        for i in 0..meta.episodes {
            let t = meta.lengths[i];
            let frames = c.bytes(&format!("ep{i}/frames"))?;
            let states = c.f32s(&format!("ep{i}/states"))?;
            let actions = c.f32s(&format!("ep{i}/actions"))?;
            if frames.len() != t * 3 * s * s || states.len() != t * AGENT_STATE_DIM || actions.len() != t * ACTION_DIM {
                return Err(Error::Format(format!("episode {i} has inconsistent lengths")));
            }
            episodes.push(Episode {
                frames: frames.to_vec(),
                states: states.chunks_exact(AGENT_STATE_DIM).map(|c| c.try_into().expect("4")).collect(),
                actions: actions.chunks_exact(ACTION_DIM).map(|c| c.try_into().expect("2")).collect(),
                env_seed: meta.env_seeds[i],
            });
        }
        Ok(Self { meta, episodes })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
