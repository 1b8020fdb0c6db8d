use std::collections::VecDeque;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DiffusionPolicy, Observation};
use crate::diffusion::Scheduler;
use crate::env::render::{render, to_u8};
use crate::env::{coverage, reset, score_episode, step, EnvConfig, EnvState, ScenePatch};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rewrites what the policy sees at each inference.
pub trait ObservationHook<T> {
    fn observe(&mut self, policy: &DiffusionPolicy<T>, obs: &Observation<T>) -> Result<Observation<T>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub episode_len: usize,
    pub scheduler: Scheduler,
    /// End the episode as soon as the success threshold is reached.
    pub stop_on_success: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            episode_len: 200,
            scheduler: Scheduler::Ddim(8),
            stop_on_success: true,
        }
    }
}

/// Most recent `T_o` rendered frames (u8), oldest first.
pub type Frames = VecDeque<Vec<u8>>;

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutTrace {
    pub env_seed: u64,
    /// Initial state followed by the state after every step.
    pub states: Vec<EnvState>,
    /// Newest clean frame seen at each inference.
    pub observations: Vec<Vec<u8>>,
    pub actions: Vec<[f64; 2]>,
    pub coverages: Vec<f64>,
    pub score: f64,
    pub success: bool,
    /// Wall time spent inside the hook, per inference.
    pub hook_ms: Vec<f64>,
    /// Largest `|seen − clean|` over every hooked frame.
    pub max_perturbation: f64,
    /// Hooked pixel values outside `[0, 1]`.
    pub range_violations: usize,
    pub hooked_frames: usize,
}

fn observe<T: Scalar>(frames: &Frames, s: &EnvState, image_size: usize) -> Result<Observation<T>> {
    let views: Vec<&[u8]> = frames.iter().map(Vec::as_slice).collect();
    Observation::from_u8(&views, image_size, &s.agent_state())
}

/// Plans `L_a` actions, executes the first `execute_steps`, and repeats until
/// `episode_len` steps (or success, if configured). The optional patch lies
/// in the scene; the optional hook rewrites observations.
#[allow(clippy::too_many_arguments)]
pub fn receding_horizon_execute<T: Scalar, R: Rng + ?Sized>(
    policy: &DiffusionPolicy<T>,
    env: &EnvConfig,
    env_seed: u64,
    cfg: &RolloutConfig,
    patch: Option<&ScenePatch>,
    mut hook: Option<&mut dyn ObservationHook<T>>,
    rng: &mut R,
) -> Result<RolloutTrace> {
    if env.image_size != policy.config.image_size {
        return Err(Error::dim(format!(
            "environment renders {} px, policy expects {} px",
            env.image_size, policy.config.image_size
        )));
    }
    let mut s = reset(env, env_seed);
    let mut trace = RolloutTrace {
        env_seed,
        states: vec![s.clone()],
        observations: Vec::new(),
        actions: Vec::new(),
        coverages: Vec::new(),
        score: 0.0,
        success: false,
        hook_ms: Vec::new(),
        max_perturbation: 0.0,
        range_violations: 0,
        hooked_frames: 0,
    };
    let initial = coverage(env, &s);
    let first = to_u8(&render(env, &s, patch));
    let mut frames: Frames = std::iter::repeat(first).take(policy.config.obs_horizon).collect();
    let mut done = false;
    while s.steps < cfg.episode_len && !done {
        let clean: Observation<T> = observe(&frames, &s, env.image_size)?;
        trace.observations.push(frames.back().expect("nonempty").clone());
        let seen = match hook.as_deref_mut() {
            Some(h) => {
                let t0 = Instant::now();
                let seen = h.observe(policy, &clean)?;
                trace.hook_ms.push(t0.elapsed().as_secs_f64() * 1e3);
                if seen.frames.shape() != clean.frames.shape() {
                    return Err(Error::dim("hook changed the observation shape"));
                }
                for (a, c) in seen.frames.data().iter().zip(clean.frames.data()) {
                    let (a, c) = (a.as_f64(), c.as_f64());
                    trace.max_perturbation = trace.max_perturbation.max((a - c).abs());
                    trace.range_violations += !(0.0..=1.0).contains(&a) as usize;
                }
                trace.hooked_frames += policy.config.obs_horizon;
                seen
            }
            None => clean,
        };
        let plan = policy.generate_action(&seen, rng, cfg.scheduler)?;
        for row in plan.data().chunks(2).take(policy.config.execute_steps) {
            if s.steps >= cfg.episode_len {
                break;
            }
            let a = [row[0], row[1]];
            let (next, cov) = step(env, &s, a);
            s = next;
            trace.actions.push(s.last_action);
            trace.coverages.push(cov);
            trace.states.push(s.clone());
            frames.pop_front();
            frames.push_back(to_u8(&render(env, &s, patch)));
            if cfg.stop_on_success && cov >= env.success_threshold {
                done = true;
                break;
            }
        }
    }
    let mut all = vec![initial];
    all.extend(&trace.coverages);
    let (score, success) = score_episode(env, &all);
    trace.score = score;
    trace.success = success;
    Ok(trace)
}
