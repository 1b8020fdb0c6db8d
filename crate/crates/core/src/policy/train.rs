//! Behavior cloning on the denoising objective.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ActionNormalizer, DiffusionPolicy, Observation, PolicyConfig};
use crate::autodiff::Graph;
use crate::env::{DemoDataset, EnvConfig, ScenePatch, ACTION_DIM};
use crate::error::{Error, Result};
use crate::io::Container;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// `(k, ε)` draws per observation in each minibatch.
    pub noise_draws: usize,
    /// Fraction of training observations that get a random distractor square
    /// lying on the table, so the encoder learns to ignore clutter.
    pub distractors: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch: 64,
            lr: 1e-3,
            seed: 0,
            noise_draws: 4,
            distractors: 0.5,
        }
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub policy: DiffusionPolicy<T>,
    pub adam: AdamState<T>,
    pub epoch: usize,
    pub epoch_losses: Vec<f64>,
}

/// `(episode, t)` training sample.
pub(crate) type Sample = (usize, usize);

pub(crate) fn samples(ds: &DemoDataset) -> Vec<Sample> {
    ds.episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.len()).map(move |t| (e, t)))
        .collect()
}

/// Observation at step `t` of episode `e`: frames `t−T_o+1..=t`, repeating the first frame
/// at the episode start.
pub fn observation<T: Scalar>(ds: &DemoDataset, cfg: &PolicyConfig, (e, t): (usize, usize)) -> Result<Observation<T>> {
    let ep = &ds.episodes[e];
    let s = ds.image_size();
    let frames: Vec<&[u8]> = (0..cfg.obs_horizon)
        .map(|i| ep.frame((t + i + 1).saturating_sub(cfg.obs_horizon), s))
        .collect();
    let state: Vec<f64> = ep.states[t].iter().map(|&v| v as f64).collect();
    Observation::from_u8(&frames, s, &state)
}

/// Side range of distractor squares, in pixels.
const DISTRACTOR_PX: std::ops::RangeInclusive<usize> = 8..=16;

/// A flat-coloured or noise-textured square at a random in-scene pose.
fn distractor<R: Rng + ?Sized>(env: &EnvConfig, rng: &mut R) -> Result<ScenePatch> {
    let side = rng.gen_range(DISTRACTOR_PX);
    let image = if rng.gen_bool(0.5) {
        let colour: [f64; 3] = rng.gen();
        Tensor::from_vec([3, side, side], (0..3).flat_map(|c| vec![colour[c]; side * side]).collect())?
    } else {
        let (mean, spread): ([f64; 3], f64) = (rng.gen(), rng.gen());
        let mut data = Vec::with_capacity(3 * side * side);
        for m in mean {
            for _ in 0..side * side {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                data.push((m + spread * z).clamp(0.0, 1.0));
            }
        }
        Tensor::from_vec([3, side, side], data)?
    };
    let size = side as f64 / env.image_size as f64;
    let (center, angle) = ScenePatch::sample_pose(env, size, rng);
    ScenePatch::new(image, center, angle, size)
}

/// [`observation`] with `patch` painted into every frame.
fn observation_with<T: Scalar>(ds: &DemoDataset, cfg: &PolicyConfig, (e, t): Sample, patch: &ScenePatch) -> Result<Observation<T>> {
    let ep = &ds.episodes[e];
    let s = ds.image_size();
    let frames: Vec<Vec<u8>> = (0..cfg.obs_horizon)
        .map(|i| {
            let mut f = ep.frame((t + i + 1).saturating_sub(cfg.obs_horizon), s).to_vec();
            patch.overlay_background(&mut f, s);
            f
        })
        .collect();
    let refs: Vec<&[u8]> = frames.iter().map(Vec::as_slice).collect();
    let state: Vec<f64> = ep.states[t].iter().map(|&v| v as f64).collect();
    Observation::from_u8(&refs, s, &state)
}

/// Normalized action window `t..t+L_a`, padded with the last action.
pub(crate) fn target<T: Scalar>(ds: &DemoDataset, cfg: &PolicyConfig, norm: &ActionNormalizer, (e, t): Sample) -> Vec<T> {
    let ep = &ds.episodes[e];
    let mut a: Vec<f64> = (0..cfg.action_horizon)
        .flat_map(|i| ep.actions[(t + i).min(ep.len() - 1)].map(|v| v as f64))
        .collect();
    norm.normalize(&mut a);
    a.into_iter().map(T::lit).collect()
}

impl<T: Scalar> TrainState<T> {
    /// Fits the normalizer on `dataset` and initializes parameters from `seed`.
    pub fn init(dataset: &DemoDataset, config: PolicyConfig, seed: u64) -> Result<Self> {
        if dataset.episodes.iter().all(|e| e.is_empty()) {
            return Err(Error::usage("training needs a nonempty dataset"));
        }
        let acts: Vec<[f64; ACTION_DIM]> = dataset
            .episodes
            .iter()
            .flat_map(|e| e.actions.iter().map(|a| a.map(|v| v as f64)))
            .collect();
        let norm = ActionNormalizer::fit(ACTION_DIM, acts.iter().map(|a| &a[..]))?;
        let mut rng = seed::rng(seed, seed::TRAIN, u64::MAX);
        let policy = DiffusionPolicy::new(config, norm, &mut rng)?;
        let adam = AdamState::for_params(&policy.params.to_tensors());
        Ok(Self {
            policy,
            adam,
            epoch: 0,
            epoch_losses: Vec::new(),
        })
    }

    /// Runs one epoch and returns its mean minibatch loss.
    pub fn run_epoch(&mut self, dataset: &DemoDataset, cfg: &TrainConfig) -> Result<f64> {
        if cfg.batch == 0 || cfg.noise_draws == 0 {
            return Err(Error::usage("batch and noise_draws must be positive"));
        }
        if !(0.0..=1.0).contains(&cfg.distractors) {
            return Err(Error::usage("distractors must be a fraction in [0, 1]"));
        }
        let pc = self.policy.config.clone();
        let mut rng = seed::rng(cfg.seed, seed::TRAIN, self.epoch as u64);
        let mut order = samples(dataset);
        if order.is_empty() {
            return Err(Error::usage("training needs a nonempty dataset"));
        }
        order.shuffle(&mut rng);
        let adam_cfg = AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        };
        let len = pc.traj_len();
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let mut g = Graph::<T>::new();
            let bound = self.policy.bind(&mut g, true);
            let mut conds = Vec::with_capacity(chunk.len());
            let mut x0 = Vec::with_capacity(chunk.len() * len);
            for &s in chunk {
                let obs: Observation<T> = if rng.gen_bool(cfg.distractors) {
                    observation_with(dataset, &pc, s, &distractor(&dataset.meta.env, &mut rng)?)?
                } else {
                    observation(dataset, &pc, s)?
                };
                let f = g.constant(obs.frames);
                conds.push(bound.condition(&mut g, f, &obs.agent_state)?);
                x0.extend(target::<T>(dataset, &pc, &self.policy.normalizer, s));
            }
            let cond = g.concat_rows(&conds)?;
            let rows = chunk.len() * cfg.noise_draws;
            let cond = g.concat_rows(&vec![cond; cfg.noise_draws])?;
            let mut ks = Vec::with_capacity(rows);
            let mut noisy = Vec::with_capacity(rows * len);
            let mut eps = Vec::with_capacity(rows * len);
            for _ in 0..cfg.noise_draws {
                for row in x0.chunks(len) {
                    let k = rng.gen_range(0..self.policy.schedule.steps());
                    let ab = self.policy.schedule.alpha_bar(k);
                    let (a, s) = (ab.sqrt(), (T::one() - ab).sqrt());
                    ks.push(k);
                    for &v in row {
                        let e: f64 = rng.sample(rand_distr::StandardNormal);
                        let e = T::lit(e);
                        eps.push(e);
                        noisy.push(a * v + s * e);
                    }
                }
            }
            let x = g.constant(Tensor::from_vec([rows, len], noisy)?);
            let pred = bound.predict_batch(&mut g, x, &ks, cond)?;
            let tgt = g.constant(Tensor::from_vec([rows, len], eps)?);
            let loss = g.mse(pred, tgt)?;
            total += g.value(loss).item()?.as_f64();
            batches += 1;
            let vars = bound.vars().to_vec();
            g.backward(loss)?;
            let grads = vars
                .iter()
                .map(|&v| g.take_grad(v).ok_or_else(|| Error::usage("missing parameter gradient")))
                .collect::<Result<Vec<_>>>()?;
            let mut params = self.policy.params.to_tensors();
            adam_step(&mut params, &grads, &mut self.adam, &adam_cfg)?;
            self.policy.params.set_all(params)?;
        }
        let mean = total / batches as f64;
        self.epoch += 1;
        self.epoch_losses.push(mean);
        Ok(mean)
    }

    /// Trains until `cfg.epochs` total epochs have run.
    pub fn run(&mut self, dataset: &DemoDataset, cfg: &TrainConfig, mut on_epoch: impl FnMut(usize, f64)) -> Result<()> {
        while self.epoch < cfg.epochs {
            let loss = self.run_epoch(dataset, cfg)?;
            on_epoch(self.epoch, loss);
        }
        Ok(())
    }

    /// Policy weights plus optimizer state.
    pub fn to_container(&self, extra: serde_json::Value) -> Result<Container> {
        let mut c = self.policy.to_container(extra)?;
        c.metadata["train"] = serde_json::json!({
            "epoch": self.epoch,
            "adam_step": self.adam.step,
            "epoch_losses": self.epoch_losses,
        });
        for (i, name) in self.policy.params.names().iter().enumerate() {
            c.push_tensor(format!("adam.m/{name}"), &self.adam.m[i].cast::<f64>())?;
            c.push_tensor(format!("adam.v/{name}"), &self.adam.v[i].cast::<f64>())?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let policy = DiffusionPolicy::<T>::from_container(c)?;
        let train = c
            .metadata
            .get("train")
            .ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
        let field = |k: &str| train.get(k).cloned().ok_or_else(|| Error::Format(format!("missing train.{k}")));
        let epoch: usize = serde_json::from_value(field("epoch")?)?;
        let step: u64 = serde_json::from_value(field("adam_step")?)?;
        let epoch_losses: Vec<f64> = serde_json::from_value(field("epoch_losses")?)?;
        let load = |prefix: &str| {
            policy
                .params
                .names()
                .iter()
                .map(|n| c.tensor(&format!("{prefix}/{n}")).map(|t| t.cast::<T>()))
                .collect::<Result<Vec<_>>>()
        };
        let adam = AdamState {
            m: load("adam.m")?,
            v: load("adam.v")?,
            step,
        };
        Ok(Self {
            policy,
            adam,
            epoch,
            epoch_losses,
        })
    }
}

/// Trains a fresh policy; returns it with the per-epoch mean losses.
pub fn train_policy<T: Scalar>(
    dataset: &DemoDataset,
    config: PolicyConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(usize, f64),
) -> Result<(DiffusionPolicy<T>, Vec<f64>)> {
    let mut st = TrainState::<T>::init(dataset, config, cfg.seed)?;
    st.run(dataset, cfg, on_epoch)?;
    Ok((st.policy, st.epoch_losses))
}

/// Mean denoising loss over every step of `dataset` with `draws` seeded
/// `(k, ε)` draws per step. Uses a forward-only graph.
pub fn denoising_loss_eval<T: Scalar>(
    policy: &DiffusionPolicy<T>,
    dataset: &DemoDataset,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let pc = &policy.config;
    let mut rng = seed::rng(seed, seed::EVAL, 0);
    let mut total = 0.0;
    let mut n = 0usize;
    for s in samples(dataset) {
        let obs: Observation<T> = observation(dataset, pc, s)?;
        let x0 = Tensor::from_vec([1, pc.traj_len()], target::<T>(dataset, pc, &policy.normalizer, s))?;
        let mut g = Graph::new();
        let b = policy.bind(&mut g, false);
        let f = g.constant(obs.frames);
        let cond = b.condition(&mut g, f, &obs.agent_state)?;
        for _ in 0..draws {
            let l = policy
                .schedule
                .denoising_loss(&mut g, &b, &x0, cond, Default::default(), &mut rng)?;
            total += g.value(l).item()?.as_f64();
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}
