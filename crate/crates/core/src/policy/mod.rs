//! Visual diffusion policy: CNN encoder, conditional MLP noise predictor,
//! noise schedule and action normalizer.

mod normalizer;
mod rollout;
mod train;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::diffusion::{Denoiser, NoiseSchedule, SamplingNoise, Scheduler};
use crate::env::{ACTION_DIM, AGENT_STATE_DIM};
use crate::error::{Error, Result};
use crate::io::Container;
use crate::nn::{self, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use normalizer::ActionNormalizer;
pub use rollout::{receding_horizon_execute, Frames, ObservationHook, RolloutConfig, RolloutTrace};
pub use train::{denoising_loss_eval, train_policy, TrainConfig, TrainState};
pub use train::observation as dataset_observation;
pub(crate) use train::{samples as dataset_samples, target as dataset_target};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Global average per channel.
    Mean,
    /// Spatial softmax: expected image coordinates per channel.
    Keypoints,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub obs_horizon: usize,
    pub action_horizon: usize,
    pub execute_steps: usize,
    pub image_size: usize,
    /// Output channels of the stride-2 convolutions; the last is the feature size.
    pub encoder_channels: Vec<usize>,
    pub kernel: usize,
    /// How the last feature map becomes the feature vector.
    pub pooling: Pooling,
    pub time_dim: usize,
    pub hidden: usize,
    /// Number of linear layers in the noise predictor.
    pub layers: usize,
    pub diffusion_steps: usize,
    /// Sampled trajectories are clamped to `±clamp` before denormalization.
    pub clamp: f64,
    /// Multiplies agent velocities before they enter the conditioning vector.
    pub velocity_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            obs_horizon: 2,
            action_horizon: 8,
            execute_steps: 4,
            image_size: 64,
            encoder_channels: vec![8, 16, 32],
            kernel: 4,
            pooling: Pooling::Keypoints,
            time_dim: 32,
            hidden: 512,
            layers: 4,
            diffusion_steps: 100,
            clamp: 1.5,
            velocity_scale: 50.0,
        }
    }
}

impl PolicyConfig {
    pub fn feature_dim(&self) -> usize {
        let c = *self.encoder_channels.last().unwrap_or(&0);
        match self.pooling {
            Pooling::Mean => c,
            Pooling::Keypoints => 2 * c,
        }
    }

    pub fn cond_dim(&self) -> usize {
        self.feature_dim() + AGENT_STATE_DIM
    }

    pub fn traj_len(&self) -> usize {
        self.action_horizon * ACTION_DIM
    }

    fn input_channels(&self) -> usize {
        3 * self.obs_horizon + 2
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::usage(format!("policy config: {m}")));
        if self.obs_horizon == 0 || self.action_horizon == 0 || self.encoder_channels.is_empty() {
            return bad("horizons and encoder channels must be nonempty");
        }
        if self.execute_steps == 0 || self.execute_steps > self.action_horizon {
            return bad("execute_steps must lie in 1..=action_horizon");
        }
        if self.layers < 2 || self.time_dim % 2 != 0 || self.kernel == 0 {
            return bad("need at least two layers, an even time embedding and a positive kernel");
        }
        let mut s = self.image_size;
        for _ in &self.encoder_channels {
            if s + 2 * self.padding() < self.kernel || (s + 2 * self.padding() - self.kernel) % 2 != 0 {
                return bad("image size is not reducible by the stride-2 encoder");
            }
            s = (s + 2 * self.padding() - self.kernel) / 2 + 1;
        }
        Ok(())
    }

    /// Zero padding of every encoder convolution.
    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }
}

/// Stacked RGB frames `[T_o × 3 × H × W]` in `[0, 1]` plus agent state `[4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation<T> {
    pub frames: Tensor<T>,
    pub agent_state: Tensor<T>,
}

impl<T: Scalar> Observation<T> {
    pub fn new(frames: Tensor<T>, agent_state: Tensor<T>) -> Result<Self> {
        if frames.ndim() != 4 || frames.shape()[1] != 3 {
            return Err(Error::dim(format!("frames must be T×3×H×W, got {:?}", frames.shape())));
        }
        if agent_state.numel() != AGENT_STATE_DIM {
            return Err(Error::dim(format!("agent state has {} values", agent_state.numel())));
        }
        Ok(Self { frames, agent_state })
    }

    pub fn from_u8(frames: &[&[u8]], image_size: usize, agent_state: &[f64]) -> Result<Self> {
        let n = 3 * image_size * image_size;
        let mut data = Vec::with_capacity(frames.len() * n);
        for f in frames {
            if f.len() != n {
                return Err(Error::dim(format!("frame of {} bytes, expected {n}", f.len())));
            }
            data.extend(f.iter().map(|&b| T::lit(b as f64 / 255.0)));
        }
        let frames = Tensor::from_vec([frames.len(), 3, image_size, image_size], data)?;
        let state = Tensor::from_vec([AGENT_STATE_DIM], agent_state.iter().map(|&v| T::lit(v)).collect())?;
        Self::new(frames, state)
    }
}

#[derive(Clone, Debug)]
pub struct DiffusionPolicy<T> {
    pub config: PolicyConfig,
    pub params: ParamSet<T>,
    pub schedule: NoiseSchedule<T>,
    pub normalizer: ActionNormalizer,
    coords: Arc<Tensor<T>>,
}

fn coord_channels<T: Scalar>(size: usize) -> Tensor<T> {
    let n = size * size;
    let mut data = vec![T::zero(); 2 * n];
    let step = 2.0 / (size.max(2) - 1) as f64;
    for r in 0..size {
        for c in 0..size {
            data[r * size + c] = T::lit(c as f64 * step - 1.0);
            data[n + r * size + c] = T::lit(r as f64 * step - 1.0);
        }
    }
    Tensor::from_vec([2, n], data).expect("coordinate buffer")
}

impl<T: Scalar> DiffusionPolicy<T> {
    /// Freshly initialized policy. The output layer starts at zero.
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, normalizer: ActionNormalizer, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if normalizer.dim() != ACTION_DIM {
            return Err(Error::dim(format!("normalizer dimension {}", normalizer.dim())));
        }
        let mut params = ParamSet::new();
        let k = config.kernel;
        let mut c_in = config.input_channels();
        for (i, &c_out) in config.encoder_channels.iter().enumerate() {
            let fan = c_in * k * k;
            params.insert(format!("enc.conv{i}.w"), nn::fan_in_uniform(&[c_out, c_in, k, k], fan, rng))?;
            params.insert(format!("enc.conv{i}.b"), Tensor::zeros([c_out]))?;
            c_in = c_out;
        }
        let mut width = config.traj_len() + config.time_dim + config.cond_dim();
        for i in 0..config.layers {
            let last = i + 1 == config.layers;
            let out = if last { config.traj_len() } else { config.hidden };
            let w = if last {
                Tensor::zeros([width, out])
            } else {
                nn::fan_in_uniform(&[width, out], width, rng)
            };
            params.insert(format!("den.fc{i}.w"), w)?;
            params.insert(format!("den.fc{i}.b"), Tensor::zeros([out]))?;
            width = out;
        }
        let schedule = NoiseSchedule::ddpm_linear(config.diffusion_steps)?;
        let coords = Arc::new(coord_channels(config.image_size));
        Ok(Self {
            config,
            params,
            schedule,
            normalizer,
            coords,
        })
    }

    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> BoundPolicy<'_, T> {
        BoundPolicy {
            policy: self,
            vars: self.params.bind(g, requires_grad),
        }
    }

    fn check_obs(&self, obs: &Observation<T>) -> Result<()> {
        let s = obs.frames.shape();
        let c = &self.config;
        if s != [c.obs_horizon, 3, c.image_size, c.image_size] {
            return Err(Error::dim(format!(
                "observation frames {:?}, expected [{}, 3, {}, {}]",
                s, c.obs_horizon, c.image_size, c.image_size
            )));
        }
        Ok(())
    }

    /// Agent state as it enters the conditioning vector.
    pub fn state_features(&self, state: &Tensor<T>) -> Tensor<T> {
        let d = state.data();
        let v = T::lit(self.config.velocity_scale);
        let two = T::lit(2.0);
        Tensor::from_vec(
            [1, AGENT_STATE_DIM],
            vec![two * d[0] - T::one(), two * d[1] - T::one(), v * d[2], v * d[3]],
        )
        .expect("state features")
    }

    /// `ℰ(obs)`, the `[F]` feature vector.
    pub fn encode_observation(&self, obs: &Observation<T>) -> Result<Tensor<T>> {
        self.check_obs(obs)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let f = g.constant(obs.frames.clone());
        let e = b.encode(&mut g, f)?;
        g.value(e).clone().reshape([self.config.feature_dim()])
    }

    /// `ε̂ = ε_θ(traj_k, k, obs)` for a `[L_a × D_a]` trajectory.
    pub fn predict_noise(&self, traj_k: &Tensor<T>, k: usize, obs: &Observation<T>) -> Result<Tensor<T>> {
        self.check_obs(obs)?;
        if traj_k.numel() != self.config.traj_len() {
            return Err(Error::dim(format!("trajectory {:?}", traj_k.shape())));
        }
        if k >= self.schedule.steps() {
            return Err(Error::usage(format!("timestep {k} out of range")));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let f = g.constant(obs.frames.clone());
        let cond = b.condition(&mut g, f, &obs.agent_state)?;
        let x = g.constant(traj_k.clone());
        let e = b.predict(&mut g, x, k, cond)?;
        Ok(g.value(e).clone())
    }

    /// Normalized, unclamped chain output `[1 × L_a·D_a]` for fixed noise.
    pub fn sample_normalized(
        &self,
        obs: &Observation<T>,
        scheduler: Scheduler,
        noise: &SamplingNoise<T>,
    ) -> Result<Tensor<T>> {
        self.check_obs(obs)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let f = g.constant(obs.frames.clone());
        let cond = b.condition(&mut g, f, &obs.agent_state)?;
        let x = self.schedule.sample_with_noise(&mut g, &b, cond, scheduler, noise)?;
        Ok(g.value(x).clone())
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, scheduler: Scheduler, rng: &mut R) -> Result<SamplingNoise<T>> {
        SamplingNoise::draw(&self.schedule, &[1, self.config.traj_len()], scheduler, rng)
    }

    /// Clamps a normalized trajectory and maps it back to action units `[L_a × D_a]`.
    pub fn finish_trajectory(&self, normalized: &Tensor<T>) -> Tensor<f64> {
        let c = self.config.clamp;
        let mut a: Vec<f64> = normalized.data().iter().map(|v| v.as_f64().clamp(-c, c)).collect();
        self.normalizer.denormalize(&mut a);
        Tensor::from_vec([self.config.action_horizon, ACTION_DIM], a).expect("trajectory shape")
    }

    /// `τ ∼ π_θ(obs)`: denormalized `[L_a × D_a]` actions.
    pub fn generate_action<R: Rng + ?Sized>(
        &self,
        obs: &Observation<T>,
        rng: &mut R,
        scheduler: Scheduler,
    ) -> Result<Tensor<f64>> {
        let noise = self.draw_noise(scheduler, rng)?;
        Ok(self.finish_trajectory(&self.sample_normalized(obs, scheduler, &noise)?))
    }

    pub fn to_container(&self, extra: serde_json::Value) -> Result<Container> {
        let meta = serde_json::json!({
            "kind": "policy",
            "config": self.config,
            "normalizer": self.normalizer,
            "extra": extra,
        });
        let mut c = Container::new(meta);
        for (name, t) in self.params.iter() {
            c.push_tensor(name, &t.cast::<f64>())?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.metadata.get("kind").and_then(|k| k.as_str()) != Some("policy") {
            return Err(Error::Format("container is not a policy checkpoint".into()));
        }
        let config: PolicyConfig = serde_json::from_value(c.metadata["config"].clone())?;
        let normalizer: ActionNormalizer = serde_json::from_value(c.metadata["normalizer"].clone())?;
        let mut p = Self::new(config, normalizer, &mut crate::seed::rng_from(0))?;
        let values = p
            .params
            .names()
            .iter()
            .map(|n| c.tensor(n).map(|t| t.cast::<T>()))
            .collect::<Result<Vec<_>>>()?;
        p.params.set_all(values)?;
        Ok(p)
    }
}

/// Policy parameters bound into one graph.
pub struct BoundPolicy<'a, T> {
    policy: &'a DiffusionPolicy<T>,
    vars: Vec<Var>,
}

impl<'a, T: Scalar> BoundPolicy<'a, T> {
    pub fn policy(&self) -> &'a DiffusionPolicy<T> {
        self.policy
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// `frames[T_o × 3 × H × W]` to features `[1 × F]`.
    pub fn encode(&self, g: &mut Graph<T>, frames: Var) -> Result<Var> {
        let c = &self.policy.config;
        let hw = c.image_size * c.image_size;
        let expect = [c.obs_horizon, 3, c.image_size, c.image_size];
        if g.shape(frames) != expect {
            return Err(Error::dim(format!("encoder input {:?}, expected {:?}", g.shape(frames), expect)));
        }
        let flat = g.reshape(frames, &[3 * c.obs_horizon, hw])?;
        let scaled = g.scale(flat, T::lit(2.0));
        let centred = g.add_scalar(scaled, -T::one());
        let coords = g.leaf_shared(Arc::clone(&self.policy.coords), false);
        let stacked = g.concat_rows(&[centred, coords])?;
        let mut h = g.reshape(stacked, &[c.input_channels(), c.image_size, c.image_size])?;
        for i in 0..c.encoder_channels.len() {
            let (w, b) = (self.vars[2 * i], self.vars[2 * i + 1]);
            h = nn::conv2d_bias(g, h, w, b, 2, c.padding())?;
            // Keypoints read the raw last map.
            if i + 1 < c.encoder_channels.len() || c.pooling == Pooling::Mean {
                h = g.silu(h);
            }
        }
        match c.pooling {
            Pooling::Mean => g.spatial_mean(h),
            Pooling::Keypoints => g.spatial_softmax(h),
        }
    }

    /// Encoder features joined with agent-state features: `[1 × (F + 4)]`.
    pub fn condition(&self, g: &mut Graph<T>, frames: Var, agent_state: &Tensor<T>) -> Result<Var> {
        let f = self.encode(g, frames)?;
        let s = g.constant(self.policy.state_features(agent_state));
        g.concat_cols(&[f, s])
    }

    /// Noise prediction for rows `x[B × L·D]` at per-row timesteps.
    pub fn predict_batch(&self, g: &mut Graph<T>, x: Var, ks: &[usize], cond: Var) -> Result<Var> {
        let c = &self.policy.config;
        let sx = g.shape(x).to_vec();
        if sx.len() != 2 || sx[1] != c.traj_len() || sx[0] != ks.len() {
            return Err(Error::dim(format!("noise predictor input {:?} with {} timesteps", sx, ks.len())));
        }
        if g.shape(cond) != [ks.len(), c.cond_dim()] {
            return Err(Error::dim(format!("conditioning {:?}", g.shape(cond))));
        }
        let emb: Vec<T> = ks.iter().flat_map(|&k| nn::timestep_embedding::<T>(k, c.time_dim)).collect();
        let emb = g.constant(Tensor::from_vec([ks.len(), c.time_dim], emb)?);
        let mut h = g.concat_cols(&[x, emb, cond])?;
        let base = 2 * c.encoder_channels.len();
        for i in 0..c.layers {
            let (w, b) = (self.vars[base + 2 * i], self.vars[base + 2 * i + 1]);
            h = nn::linear(g, h, w, b)?;
            if i + 1 < c.layers {
                h = g.silu(h);
            }
        }
        Ok(h)
    }
}

impl<T: Scalar> Denoiser<T> for BoundPolicy<'_, T> {
    fn predict(&self, g: &mut Graph<T>, x: Var, k: usize, cond: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let len = self.policy.config.traj_len();
        let numel: usize = shape.iter().product();
        if numel % len != 0 {
            return Err(Error::dim(format!("trajectory {:?} is not a multiple of {len}", shape)));
        }
        let rows = numel / len;
        let flat = g.reshape(x, &[rows, len])?;
        let e = self.predict_batch(g, flat, &vec![k; rows], cond)?;
        g.reshape(e, &shape)
    }
}
