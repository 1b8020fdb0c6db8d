//! Adversarial attacks on the visual diffusion policy: global PGD
//! perturbations (online and offline), physical patches, end-to-end
//! baselines through the sampling chain, and random noise.

mod affine;
mod global;
mod hooks;
mod patch;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::diffusion::Scheduler;
use crate::error::{Error, Result};
use crate::io::Container;
use crate::policy::{BoundPolicy, DiffusionPolicy, Observation};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use affine::{AffineTransform, AffineTransformFamily};
pub use global::{attack_offline_global, attack_online_global, end2end_attack};
pub use hooks::{OnlineAttackHook, PerturbationHook, RandomNoiseHook};
pub use patch::{attack_patch, random_patch, PatchConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    /// Pull the denoiser toward a chosen trajectory.
    Targeted,
    /// Push the denoiser away from a clean trajectory.
    Untargeted,
}

impl AttackMode {
    pub fn label(&self) -> &'static str {
        match self {
            AttackMode::Targeted => "targeted",
            AttackMode::Untargeted => "untargeted",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    /// One denoiser evaluation on a noised reference trajectory.
    NoisePrediction,
    /// Distance of the full sampling chain's output to the reference.
    EndToEnd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// `‖δ‖∞` budget in pixel units.
    pub sigma: f64,
    /// PGD step size.
    pub alpha: f64,
    pub steps: usize,
    pub mode: AttackMode,
    /// Normalized target trajectory; `None` means all ones.
    pub target: Option<Vec<f64>>,
    pub loss: AttackLoss,
    /// Chain used for clean reference samples and for end-to-end losses.
    pub scheduler: Scheduler,
    pub seed: u64,
    /// Resample the clean reference from the perturbed image at every step
    /// (untargeted online only).
    pub resample_reference: bool,
    /// `(k, ε)` draws per PGD step for the noise-prediction loss.
    pub draws: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            sigma: 0.03,
            alpha: 0.001875,
            steps: 50,
            mode: AttackMode::Targeted,
            target: None,
            loss: AttackLoss::NoisePrediction,
            scheduler: Scheduler::Ddim(8),
            seed: 0,
            resample_reference: false,
            draws: 1,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, traj_len: usize) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::usage(format!("sigma must be finite and ≥ 0, got {}", self.sigma)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::usage(format!("alpha must be finite and > 0, got {}", self.alpha)));
        }
        if self.draws == 0 {
            return Err(Error::usage("draws must be positive"));
        }
        if let Some(t) = &self.target {
            if t.len() != traj_len {
                return Err(Error::dim(format!("target has {} values, trajectory has {traj_len}", t.len())));
            }
        }
        Ok(())
    }

    /// Normalized target trajectory `[1 × traj_len]`.
    pub fn target_tensor<T: Scalar>(&self, traj_len: usize) -> Result<Tensor<T>> {
        let t = self.target.clone().unwrap_or_else(|| vec![1.0; traj_len]);
        Tensor::from_vec([1, traj_len], t.into_iter().map(T::lit).collect())
    }

    /// Step size `2σ/N` used by the parameter sweeps.
    pub fn with_budget(&self, sigma: f64, steps: usize) -> Self {
        Self {
            sigma,
            steps,
            alpha: if steps > 0 { 2.0 * sigma / steps as f64 } else { self.alpha },
            ..self.clone()
        }
    }
}

/// The largest `T` not exceeding `sigma`, so clipping in `T` never overshoots
/// the budget stated in `f64`.
pub(crate) fn budget<T: Scalar>(sigma: f64) -> T {
    let mut s = T::lit(sigma);
    while s.as_f64() > sigma {
        s = s - s * T::epsilon();
    }
    s
}

/// Additive image perturbation, either one tensor per frame slot
/// (`[T_o × 3 × H × W]`) or one shared by every frame (`[3 × H × W]`).
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalPerturbation {
    pub delta: Tensor<f64>,
    pub sigma: f64,
}

impl GlobalPerturbation {
    pub fn zeros(shape: &[usize], sigma: f64) -> Self {
        Self {
            delta: Tensor::zeros(shape.to_vec()),
            sigma,
        }
    }

    pub fn linf(&self) -> f64 {
        self.delta.max_abs()
    }

    pub fn within_budget(&self) -> bool {
        self.linf() <= self.sigma
    }

    /// `clip(I + δ, 0, 1)` frame by frame.
    pub fn apply<T: Scalar>(&self, obs: &Observation<T>) -> Result<Observation<T>> {
        let fs = obs.frames.shape();
        let ds = self.delta.shape();
        let per_frame = if ds == fs {
            false
        } else if ds == &fs[1..] {
            true
        } else {
            return Err(Error::dim(format!("perturbation {:?} does not fit frames {:?}", ds, fs)));
        };
        let n = self.delta.numel();
        let d = self.delta.data();
        let data = obs
            .frames
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let di = if per_frame { d[i % n] } else { d[i] };
                (x + T::lit(di)).max(T::zero()).min(T::one())
            })
            .collect();
        Observation::new(Tensor::from_vec(fs.to_vec(), data)?, obs.agent_state.clone())
    }

    pub fn to_container(&self, extra: serde_json::Value) -> Result<Container> {
        let mut c = Container::new(serde_json::json!({
            "kind": "perturbation",
            "sigma": self.sigma,
            "extra": extra,
        }));
        c.push_tensor("delta", &self.delta)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.metadata.get("kind").and_then(|k| k.as_str()) != Some("perturbation") {
            return Err(Error::Format("container is not a perturbation".into()));
        }
        let sigma = c.metadata["sigma"]
            .as_f64()
            .ok_or_else(|| Error::Format("perturbation without sigma".into()))?;
        let p = Self {
            delta: c.tensor("delta")?,
            sigma,
        };
        if !p.within_budget() {
            return Err(Error::Format(format!("stored perturbation exceeds its budget {sigma}")));
        }
        Ok(p)
    }
}

/// `δ = clip(σ·z, −σ, σ)` with `z ∼ N(0, I)`.
pub fn random_noise_baseline<R: Rng + ?Sized>(shape: &[usize], sigma: f64, rng: &mut R) -> Result<GlobalPerturbation> {
    if !(sigma >= 0.0) {
        return Err(Error::usage(format!("sigma must be ≥ 0, got {sigma}")));
    }
    let z = Tensor::<f64>::randn(shape.to_vec(), rng);
    Ok(GlobalPerturbation {
        delta: z.map(|v| (sigma * v).clamp(-sigma, sigma)),
        sigma,
    })
}

/// Noises every row of `reference[B × L]` at its own random timestep and
/// returns `s·mean‖ε_θ(τ_k, k, cond) − ε‖²`, `s = +1` targeted, `−1` untargeted.
/// `cond` must have `B` rows.
pub fn adv_loss<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    bound: &BoundPolicy<'_, T>,
    cond: Var,
    reference: &Tensor<T>,
    mode: AttackMode,
    rng: &mut R,
) -> Result<Var> {
    let schedule = &bound.policy().schedule;
    let (rows, len) = (reference.shape()[0], reference.shape()[1]);
    let mut ks = Vec::with_capacity(rows);
    let mut noisy = Vec::with_capacity(rows * len);
    let mut eps = Vec::with_capacity(rows * len);
    for row in reference.data().chunks(len) {
        let k = rng.gen_range(0..schedule.steps());
        let ab = schedule.alpha_bar(k);
        let (a, s) = (ab.sqrt(), (T::one() - ab).sqrt());
        ks.push(k);
        for &v in row {
            let e = T::lit(rng.sample::<f64, _>(rand_distr::StandardNormal));
            eps.push(e);
            noisy.push(a * v + s * e);
        }
    }
    let x = g.constant(Tensor::from_vec([rows, len], noisy)?);
    let pred = bound.predict_batch(g, x, &ks, cond)?;
    let target = g.constant(Tensor::from_vec([rows, len], eps)?);
    let l = g.mse(pred, target)?;
    Ok(match mode {
        AttackMode::Targeted => l,
        AttackMode::Untargeted => g.scale(l, -T::one()),
    })
}

/// Monte-Carlo estimate of the adversarial loss at `obs` with `draws` fresh
/// `(k, ε)` draws. Forward only.
pub fn adv_loss_estimate<T: Scalar, R: Rng + ?Sized>(
    policy: &DiffusionPolicy<T>,
    obs: &Observation<T>,
    reference: &Tensor<T>,
    mode: AttackMode,
    draws: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut g = Graph::new();
    let b = policy.bind(&mut g, false);
    let f = g.constant(obs.frames.clone());
    let cond = b.condition(&mut g, f, &obs.agent_state)?;
    let cond = g.concat_rows(&vec![cond; draws])?;
    let refs = repeat_rows(reference, draws)?;
    let l = adv_loss(&mut g, &b, cond, &refs, mode, rng)?;
    Ok(g.value(l).item()?.as_f64())
}

pub(crate) fn repeat_rows<T: Scalar>(row: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let len = row.numel();
    let mut data = Vec::with_capacity(n * len);
    for _ in 0..n {
        data.extend_from_slice(row.data());
    }
    Tensor::from_vec([n, len], data)
}

/// Patch artifact with its training metadata.
pub fn patch_to_container(patch: &Tensor<f64>, extra: serde_json::Value) -> Result<Container> {
    let mut c = Container::new(serde_json::json!({"kind": "patch", "extra": extra}));
    c.push_tensor("patch", patch)?;
    Ok(c)
}

pub fn patch_from_container(c: &Container) -> Result<Tensor<f64>> {
    if c.metadata.get("kind").and_then(|k| k.as_str()) != Some("patch") {
        return Err(Error::Format("container is not a patch".into()));
    }
    let p = c.tensor("patch")?;
    if p.ndim() != 3 || p.shape()[0] != 3 || p.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Format("patch must be 3×h×w with pixels in [0, 1]".into()));
    }
    Ok(p)
}

#[cfg(test)]
mod tests;
