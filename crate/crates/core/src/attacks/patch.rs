//! Adversarial patch trained under random affine placements.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{adv_loss, AffineTransformFamily, AttackConfig, AttackMode};
use crate::autodiff::Graph;
use crate::env::DemoDataset;
use crate::error::{Error, Result};
use crate::policy::{dataset_observation, dataset_samples, dataset_target, DiffusionPolicy, Observation};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub size: usize,
    pub epochs: usize,
    pub batch: usize,
    pub family: AffineTransformFamily,
    /// Patches are untargeted by default: they are meant to derail the task,
    /// not to steer it.
    pub mode: AttackMode,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            size: 13,
            epochs: 10,
            batch: 64,
            family: AffineTransformFamily::default(),
            mode: AttackMode::Untargeted,
        }
    }
}

/// `clip(z + 0.5, 0, 1)` with `z ∼ N(0, I)`, the starting point of patch training.
pub fn random_patch<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tensor<f64> {
    Tensor::<f64>::randn(vec![3, size, size], rng).map(|v| (v + 0.5).clamp(0.0, 1.0))
}

/// Trains a `[3 × s × s]` patch: every step composites it into a minibatch
/// of dataset frames under freshly sampled transforms and takes a signed
/// gradient step on the adversarial loss, keeping pixels in `[0, 1]`.
/// The step size and target come from `cfg`; the mode from `patch_cfg`.
pub fn attack_patch<T: Scalar, R: Rng + ?Sized>(
    policy: &DiffusionPolicy<T>,
    dataset: &DemoDataset,
    cfg: &AttackConfig,
    patch_cfg: &PatchConfig,
    rng: &mut R,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Tensor<f64>> {
    let pc = &policy.config;
    let len = pc.traj_len();
    cfg.validate(len)?;
    if patch_cfg.batch == 0 || patch_cfg.size == 0 || patch_cfg.size > pc.image_size {
        return Err(Error::usage("patch batch and size must be positive and fit the image"));
    }
    let samples = dataset_samples(dataset);
    if samples.is_empty() {
        return Err(Error::usage("patch attack needs a nonempty dataset"));
    }
    let s = pc.image_size;
    let hw3 = 3 * s * s;
    let mut patch: Tensor<T> = random_patch(patch_cfg.size, rng).cast();
    let alpha = T::lit(cfg.alpha);
    let target = cfg.target_tensor::<T>(len)?;
    for epoch in 0..patch_cfg.epochs {
        let mut order = samples.clone();
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(patch_cfg.batch) {
            let mut g = Graph::new();
            let b = policy.bind(&mut g, false);
            let x = g.leaf(patch.clone(), true);
            let mut conds = Vec::with_capacity(chunk.len());
            let mut refs = Vec::with_capacity(chunk.len() * len);
            for &smp in chunk {
                let obs: Observation<T> = dataset_observation(dataset, pc, smp)?;
                let map = Arc::new(patch_cfg.family.sample((s, s), rng).resample_map::<T>((patch_cfg.size, patch_cfg.size))?);
                let mut rows = Vec::with_capacity(pc.obs_horizon);
                for frame in obs.frames.data().chunks(hw3) {
                    let f = g.constant(Tensor::from_vec([3, s, s], frame.to_vec())?);
                    let r = g.replace_resampled(f, x, Arc::clone(&map))?;
                    rows.push(g.reshape(r, &[1, hw3])?);
                }
                let stacked = g.concat_rows(&rows)?;
                let stacked = g.reshape(stacked, &[pc.obs_horizon, 3, s, s])?;
                conds.push(b.condition(&mut g, stacked, &obs.agent_state)?);
                match patch_cfg.mode {
                    AttackMode::Targeted => refs.extend_from_slice(target.data()),
                    AttackMode::Untargeted => refs.extend(dataset_target::<T>(dataset, pc, &policy.normalizer, smp)),
                }
            }
            let cond = g.concat_rows(&conds)?;
            let refs = Tensor::from_vec([chunk.len(), len], refs)?;
            let loss = adv_loss(&mut g, &b, cond, &refs, patch_cfg.mode, rng)?;
            total += g.value(loss).item()?.as_f64();
            batches += 1;
            g.backward(loss)?;
            let grad = g.take_grad(x).ok_or_else(|| Error::usage("no patch gradient"))?;
            for (p, &gv) in patch.data_mut().iter_mut().zip(grad.data()) {
                let step = if gv > T::zero() {
                    alpha
                } else if gv < T::zero() {
                    -alpha
                } else {
                    T::zero()
                };
                *p = (*p - step).max(T::zero()).min(T::one());
            }
        }
        on_epoch(epoch + 1, total / batches as f64);
    }
    Ok(patch.cast())
}
