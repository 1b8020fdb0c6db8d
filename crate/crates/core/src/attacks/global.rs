//! PGD on additive image perturbations.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{adv_loss, budget, repeat_rows, AttackConfig, AttackLoss, AttackMode, GlobalPerturbation};
use crate::autodiff::Graph;
use crate::diffusion::SamplingNoise;
use crate::env::DemoDataset;
use crate::error::{Error, Result};
use crate::policy::{DiffusionPolicy, Observation};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `δ ← clip(δ − α·sign(g), −σ, σ)`
fn pgd_step<T: Scalar>(delta: &mut Tensor<T>, grad: &Tensor<T>, alpha: T, sigma: T) {
    for (d, &g) in delta.data_mut().iter_mut().zip(grad.data()) {
        let s = if g > T::zero() {
            T::one()
        } else if g < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        *d = (*d - alpha * s).max(-sigma).min(sigma);
    }
    assert!(delta.data().iter().all(|d| d.abs() <= sigma), "perturbation left its budget");
}

fn clip_add<T: Scalar>(frames: &Tensor<T>, delta: &Tensor<T>) -> Tensor<T> {
    frames
        .zip_map(delta, |x, d| (x + d).max(T::zero()).min(T::one()))
        .expect("matching shapes")
}

/// Clean reference trajectory (normalized, clamped) sampled from the policy.
fn clean_reference<T: Scalar, R: Rng + ?Sized>(
    policy: &DiffusionPolicy<T>,
    obs: &Observation<T>,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let noise = policy.draw_noise(cfg.scheduler, rng)?;
    let c = T::lit(policy.config.clamp);
    Ok(policy.sample_normalized(obs, cfg.scheduler, &noise)?.map(|v| v.max(-c).min(c)))
}

/// Per-observation PGD (online attack). With `AttackLoss::EndToEnd` the
/// gradient runs through the whole sampling chain with its noise held fixed.
/// Returns one perturbation per frame slot.
pub fn attack_online_global<T: Scalar, R: Rng + ?Sized>(
    policy: &DiffusionPolicy<T>,
    obs: &Observation<T>,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<GlobalPerturbation> {
    let len = policy.config.traj_len();
    cfg.validate(len)?;
    let mut delta = Tensor::<T>::zeros(obs.frames.shape().to_vec());
    if cfg.steps == 0 || cfg.sigma == 0.0 {
        return Ok(GlobalPerturbation::zeros(obs.frames.shape(), cfg.sigma));
    }
    let (alpha, sigma) = (T::lit(cfg.alpha), budget::<T>(cfg.sigma));
    let mut reference = match cfg.mode {
        AttackMode::Targeted => cfg.target_tensor(len)?,
        AttackMode::Untargeted => clean_reference(policy, obs, cfg, rng)?,
    };
    let chain_noise = match cfg.loss {
        AttackLoss::EndToEnd => Some(SamplingNoise::draw(&policy.schedule, &[1, len], cfg.scheduler, rng)?),
        AttackLoss::NoisePrediction => None,
    };
    for _ in 0..cfg.steps {
        let adv = clip_add(&obs.frames, &delta);
        if cfg.resample_reference && cfg.mode == AttackMode::Untargeted {
            let seen = Observation::new(adv.clone(), obs.agent_state.clone())?;
            reference = clean_reference(policy, &seen, cfg, rng)?;
        }
        let mut g = Graph::new();
        let b = policy.bind(&mut g, false);
        let f = g.leaf(adv, true);
        let cond = b.condition(&mut g, f, &obs.agent_state)?;
        let loss = match &chain_noise {
            None => {
                let cond = g.concat_rows(&vec![cond; cfg.draws])?;
                let refs = repeat_rows(&reference, cfg.draws)?;
                adv_loss(&mut g, &b, cond, &refs, cfg.mode, rng)?
            }
            Some(noise) => {
                let x = policy.schedule.sample_with_noise(&mut g, &b, cond, cfg.scheduler, noise)?;
                let r = g.constant(reference.clone());
                let d = g.mse(x, r)?;
                match cfg.mode {
                    AttackMode::Targeted => d,
                    AttackMode::Untargeted => g.scale(d, -T::one()),
                }
            }
        };
        g.backward(loss)?;
        let grad = g.take_grad(f).ok_or_else(|| Error::usage("no pixel gradient"))?;
        pgd_step(&mut delta, &grad, alpha, sigma);
    }
    Ok(GlobalPerturbation {
        delta: delta.cast(),
        sigma: cfg.sigma,
    })
}

/// PGD through the full sampling chain (`cfg.scheduler`), noise held fixed.
pub fn end2end_attack<T: Scalar, R: Rng + ?Sized>(
    policy: &DiffusionPolicy<T>,
    obs: &Observation<T>,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<GlobalPerturbation> {
    let cfg = AttackConfig {
        loss: AttackLoss::EndToEnd,
        ..cfg.clone()
    };
    attack_online_global(policy, obs, &cfg, rng)
}

/// One frame-invariant `δ[3 × H × W]` trained by minibatch PGD over the
/// dataset. Untargeted mode pushes away from the demonstrated trajectories.
pub fn attack_offline_global<T: Scalar, R: Rng + ?Sized>(
    policy: &DiffusionPolicy<T>,
    dataset: &DemoDataset,
    cfg: &AttackConfig,
    epochs: usize,
    batch: usize,
    rng: &mut R,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<GlobalPerturbation> {
    let pc = &policy.config;
    let len = pc.traj_len();
    cfg.validate(len)?;
    if batch == 0 {
        return Err(Error::usage("batch must be positive"));
    }
    let samples = crate::policy::dataset_samples(dataset);
    if samples.is_empty() {
        return Err(Error::usage("offline attack needs a nonempty dataset"));
    }
    let frame = [3, pc.image_size, pc.image_size];
    let hw3 = 3 * pc.image_size * pc.image_size;
    let mut delta = Tensor::<T>::zeros(frame.to_vec());
    let (alpha, sigma) = (T::lit(cfg.alpha), budget::<T>(cfg.sigma));
    let target = cfg.target_tensor::<T>(len)?;
    for epoch in 0..epochs {
        let mut order = samples.clone();
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch) {
            let mut g = Graph::new();
            let b = policy.bind(&mut g, false);
            let d = g.leaf(delta.clone(), true);
            let flat = g.reshape(d, &[1, hw3])?;
            let stacked = g.concat_rows(&vec![flat; pc.obs_horizon])?;
            let stacked = g.reshape(stacked, &[pc.obs_horizon, 3, pc.image_size, pc.image_size])?;
            let mut conds = Vec::with_capacity(chunk.len());
            let mut refs = Vec::with_capacity(chunk.len() * len);
            for &s in chunk {
                let obs: Observation<T> = crate::policy::dataset_observation(dataset, pc, s)?;
                let f = g.constant(obs.frames);
                let sum = g.add(f, stacked)?;
                let adv = g.clamp(sum, T::zero(), T::one());
                conds.push(b.condition(&mut g, adv, &obs.agent_state)?);
                match cfg.mode {
                    AttackMode::Targeted => refs.extend_from_slice(target.data()),
                    AttackMode::Untargeted => {
                        refs.extend(crate::policy::dataset_target::<T>(dataset, pc, &policy.normalizer, s))
                    }
                }
            }
            let cond = g.concat_rows(&conds)?;
            let refs = Tensor::from_vec([chunk.len(), len], refs)?;
            let loss = adv_loss(&mut g, &b, cond, &refs, cfg.mode, rng)?;
            total += g.value(loss).item()?.as_f64();
            batches += 1;
            g.backward(loss)?;
            let grad = g.take_grad(d).ok_or_else(|| Error::usage("no perturbation gradient"))?;
            pgd_step(&mut delta, &grad, alpha, sigma);
        }
        on_epoch(epoch + 1, total / batches as f64);
    }
    Ok(GlobalPerturbation {
        delta: delta.cast(),
        sigma: cfg.sigma,
    })
}
