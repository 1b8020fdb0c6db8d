//! Observation hooks that put attacks into closed-loop rollouts.

use rand::Rng;

use super::{attack_online_global, random_noise_baseline, AttackConfig, GlobalPerturbation};
use crate::error::Result;
use crate::policy::{DiffusionPolicy, Observation, ObservationHook};
use crate::scalar::Scalar;

/// Runs a fresh PGD attack at every inference.
pub struct OnlineAttackHook<R> {
    pub config: AttackConfig,
    pub rng: R,
}

impl<T: Scalar, R: Rng> ObservationHook<T> for OnlineAttackHook<R> {
    fn observe(&mut self, policy: &DiffusionPolicy<T>, obs: &Observation<T>) -> Result<Observation<T>> {
        let delta = attack_online_global(policy, obs, &self.config, &mut self.rng)?;
        delta.apply(obs)
    }
}

/// Adds the same precomputed perturbation to every observation.
pub struct PerturbationHook {
    pub perturbation: GlobalPerturbation,
}

impl<T: Scalar> ObservationHook<T> for PerturbationHook {
    fn observe(&mut self, _: &DiffusionPolicy<T>, obs: &Observation<T>) -> Result<Observation<T>> {
        self.perturbation.apply(obs)
    }
}

/// Fresh clipped Gaussian noise at every inference.
pub struct RandomNoiseHook<R> {
    pub sigma: f64,
    pub rng: R,
}

impl<T: Scalar, R: Rng> ObservationHook<T> for RandomNoiseHook<R> {
    fn observe(&mut self, _: &DiffusionPolicy<T>, obs: &Observation<T>) -> Result<Observation<T>> {
        random_noise_baseline(obs.frames.shape(), self.sigma, &mut self.rng)?.apply(obs)
    }
}
