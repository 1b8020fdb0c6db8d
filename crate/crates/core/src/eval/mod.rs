//! Seeded rollouts under attack conditions, parameter sweeps, attack timing
//! and encoder feature distances.

mod report;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    attack_online_global, random_noise_baseline, AttackConfig, AttackLoss, AttackMode, GlobalPerturbation,
    OnlineAttackHook, PerturbationHook, RandomNoiseHook,
};
use crate::diffusion::Scheduler;
use crate::env::{DemoDataset, EnvConfig, ScenePatch};
use crate::error::{Error, Result};
use crate::policy::{
    dataset_observation, dataset_samples, receding_horizon_execute, DiffusionPolicy, Observation, ObservationHook,
    RolloutConfig, RolloutTrace,
};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

pub use report::{emit_reports, sign_test, write_csv, write_json, SignTest};

/// What the policy faces during a benchmark condition.
#[derive(Clone, Debug)]
pub enum ConditionKind {
    Clean,
    /// Fresh clipped Gaussian noise per inference.
    RandomNoise { sigma: f64 },
    /// PGD rerun at every inference.
    Online(AttackConfig),
    /// One precomputed perturbation for every inference.
    Offline(GlobalPerturbation),
    /// A printed patch lying in the scene at a random pose per episode.
    Patch(Tensor<f64>),
}

#[derive(Clone, Debug)]
pub struct Condition {
    pub label: String,
    pub kind: ConditionKind,
}

impl Condition {
    pub fn new(label: impl Into<String>, kind: ConditionKind) -> Self {
        Self {
            label: label.into(),
            kind,
        }
    }

    /// Budget the condition promises, if it perturbs pixels additively.
    pub fn sigma(&self) -> Option<f64> {
        match &self.kind {
            ConditionKind::RandomNoise { sigma } => Some(*sigma),
            ConditionKind::Online(c) => Some(c.sigma),
            ConditionKind::Offline(d) => Some(d.sigma),
            ConditionKind::Clean | ConditionKind::Patch(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub episodes: usize,
    pub seed: u64,
    pub rollout: RolloutConfig,
    /// Worker cap for episode-level parallelism; 0 uses every core.
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            seed: 0,
            rollout: RolloutConfig::default(),
            threads: 1,
        }
    }
}

impl BenchConfig {
    /// Environment seed of episode `i`, shared by every condition.
    pub fn episode_seed(&self, i: usize) -> u64 {
        seed::derive(self.seed, seed::EVAL, i as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub score: f64,
    pub success: bool,
    pub steps: usize,
    /// Attack wall time per inference.
    pub attack_ms: Vec<f64>,
    pub max_perturbation: f64,
    pub range_violations: usize,
    pub hooked_frames: usize,
}

impl EpisodeRecord {
    fn from_trace(t: &RolloutTrace) -> Self {
        Self {
            seed: t.env_seed,
            score: t.score,
            success: t.success,
            steps: t.actions.len(),
            attack_ms: t.hook_ms.clone(),
            max_perturbation: t.max_perturbation,
            range_violations: t.range_violations,
            hooked_frames: t.hooked_frames,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub condition: String,
    /// Budget of the condition, if any.
    pub sigma: Option<f64>,
    pub episodes: Vec<EpisodeRecord>,
    pub success_rate: f64,
    pub mean_score: f64,
    pub mean_attack_ms: f64,
    pub total_attack_ms: f64,
}

impl RolloutReport {
    pub fn from_episodes(condition: impl Into<String>, sigma: Option<f64>, episodes: Vec<EpisodeRecord>) -> Self {
        let n = episodes.len();
        let successes = episodes.iter().filter(|e| e.success).count();
        let (success_rate, mean_score) = if n == 0 {
            (0.0, 0.0)
        } else {
            (successes as f64 / n as f64, episodes.iter().map(|e| e.score).sum::<f64>() / n as f64)
        };
        let times: Vec<f64> = episodes.iter().flat_map(|e| e.attack_ms.iter().copied()).collect();
        let total_attack_ms: f64 = times.iter().sum();
        let mean_attack_ms = if times.is_empty() { 0.0 } else { total_attack_ms / times.len() as f64 };
        Self {
            condition: condition.into(),
            sigma,
            episodes,
            success_rate,
            mean_score,
            mean_attack_ms,
            total_attack_ms,
        }
    }

    /// Aggregates recomputed from the episode records match the stored ones.
    pub fn is_consistent(&self) -> bool {
        let r = Self::from_episodes(self.condition.clone(), self.sigma, self.episodes.clone());
        r.success_rate == self.success_rate
            && r.mean_score == self.mean_score
            && r.mean_attack_ms == self.mean_attack_ms
            && r.total_attack_ms == self.total_attack_ms
    }

    pub fn successes(&self) -> Vec<bool> {
        self.episodes.iter().map(|e| e.success).collect()
    }

    /// Frames whose realized perturbation exceeds `σ + tol` or whose pixels
    /// left `[0, 1]`, summed over every hooked inference.
    pub fn budget_violations(&self, tol: f64) -> usize {
        self.episodes
            .iter()
            .map(|e| {
                let over = self.sigma.is_some_and(|s| e.max_perturbation > s + tol) as usize;
                over + e.range_violations
            })
            .sum()
    }

    pub fn hooked_frames(&self) -> usize {
        self.episodes.iter().map(|e| e.hooked_frames).sum()
    }

    /// The report without wall-clock fields; reruns with equal seeds produce
    /// identical payloads.
    pub fn payload(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v.as_object_mut().map(|o| {
            o.remove("mean_attack_ms");
            o.remove("total_attack_ms");
        });
        if let Some(eps) = v["episodes"].as_array_mut() {
            for e in eps {
                e.as_object_mut().map(|o| o.remove("attack_ms"));
            }
        }
        v
    }
}

fn run_episode<T: Scalar>(
    policy: &DiffusionPolicy<T>,
    env: &EnvConfig,
    condition: &Condition,
    cfg: &BenchConfig,
    i: usize,
) -> Result<EpisodeRecord> {
    let env_seed = cfg.episode_seed(i);
    let mut rng = seed::rng(env_seed, seed::EVAL, 0);
    let attack_rng = seed::rng(env_seed, seed::ATTACK, 0);
    let mut online;
    let mut offline;
    let mut noise;
    let mut scene = None;
    let hook: Option<&mut dyn ObservationHook<T>> = match &condition.kind {
        ConditionKind::Clean => None,
        ConditionKind::RandomNoise { sigma } => {
            noise = RandomNoiseHook {
                sigma: *sigma,
                rng: attack_rng,
            };
            Some(&mut noise)
        }
        ConditionKind::Online(c) => {
            online = OnlineAttackHook {
                config: c.clone(),
                rng: attack_rng,
            };
            Some(&mut online)
        }
        ConditionKind::Offline(d) => {
            offline = PerturbationHook { perturbation: d.clone() };
            Some(&mut offline)
        }
        ConditionKind::Patch(image) => {
            let size = image.shape()[1] as f64 / env.image_size as f64;
            let (center, angle) = ScenePatch::sample_pose(env, size, &mut seed::rng(env_seed, seed::ATTACK, 1));
            scene = Some(ScenePatch::new(image.clone(), center, angle, size)?);
            None
        }
    };
    let trace = receding_horizon_execute(policy, env, env_seed, &cfg.rollout, scene.as_ref(), hook, &mut rng)?;
    Ok(EpisodeRecord::from_trace(&trace))
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::usage(format!("thread pool: {e}")))
}

/// `cfg.episodes` seeded rollouts per condition. Episode `i` starts from the
/// same state under every condition; results are ordered by episode index.
pub fn run_benchmark<T: Scalar>(
    policy: &DiffusionPolicy<T>,
    env: &EnvConfig,
    conditions: &[Condition],
    cfg: &BenchConfig,
) -> Result<Vec<RolloutReport>> {
    let workers = pool(cfg.threads)?;
    conditions
        .iter()
        .map(|c| {
            let episodes = workers.install(|| {
                (0..cfg.episodes)
                    .into_par_iter()
                    .map(|i| run_episode(policy, env, c, cfg, i))
                    .collect::<Result<Vec<_>>>()
            })?;
            let r = RolloutReport::from_episodes(c.label.clone(), c.sigma(), episodes);
            log::info!("{}: success rate {:.3}, mean score {:.3}", r.condition, r.success_rate, r.mean_score);
            Ok(r)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Budgets 0.01, 0.03, 0.05 at 50 steps.
    Sigma,
    /// 10, 20, 50 steps at budget 0.03.
    Steps,
}

impl AblationAxis {
    pub fn settings(&self) -> Vec<(f64, usize)> {
        match self {
            AblationAxis::Sigma => vec![(0.01, 50), (0.03, 50), (0.05, 50)],
            AblationAxis::Steps => vec![(0.03, 10), (0.03, 20), (0.03, 50)],
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            AblationAxis::Sigma => "sigma",
            AblationAxis::Steps => "steps",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub sigma: f64,
    pub steps: usize,
    pub alpha: f64,
    pub report: RolloutReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn success_rates(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.report.success_rate).collect()
    }
}

/// Online attacks along one parameter axis with `α = 2σ/N`.
pub fn ablation_sweep<T: Scalar>(
    policy: &DiffusionPolicy<T>,
    env: &EnvConfig,
    base: &AttackConfig,
    axis: AblationAxis,
    cfg: &BenchConfig,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (sigma, steps) in axis.settings() {
        let ac = base.with_budget(sigma, steps);
        let label = format!("{}-online-sigma{sigma}-n{steps}", ac.mode.label());
        let alpha = ac.alpha;
        let report = run_benchmark(policy, env, &[Condition::new(label, ConditionKind::Online(ac))], cfg)?
            .pop()
            .expect("one condition");
        rows.push(AblationRow {
            sigma,
            steps,
            alpha,
            report,
        });
    }
    Ok(AblationTable { axis, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub mode: AttackMode,
    pub runs: usize,
    pub median_ms: f64,
    pub samples_ms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub cpu: String,
    pub threads: usize,
    pub pgd_steps: usize,
    pub rows: Vec<TimingRow>,
}

impl TimingReport {
    pub fn median(&self, method: &str, mode: AttackMode) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.mode == mode)
            .map(|r| r.median_ms)
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// CPU model from `/proc/cpuinfo`, when available.
pub fn cpu_model() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string())
}

/// Median wall time per online attack for the noise-prediction loss and the
/// end-to-end loss through DDPM and DDIM-8, targeted and untargeted. Attack
/// `r` runs on `observations[r % len]`.
pub fn timing_comparison<T: Scalar>(
    policy: &DiffusionPolicy<T>,
    observations: &[Observation<T>],
    base: &AttackConfig,
    runs: usize,
    seed: u64,
) -> Result<TimingReport> {
    if observations.is_empty() || runs == 0 {
        return Err(Error::usage("timing needs observations and at least one run"));
    }
    let methods = [
        ("noise_prediction", AttackLoss::NoisePrediction, base.scheduler),
        ("end2end_ddpm", AttackLoss::EndToEnd, Scheduler::Ddpm),
        ("end2end_ddim8", AttackLoss::EndToEnd, Scheduler::Ddim(8)),
    ];
    let mut rows = Vec::new();
    for mode in [AttackMode::Targeted, AttackMode::Untargeted] {
        for (name, loss, scheduler) in methods {
            let cfg = AttackConfig {
                mode,
                loss,
                scheduler,
                ..base.clone()
            };
            let mut rng = seed::rng(seed, seed::ATTACK, rows.len() as u64);
            let mut samples_ms = Vec::with_capacity(runs);
            for r in 0..runs {
                let obs = &observations[r % observations.len()];
                let t0 = Instant::now();
                let d = attack_online_global(policy, obs, &cfg, &mut rng)?;
                samples_ms.push(t0.elapsed().as_secs_f64() * 1e3);
                debug_assert!(d.within_budget());
            }
            log::info!("{name} {}: median {:.1} ms", mode.label(), median(&samples_ms));
            rows.push(TimingRow {
                method: name.into(),
                mode,
                runs,
                median_ms: median(&samples_ms),
                samples_ms,
            });
        }
    }
    Ok(TimingReport {
        cpu: cpu_model(),
        threads: rayon::current_num_threads(),
        pgd_steps: base.steps,
        rows,
    })
}

/// Where the adversarial perturbation of the encoder analysis comes from.
#[derive(Clone, Debug)]
pub enum AdversarialSource {
    Offline(GlobalPerturbation),
    /// Per-image PGD with this configuration.
    Online(AttackConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            if v.is_empty() {
                return f64::NAN;
            }
            let x = p * (v.len() - 1) as f64;
            let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
            v[lo] + (x - lo as f64) * (v[hi] - v[lo])
        };
        Self {
            mean: v.iter().sum::<f64>() / v.len().max(1) as f64,
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderAnalysisReport {
    pub n: usize,
    pub sigma: f64,
    /// Dataset sample `(episode, step)` behind each distance.
    pub images: Vec<(usize, usize)>,
    /// `‖E(x) − E(x + δ_rand)‖²` per image.
    pub random: Vec<f64>,
    /// `‖E(x) − E(x + δ_adv)‖²` per image.
    pub adversarial: Vec<f64>,
    pub random_summary: Summary,
    pub adversarial_summary: Summary,
}

impl EncoderAnalysisReport {
    pub fn ratio(&self) -> f64 {
        self.adversarial_summary.mean / self.random_summary.mean
    }
}

/// Encoder feature displacement under random versus adversarial
/// perturbations of equal budget over `n` evenly spaced dataset images.
pub fn encoder_analysis<T: Scalar>(
    policy: &DiffusionPolicy<T>,
    dataset: &DemoDataset,
    n: usize,
    sigma: f64,
    adversarial: &AdversarialSource,
    seed: u64,
) -> Result<EncoderAnalysisReport> {
    let all = dataset_samples(dataset);
    if all.is_empty() || n == 0 {
        return Err(Error::usage("encoder analysis needs images"));
    }
    let len = all.len();
    let images: Vec<(usize, usize)> = (0..n)
        .map(|i| if n <= len { all[i * len / n] } else { all[i % len] })
        .collect();
    let adv_sigma = match adversarial {
        AdversarialSource::Offline(d) => d.sigma,
        AdversarialSource::Online(c) => c.sigma,
    };
    if adv_sigma != sigma {
        return Err(Error::usage(format!("adversarial budget {adv_sigma} differs from random budget {sigma}")));
    }
    let mut random = Vec::with_capacity(n);
    let mut adv = Vec::with_capacity(n);
    for (i, &s) in images.iter().enumerate() {
        let obs: Observation<T> = dataset_observation(dataset, &policy.config, s)?;
        let clean = policy.encode_observation(&obs)?;
        let mut rng = seed::rng(seed, seed::ATTACK, i as u64);
        let rd = random_noise_baseline(obs.frames.shape(), sigma, &mut rng)?;
        let ad = match adversarial {
            AdversarialSource::Offline(d) => d.clone(),
            AdversarialSource::Online(c) => attack_online_global(policy, &obs, c, &mut rng)?,
        };
        let dist = |d: &GlobalPerturbation| -> Result<f64> {
            let e = policy.encode_observation(&d.apply(&obs)?)?;
            Ok(e.sq_dist(&clean)?.as_f64())
        };
        random.push(dist(&rd)?);
        adv.push(dist(&ad)?);
    }
    Ok(EncoderAnalysisReport {
        n,
        sigma,
        images,
        random_summary: Summary::of(&random),
        adversarial_summary: Summary::of(&adv),
        random,
        adversarial: adv,
    })
}
