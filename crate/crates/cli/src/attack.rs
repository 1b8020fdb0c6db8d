use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use dpattack_core::attacks::{
    attack_offline_global, attack_online_global, attack_patch, patch_to_container, random_noise_baseline, AttackLoss,
};
use dpattack_core::config::RunConfig;
use dpattack_core::diffusion::Scheduler;
use dpattack_core::eval::{emit_reports, run_benchmark, Condition, ConditionKind};
use dpattack_core::io::ppm;
use dpattack_core::policy::dataset_observation;
use dpattack_core::seed;

use crate::common::{load_dataset, load_policy, parse_scheduler, reject, run_meta, save, ModeFlags};

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    /// Per-observation PGD on the noise-prediction loss.
    Online,
    /// One perturbation for the whole dataset.
    Offline,
    /// A printable patch trained under random placements.
    Patch,
    /// Per-observation PGD through the full sampling chain.
    E2e,
    /// Clipped Gaussian noise, the non-adversarial baseline.
    Random,
}

impl AttackKind {
    fn name(self) -> &'static str {
        match self {
            AttackKind::Online => "online",
            AttackKind::Offline => "offline",
            AttackKind::Patch => "patch",
            AttackKind::E2e => "e2e",
            AttackKind::Random => "random",
        }
    }
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    kind: AttackKind,
    /// Policy checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Demonstrations used by offline and patch training.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Infinity-norm budget.
    #[arg(long)]
    sigma: Option<f64>,
    /// PGD step size.
    #[arg(long)]
    alpha: Option<f64>,
    /// PGD steps per observation.
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    mode: ModeFlags,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Patch side in pixels.
    #[arg(long)]
    patch_size: Option<usize>,
    /// Sampling chain for clean references and end-to-end losses.
    #[arg(long, value_parser = parse_scheduler)]
    scheduler: Option<Scheduler>,
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Attack the observation at --obs-index of this dataset and save the
    /// perturbation. Without it, online and e2e run inside a benchmark.
    #[arg(long)]
    obs_source: Option<PathBuf>,
    /// Flat step index into --obs-source.
    #[arg(long, requires = "obs_source")]
    obs_index: Option<usize>,
    /// Benchmark episodes when attacking inside the rollout loop.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    report_dir: Option<PathBuf>,
}

pub fn run(mut cfg: RunConfig, a: AttackArgs) -> Result<()> {
    validate(&a)?;
    let online = matches!(a.kind, AttackKind::Online | AttackKind::E2e);
    if let Some(v) = a.sigma {
        cfg.attack.sigma = v;
    }
    if let Some(v) = a.alpha {
        if online {
            cfg.attack.alpha = v;
        } else {
            cfg.offline.alpha = v;
        }
    }
    if let Some(v) = a.steps {
        cfg.attack.steps = v;
    }
    if matches!(a.kind, AttackKind::Patch) {
        a.mode.apply(&mut cfg.patch.mode);
    } else {
        a.mode.apply(&mut cfg.attack.mode);
    }
    if let Some(v) = a.epochs {
        cfg.offline.epochs = v;
        cfg.patch.epochs = v;
    }
    if let Some(v) = a.batch {
        cfg.offline.batch = v;
        cfg.patch.batch = v;
    }
    if let Some(v) = a.patch_size {
        cfg.patch.size = v;
    }
    if let Some(v) = a.scheduler {
        cfg.attack.scheduler = v;
    }
    if a.kind == AttackKind::E2e {
        cfg.attack.loss = AttackLoss::EndToEnd;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
        cfg.attack.seed = v;
    }
    if let Some(v) = a.ckpt {
        cfg.paths.policy = v;
    }
    if let Some(v) = &a.data {
        cfg.paths.dataset = v.clone();
    }
    if let Some(v) = a.episodes {
        cfg.eval.episodes = v;
    }
    if let Some(v) = a.report_dir {
        cfg.paths.reports = v;
    }
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.artifacts.join(format!("{}.dpab", a.kind.name())));
    let mut rng = seed::rng(cfg.attack.seed, seed::ATTACK, 0);

    if a.kind == AttackKind::Random {
        let s = cfg.env.image_size;
        let d = random_noise_baseline(&[3, s, s], cfg.attack.sigma, &mut rng)?;
        return save(d.to_container(serde_json::Value::Null)?, &out, &cfg);
    }

    let policy = load_policy(&cfg.paths.policy)?;
    match a.kind {
        AttackKind::Online | AttackKind::E2e => match &a.obs_source {
            Some(src) => {
                let ds = load_dataset(src)?;
                let index = a.obs_index.unwrap_or(0);
                let (e, t) = locate(&ds.meta.lengths, index)
                    .with_context(|| format!("--obs-index {index} is past the {} steps of {}", ds.num_steps(), src.display()))?;
                let obs = dataset_observation(&ds, &policy.config, (e, t))?;
                let d = attack_online_global(&policy, &obs, &cfg.attack, &mut rng)?;
                log::info!("episode {e} step {t}: ‖δ‖∞ = {:.5}", d.linf());
                save(d.to_container(serde_json::json!({"episode": e, "t": t}))?, &out, &cfg)
            }
            None => {
                log::info!("no --obs-source: attacking inside {} benchmark episodes", cfg.eval.episodes);
                let label = a.kind.name();
                let conds = [Condition::new(label, ConditionKind::Online(cfg.attack.clone()))];
                let reports = run_benchmark(&policy, &cfg.env, &conds, &cfg.eval)?;
                emit_reports(&cfg.paths.reports, label, &reports, &cfg.hash(), cfg.seed, run_meta(&cfg))?;
                log::info!("reports in {}", cfg.paths.reports.display());
                Ok(())
            }
        },
        AttackKind::Offline => {
            let ds = load_dataset(&cfg.paths.dataset)?;
            let mut ac = cfg.attack.clone();
            ac.alpha = cfg.offline.alpha;
            let d = attack_offline_global(&policy, &ds, &ac, cfg.offline.epochs, cfg.offline.batch, &mut rng, |e, l| {
                log::info!("epoch {e}/{} loss {l:.6}", cfg.offline.epochs)
            })?;
            log::info!("‖δ‖∞ = {:.5}", d.linf());
            save(d.to_container(serde_json::Value::Null)?, &out, &cfg)
        }
        AttackKind::Patch => {
            let ds = load_dataset(&cfg.paths.dataset)?;
            let mut ac = cfg.attack.clone();
            ac.alpha = cfg.offline.alpha;
            let patch = attack_patch(&policy, &ds, &ac, &cfg.patch, &mut rng, |e, l| {
                log::info!("epoch {e}/{} loss {l:.6}", cfg.patch.epochs)
            })?;
            save(patch_to_container(&patch, serde_json::Value::Null)?, &out, &cfg)?;
            let image = out.with_extension("ppm");
            let note = format!("config_hash {} seed {}", cfg.hash(), cfg.seed);
            ppm::write_commented(&image, &patch, Some(&note))?;
            log::info!("wrote {}", image.display());
            Ok(())
        }
        AttackKind::Random => unreachable!("handled above"),
    }
}

/// Rejects flags that the chosen attack would silently ignore.
fn validate(a: &AttackArgs) -> Result<()> {
    let kind = a.kind.name();
    let per_obs = a.obs_source.is_some();
    match a.kind {
        AttackKind::Random => reject(
            &[
                ("--ckpt", a.ckpt.is_some()),
                ("--data", a.data.is_some()),
                ("--alpha", a.alpha.is_some()),
                ("--steps", a.steps.is_some()),
                ("--targeted/--untargeted", a.mode.given()),
                ("--epochs", a.epochs.is_some()),
                ("--batch", a.batch.is_some()),
                ("--patch-size", a.patch_size.is_some()),
                ("--scheduler", a.scheduler.is_some()),
                ("--obs-source", per_obs),
                ("--episodes", a.episodes.is_some()),
                ("--report-dir", a.report_dir.is_some()),
            ],
            "do not apply to random noise",
        ),
        AttackKind::Online | AttackKind::E2e => {
            reject(
                &[
                    ("--data", a.data.is_some()),
                    ("--epochs", a.epochs.is_some()),
                    ("--batch", a.batch.is_some()),
                    ("--patch-size", a.patch_size.is_some()),
                ],
                &format!("do not apply to the {kind} attack"),
            )?;
            if per_obs {
                reject(
                    &[("--episodes", a.episodes.is_some()), ("--report-dir", a.report_dir.is_some())],
                    "apply only when attacking inside the benchmark (drop --obs-source)",
                )
            } else {
                reject(&[("--out", a.out.is_some())], "needs --obs-source; inside the benchmark only reports are written")
            }
        }
        AttackKind::Offline | AttackKind::Patch => {
            reject(
                &[
                    ("--steps", a.steps.is_some()),
                    ("--obs-source", per_obs),
                    ("--episodes", a.episodes.is_some()),
                    ("--report-dir", a.report_dir.is_some()),
                ],
                &format!("do not apply to the {kind} attack"),
            )?;
            if a.kind == AttackKind::Offline {
                reject(&[("--patch-size", a.patch_size.is_some())], "applies only to the patch attack")?;
            } else {
                reject(&[("--sigma", a.sigma.is_some())], "does not apply to patches, which are unbounded in [0, 1]")?;
            }
            Ok(())
        }
    }?;
    if let Some(s) = a.sigma {
        ensure!(s.is_finite() && s >= 0.0, "--sigma must be finite and non-negative");
    }
    if a.alpha.is_some_and(|v| !(v > 0.0 && v.is_finite())) {
        bail!("--alpha must be finite and positive");
    }
    Ok(())
}

/// `(episode, t)` of the `index`-th step when episodes are laid end to end.
fn locate(lengths: &[usize], mut index: usize) -> Option<(usize, usize)> {
    for (e, &n) in lengths.iter().enumerate() {
        if index < n {
            return Some((e, index));
        }
        index -= n;
    }
    None
}
