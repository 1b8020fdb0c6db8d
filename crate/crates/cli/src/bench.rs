use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Result};
use clap::{Args, ValueEnum};
use dpattack_core::attacks::{patch_from_container, AttackConfig, AttackLoss, GlobalPerturbation};
use dpattack_core::config::RunConfig;
use dpattack_core::diffusion::Scheduler;
use dpattack_core::env::DemoDataset;
use dpattack_core::eval::{
    ablation_sweep, emit_reports, encoder_analysis, run_benchmark, sign_test, timing_comparison, write_csv, write_json,
    AblationAxis, AdversarialSource, Condition, ConditionKind, RolloutReport,
};
use dpattack_core::policy::dataset_observation;
use dpattack_core::tensor::Tensor;
use dpattack_core::{Policy, PolicyObservation};

use crate::common::{load_container, load_dataset, load_policy, parse_scheduler, reject, run_meta, ModeFlags};

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum CondName {
    Clean,
    /// Fresh clipped Gaussian noise at every inference.
    Random,
    /// Noise-prediction PGD at every inference.
    Online,
    /// End-to-end PGD at every inference.
    E2e,
    /// Every --offline artifact.
    Offline,
    /// Every --patch artifact.
    Patch,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Sigma,
    Steps,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// The single --offline artifact.
    Offline,
    /// Per-image PGD.
    Online,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Policy checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Comma-separated conditions; defaults to clean unless an analysis flag
    /// is given.
    #[arg(long, value_delimiter = ',')]
    conditions: Option<Vec<CondName>>,
    /// Offline perturbation artifacts (repeatable).
    #[arg(long)]
    offline: Vec<PathBuf>,
    /// Patch artifacts (repeatable).
    #[arg(long)]
    patch: Vec<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    report_dir: Option<PathBuf>,
    /// Sampling chain used to act during rollouts.
    #[arg(long, value_parser = parse_scheduler)]
    scheduler: Option<Scheduler>,
    /// Budget for random and online conditions.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    mode: ModeFlags,
    /// Online-attack sweep over one parameter.
    #[arg(long)]
    ablate: Option<Axis>,
    /// Encoder feature distances under random and adversarial noise.
    #[arg(long)]
    analyze_encoder: bool,
    /// Images for --analyze-encoder [default: 1000].
    #[arg(long)]
    images: Option<usize>,
    /// Adversarial source for --analyze-encoder.
    #[arg(long, value_enum, default_value_t = Source::Offline)]
    encoder_source: Source,
    /// Wall time of one online attack per loss and chain.
    #[arg(long)]
    timing: bool,
    /// Timed attacks per method for --timing [default: 10].
    #[arg(long)]
    runs: Option<usize>,
    /// Demonstrations for --analyze-encoder and --timing.
    #[arg(long)]
    data: Option<PathBuf>,
}

pub fn run(mut cfg: RunConfig, a: BenchArgs) -> Result<()> {
    let conditions = validate(&a)?;
    if let Some(v) = &a.ckpt {
        cfg.paths.policy = v.clone();
    }
    if let Some(v) = a.episodes {
        cfg.eval.episodes = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
        cfg.eval.seed = v;
        cfg.attack.seed = v;
    }
    if let Some(v) = &a.report_dir {
        cfg.paths.reports = v.clone();
    }
    if let Some(v) = a.scheduler {
        cfg.eval.rollout.scheduler = v;
    }
    if let Some(v) = a.sigma {
        cfg.attack.sigma = v;
    }
    if let Some(v) = a.alpha {
        cfg.attack.alpha = v;
    }
    if let Some(v) = a.steps {
        cfg.attack.steps = v;
    }
    if let Some(v) = &a.data {
        cfg.paths.dataset = v.clone();
    }
    a.mode.apply(&mut cfg.attack.mode);

    let offline = a
        .offline
        .iter()
        .map(|p| Ok((stem(p), GlobalPerturbation::from_container(&load_container(p)?)?)))
        .collect::<Result<Vec<_>>>()?;
    let patches = a
        .patch
        .iter()
        .map(|p| Ok((stem(p), patch_from_container(&load_container(p)?)?)))
        .collect::<Result<Vec<_>>>()?;
    let policy = load_policy(&cfg.paths.policy)?;
    let dir = cfg.paths.reports.clone();
    let hash = cfg.hash();

    if !conditions.is_empty() {
        let conds = build_conditions(&cfg, &conditions, &offline, &patches);
        let reports = run_benchmark(&policy, &cfg.env, &conds, &cfg.eval)?;
        let mut meta = run_meta(&cfg);
        meta["sign_tests"] = sign_tests(&reports)?;
        emit_reports(&dir, "bench", &reports, &hash, cfg.seed, meta)?;
        for r in &reports {
            println!("{:<40} success {:.3}  score {:.3}", r.condition, r.success_rate, r.mean_score);
        }
    }

    if let Some(axis) = a.ablate {
        let axis = match axis {
            Axis::Sigma => AblationAxis::Sigma,
            Axis::Steps => AblationAxis::Steps,
        };
        let table = ablation_sweep(&policy, &cfg.env, &cfg.attack, axis, &cfg.eval)?;
        let stem = format!("ablation_{}", axis.label());
        write_json(dir.join(format!("{stem}.json")), &run_meta(&cfg), &table)?;
        let rows: Vec<Vec<String>> = table
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.sigma.to_string(),
                    r.steps.to_string(),
                    r.alpha.to_string(),
                    r.report.episodes.len().to_string(),
                    r.report.success_rate.to_string(),
                    r.report.mean_score.to_string(),
                    hash.clone(),
                    cfg.seed.to_string(),
                ]
            })
            .collect();
        let header = ["sigma", "steps", "alpha", "n", "success_rate", "mean_score", "config_hash", "seed"];
        write_csv(dir.join(format!("{stem}.csv")), &header, &rows)?;
        for r in &table.rows {
            println!("σ={:<5} N={:<3} α={:.6}  success {:.3}", r.sigma, r.steps, r.alpha, r.report.success_rate);
        }
    }

    if a.analyze_encoder {
        let ds = load_dataset(&cfg.paths.dataset)?;
        // An offline artifact carries its own budget unless --sigma pins one.
        let (sigma, source) = match a.encoder_source {
            Source::Offline => {
                let d = offline[0].1.clone();
                (a.sigma.unwrap_or(d.sigma), AdversarialSource::Offline(d))
            }
            Source::Online => (cfg.attack.sigma, AdversarialSource::Online(cfg.attack.clone())),
        };
        let r = encoder_analysis(&policy, &ds, a.images.unwrap_or(1000), sigma, &source, cfg.eval.seed)?;
        write_json(dir.join("encoder_distances.json"), &run_meta(&cfg), &r)?;
        let mut rows = Vec::with_capacity(2 * r.n);
        for (kind, ds) in [("random", &r.random), ("adversarial", &r.adversarial)] {
            for (i, (&(e, t), d)) in r.images.iter().zip(ds).enumerate() {
                let fields = [i.to_string(), e.to_string(), t.to_string(), kind.into(), d.to_string()];
                rows.push(fields.into_iter().chain([hash.clone(), cfg.seed.to_string()]).collect());
            }
        }
        let header = ["image", "episode", "t", "perturbation", "distance", "config_hash", "seed"];
        write_csv(dir.join("encoder_distances.csv"), &header, &rows)?;
        println!(
            "encoder distance median: random {:.4}, adversarial {:.4} (ratio of means {:.2})",
            r.random_summary.median,
            r.adversarial_summary.median,
            r.ratio()
        );
    }

    if a.timing {
        let ds = load_dataset(&cfg.paths.dataset)?;
        let runs = a.runs.unwrap_or(10);
        let obs = sample_observations(&policy, &ds, runs)?;
        let t = timing_comparison(&policy, &obs, &cfg.attack, runs, cfg.attack.seed)?;
        write_json(dir.join("timing.json"), &run_meta(&cfg), &t)?;
        let rows: Vec<Vec<String>> = t
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.method.clone(),
                    r.mode.label().into(),
                    r.runs.to_string(),
                    r.median_ms.to_string(),
                    t.cpu.clone(),
                    t.threads.to_string(),
                    t.pgd_steps.to_string(),
                    hash.clone(),
                    cfg.seed.to_string(),
                ]
            })
            .collect();
        let header = ["method", "mode", "runs", "median_ms", "cpu", "threads", "pgd_steps", "config_hash", "seed"];
        write_csv(dir.join("timing.csv"), &header, &rows)?;
        for r in &t.rows {
            println!("{:<18} {:<10} {:>10.1} ms", r.method, r.mode.label(), r.median_ms);
        }
    }
    log::info!("reports in {}", dir.display());
    Ok(())
}

/// Resolves the condition list, rejecting flags the run would ignore.
fn validate(a: &BenchArgs) -> Result<Vec<CondName>> {
    let analysis = a.ablate.is_some() || a.analyze_encoder || a.timing;
    let conds = match &a.conditions {
        Some(c) => {
            ensure!(!c.is_empty(), "--conditions is empty");
            let mut seen = Vec::new();
            for n in c {
                ensure!(!seen.contains(n), "condition {n:?} listed twice");
                seen.push(*n);
            }
            seen
        }
        None if analysis => Vec::new(),
        None => vec![CondName::Clean],
    };
    let has = |n| conds.contains(&n);
    let online = has(CondName::Online) || has(CondName::E2e);
    let encoder_online = a.analyze_encoder && a.encoder_source == Source::Online;
    let pgd = online || a.ablate.is_some() || a.timing || encoder_online;
    if !pgd {
        reject(
            &[
                ("--targeted/--untargeted", a.mode.given()),
                ("--alpha", a.alpha.is_some()),
                ("--steps", a.steps.is_some()),
            ],
            "need an online condition, --ablate, --timing or --encoder-source online",
        )?;
    }
    if a.sigma.is_some() && !(pgd || has(CondName::Random) || a.analyze_encoder) {
        bail!("--sigma needs a random or online condition, or an analysis flag");
    }
    if a.ablate == Some(Axis::Sigma) {
        reject(&[("--sigma", a.sigma.is_some())], "conflicts with --ablate sigma, which sets the budget")?;
    }
    if a.ablate == Some(Axis::Steps) {
        reject(&[("--steps", a.steps.is_some()), ("--alpha", a.alpha.is_some())], "conflict with --ablate steps")?;
    }
    if has(CondName::Offline) {
        ensure!(!a.offline.is_empty(), "the offline condition needs at least one --offline artifact");
    }
    if has(CondName::Patch) {
        ensure!(!a.patch.is_empty(), "the patch condition needs at least one --patch artifact");
    }
    if a.analyze_encoder && a.encoder_source == Source::Offline {
        ensure!(a.offline.len() == 1, "--encoder-source offline needs exactly one --offline artifact");
    } else if !a.offline.is_empty() && !has(CondName::Offline) {
        bail!("--offline given but the offline condition is not requested");
    }
    if !a.patch.is_empty() && !has(CondName::Patch) {
        bail!("--patch given but the patch condition is not requested");
    }
    if !a.analyze_encoder {
        reject(&[("--images", a.images.is_some())], "applies only to --analyze-encoder")?;
    }
    if !a.timing {
        reject(&[("--runs", a.runs.is_some())], "applies only to --timing")?;
    }
    if !(a.analyze_encoder || a.timing) {
        reject(&[("--data", a.data.is_some())], "applies only to --analyze-encoder and --timing")?;
    }
    Ok(conds)
}

fn build_conditions(
    cfg: &RunConfig,
    names: &[CondName],
    offline: &[(String, GlobalPerturbation)],
    patches: &[(String, Tensor<f64>)],
) -> Vec<Condition> {
    let ac = &cfg.attack;
    let online_label = |kind: &str| format!("{}-{kind}-sigma{}-n{}", ac.mode.label(), ac.sigma, ac.steps);
    let mut out = Vec::new();
    for n in names {
        match n {
            CondName::Clean => out.push(Condition::new("clean", ConditionKind::Clean)),
            CondName::Random => out.push(Condition::new(
                format!("random-sigma{}", ac.sigma),
                ConditionKind::RandomNoise { sigma: ac.sigma },
            )),
            CondName::Online => out.push(Condition::new(
                online_label("online"),
                ConditionKind::Online(AttackConfig {
                    loss: AttackLoss::NoisePrediction,
                    ..ac.clone()
                }),
            )),
            CondName::E2e => out.push(Condition::new(
                online_label("e2e"),
                ConditionKind::Online(AttackConfig {
                    loss: AttackLoss::EndToEnd,
                    ..ac.clone()
                }),
            )),
            CondName::Offline => out.extend(
                offline
                    .iter()
                    .map(|(s, d)| Condition::new(format!("offline:{s}"), ConditionKind::Offline(d.clone()))),
            ),
            CondName::Patch => out.extend(
                patches
                    .iter()
                    .map(|(s, p)| Condition::new(format!("patch:{s}"), ConditionKind::Patch(p.clone()))),
            ),
        }
    }
    out
}

/// Paired sign test of every condition against the clean one, if present.
fn sign_tests(reports: &[RolloutReport]) -> Result<serde_json::Value> {
    let Some(clean) = reports.iter().find(|r| r.condition == "clean") else {
        return Ok(serde_json::Value::Null);
    };
    let mut out = serde_json::Map::new();
    for r in reports.iter().filter(|r| r.condition != "clean") {
        let t = sign_test(&clean.successes(), &r.successes())?;
        out.insert(r.condition.clone(), serde_json::to_value(t)?);
    }
    Ok(out.into())
}

/// `n` evenly spaced dataset observations.
fn sample_observations(
    policy: &Policy,
    ds: &DemoDataset,
    n: usize,
) -> Result<Vec<PolicyObservation>> {
    let steps: Vec<(usize, usize)> = ds
        .meta
        .lengths
        .iter()
        .enumerate()
        .flat_map(|(e, &len)| (0..len).map(move |t| (e, t)))
        .collect();
    ensure!(!steps.is_empty(), "dataset has no steps");
    let n = n.min(steps.len());
    (0..n)
        .map(|i| Ok(dataset_observation(ds, &policy.config, steps[i * steps.len() / n])?))
        .collect()
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}
