use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use dpattack_core::attacks::AttackMode;
use dpattack_core::config::RunConfig;
use dpattack_core::diffusion::Scheduler;
use dpattack_core::env::DemoDataset;
use dpattack_core::io::Container;
use dpattack_core::Policy;

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

/// Stamped into every file a command writes.
pub fn run_meta(cfg: &RunConfig) -> serde_json::Value {
    serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "config": cfg,
    })
}

/// `ddpm` or `ddim<n>`.
pub fn parse_scheduler(s: &str) -> Result<Scheduler, String> {
    match s {
        "ddpm" => Ok(Scheduler::Ddpm),
        _ => match s.strip_prefix("ddim").map(str::parse::<usize>) {
            Some(Ok(n)) if n > 0 => Ok(Scheduler::Ddim(n)),
            _ => Err(format!("expected ddpm or ddim<steps>, got {s:?}")),
        },
    }
}

/// Mutually exclusive attack-objective switches.
#[derive(Args, Debug, Clone, Copy, Default)]
pub struct ModeFlags {
    /// Pull predictions toward the configured target trajectory.
    #[arg(long, conflicts_with = "untargeted")]
    pub targeted: bool,
    /// Push predictions away from the clean ones.
    #[arg(long)]
    pub untargeted: bool,
}

impl ModeFlags {
    pub fn given(&self) -> bool {
        self.targeted || self.untargeted
    }

    pub fn apply(&self, mode: &mut AttackMode) {
        if self.targeted {
            *mode = AttackMode::Targeted;
        } else if self.untargeted {
            *mode = AttackMode::Untargeted;
        }
    }
}

pub fn load_container(path: &Path) -> Result<Container> {
    Container::load(path).with_context(|| format!("loading {}", path.display()))
}

pub fn load_policy(path: &Path) -> Result<Policy> {
    Policy::from_container(&load_container(path)?).with_context(|| format!("{} is not a policy", path.display()))
}

pub fn load_dataset(path: &Path) -> Result<DemoDataset> {
    DemoDataset::from_container(&load_container(path)?).with_context(|| format!("{} is not a dataset", path.display()))
}

pub fn save(mut c: Container, path: &Path, cfg: &RunConfig) -> Result<()> {
    c.metadata["run"] = run_meta(cfg);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    c.save(path).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// Fails with `msg` when any of the named flags was given.
pub fn reject(flags: &[(&str, bool)], msg: &str) -> Result<()> {
    let given: Vec<&str> = flags.iter().filter(|(_, on)| *on).map(|(n, _)| *n).collect();
    if !given.is_empty() {
        bail!("{} {msg}", given.join(", "));
    }
    Ok(())
}
