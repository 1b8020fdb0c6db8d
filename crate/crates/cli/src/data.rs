use std::path::PathBuf;

use anyhow::{ensure, Context, Result};
use clap::Args;
use dpattack_core::config::RunConfig;
use dpattack_core::env::generate_dataset;
use dpattack_core::Trainer;

use crate::common::{load_container, load_dataset, save};

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Successful demonstrations to keep.
    #[arg(long)]
    episodes: Option<usize>,
    /// Step limit for each expert attempt.
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn gen_data(mut cfg: RunConfig, a: GenDataArgs) -> Result<()> {
    if let Some(v) = a.episodes {
        cfg.data.episodes = v;
    }
    if let Some(v) = a.max_steps {
        cfg.data.max_steps = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.out {
        cfg.paths.dataset = v;
    }
    let ds = generate_dataset(&cfg.env, cfg.data.episodes, cfg.data.max_steps, cfg.seed)?;
    log::info!(
        "{} episodes ({} attempts), {} steps in total",
        ds.episodes.len(),
        ds.meta.attempts,
        ds.num_steps()
    );
    save(ds.to_container()?, &cfg.paths.dataset, &cfg)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Demonstration file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Total epochs; with --resume, training continues up to this count.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Noise draws per observation in each minibatch.
    #[arg(long)]
    noise_draws: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint written after every epoch.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

pub fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(v) = a.data {
        cfg.paths.dataset = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch {
        cfg.train.batch = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.noise_draws {
        cfg.train.noise_draws = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
        cfg.train.seed = v;
    }
    if let Some(v) = a.out {
        cfg.paths.policy = v;
    }
    let ds = load_dataset(&cfg.paths.dataset)?;
    let mut state = match &a.resume {
        Some(path) => {
            let st = Trainer::from_container(&load_container(path)?)
                .with_context(|| format!("{} holds no resumable training state", path.display()))?;
            ensure!(
                st.epoch <= cfg.train.epochs,
                "checkpoint is already at epoch {}, past --epochs {}",
                st.epoch,
                cfg.train.epochs
            );
            if st.policy.config != cfg.policy {
                log::warn!("using the architecture stored in the checkpoint");
                cfg.policy = st.policy.config.clone();
            }
            log::info!("resuming at epoch {}", st.epoch);
            st
        }
        None => Trainer::init(&ds, cfg.policy.clone(), cfg.train.seed)?,
    };
    log::info!(
        "{} parameters, {} training steps",
        state.policy.params.to_tensors().iter().map(|t| t.numel()).sum::<usize>(),
        ds.num_steps()
    );
    let out = cfg.paths.policy.clone();
    if state.epoch == cfg.train.epochs {
        return save(state.to_container(serde_json::Value::Null)?, &out, &cfg);
    }
    while state.epoch < cfg.train.epochs {
        let loss = state.run_epoch(&ds, &cfg.train)?;
        log::info!("epoch {}/{} loss {loss:.6}", state.epoch, cfg.train.epochs);
        save(state.to_container(serde_json::Value::Null)?, &out, &cfg)?;
    }
    Ok(())
}
