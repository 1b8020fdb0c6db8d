//! `dpattack`: demonstrations, training, attack crafting and benchmarks for a
//! pixel-based diffusion policy.

mod attack;
mod bench;
mod common;
mod data;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "dpattack", version, about = "Adversarial attacks on diffusion policies")]
pub struct Cli {
    /// JSON run configuration; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Print debug logs.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Record scripted-expert demonstrations.
    GenData(data::GenDataArgs),
    /// Train the policy on a demonstration file.
    Train(data::TrainArgs),
    /// Craft an attack artifact.
    Attack(attack::AttackArgs),
    /// Roll the policy out under one or more conditions and write reports.
    Bench(bench::BenchArgs),
    /// Print the resolved configuration as JSON.
    ShowConfig,
}

fn main() {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = common::load_config(cli.config.as_deref())?;
    if let Some(t) = cli.threads {
        anyhow::ensure!(t > 0, "--threads must be positive");
        cfg.eval.threads = t;
    }
    match cli.command {
        Command::GenData(a) => data::gen_data(cfg, a),
        Command::Train(a) => data::train(cfg, a),
        Command::Attack(a) => attack::run(cfg, a),
        Command::Bench(a) => bench::run(cfg, a),
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
    }
}
