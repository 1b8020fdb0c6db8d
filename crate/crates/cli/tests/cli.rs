//! End-to-end runs of the binary on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dpattack_core::attacks::{patch_from_container, GlobalPerturbation};
use dpattack_core::config::RunConfig;
use dpattack_core::env::DemoDataset;
use dpattack_core::io::Container;
use dpattack_core::{Policy, Trainer};

const TINY: &str = r#"{
    "seed": 11,
    "policy": {"encoder_channels": [4, 4, 4, 8], "hidden": 32, "layers": 2, "time_dim": 8, "diffusion_steps": 25},
    "data": {"episodes": 2},
    "train": {"epochs": 1, "batch": 32, "noise_draws": 1},
    "attack": {"steps": 2, "alpha": 0.015},
    "offline": {"epochs": 1, "batch": 32},
    "patch": {"epochs": 1, "batch": 32},
    "eval": {"episodes": 2, "rollout": {"episode_len": 8, "scheduler": {"ddim": 2}}}
}"#;

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cmd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_dpattack"))
            .current_dir(self.dir.path())
            .arg("--config")
            .arg("tiny.json")
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.cmd(args);
        let err = String::from_utf8_lossy(&out.stderr).into_owned();
        assert!(out.status.success(), "{args:?} failed:\n{err}");
        String::from_utf8_lossy(&out.stdout).into_owned() + &err
    }

    /// Runs a command that must fail and returns its diagnostic.
    fn fails(&self, args: &[&str]) -> String {
        let out = self.cmd(args);
        assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
        String::from_utf8_lossy(&out.stderr).into_owned()
    }

    fn data(&self) -> &Self {
        if !self.path("data.dpab").exists() {
            self.ok(&["gen-data", "--out", "data.dpab"]);
        }
        self
    }

    fn policy(&self) -> &Self {
        self.data();
        if !self.path("policy.dpab").exists() {
            self.ok(&["train", "--data", "data.dpab", "--out", "policy.dpab"]);
        }
        self
    }
}

fn run_hash(path: &Path) -> String {
    let c = Container::load(path).unwrap();
    c.metadata["run"]["config_hash"].as_str().unwrap().to_string()
}

#[test]
fn gen_data_is_loadable_and_reproducible() {
    let r = Run::new();
    r.ok(&["gen-data", "--episodes", "1", "--out", "one.dpab"]);
    let ds = DemoDataset::load(r.path("one.dpab")).unwrap();
    assert_eq!(ds.episodes.len(), 1);

    r.ok(&["gen-data", "--out", "a.dpab"]);
    r.ok(&["gen-data", "--out", "a2.dpab"]);
    r.ok(&["gen-data", "--seed", "12", "--out", "b.dpab"]);
    let load = |n| DemoDataset::load(r.path(n)).unwrap();
    let (a, a2, b) = (load("a.dpab"), load("a2.dpab"), load("b.dpab"));
    assert_eq!(a, a2);
    assert_ne!(a, b);
    assert_eq!(b.meta.seed, 12);
}

#[test]
fn regenerating_to_the_same_path_is_byte_identical() {
    let r = Run::new();
    r.ok(&["gen-data", "--out", "x.dpab"]);
    let first = std::fs::read(r.path("x.dpab")).unwrap();
    r.ok(&["gen-data", "--out", "x.dpab"]);
    assert_eq!(first, std::fs::read(r.path("x.dpab")).unwrap());
}

#[test]
fn corrupt_dataset_reports_checksum() {
    let r = Run::new();
    r.data();
    let mut bytes = std::fs::read(r.path("data.dpab")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(r.path("bad.dpab"), bytes).unwrap();
    let err = r.fails(&["train", "--data", "bad.dpab", "--out", "p.dpab"]);
    assert!(err.contains("checksum"), "{err}");
}

#[test]
fn zero_epochs_saves_initial_weights() {
    let r = Run::new();
    r.data();
    r.ok(&["train", "--data", "data.dpab", "--epochs", "0", "--out", "init.dpab"]);
    let saved = Policy::from_container(&Container::load(r.path("init.dpab")).unwrap()).unwrap();
    let cfg = RunConfig::from_json(TINY).unwrap();
    let ds = DemoDataset::load(r.path("data.dpab")).unwrap();
    let fresh = Trainer::init(&ds, cfg.policy.clone(), cfg.train.seed).unwrap();
    assert_eq!(saved.params.to_tensors(), fresh.policy.params.to_tensors());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let r = Run::new();
    r.data();
    let log = r.ok(&["train", "--data", "data.dpab", "--epochs", "2", "--out", "full.dpab"]);
    assert!(log.contains("epoch 1/2 loss") && log.contains("epoch 2/2 loss"), "{log}");
    r.ok(&["train", "--data", "data.dpab", "--epochs", "1", "--out", "half.dpab"]);
    r.ok(&["train", "--data", "data.dpab", "--epochs", "2", "--resume", "half.dpab", "--out", "resumed.dpab"]);
    let load = |n| Trainer::from_container(&Container::load(r.path(n)).unwrap()).unwrap();
    let (full, resumed) = (load("full.dpab"), load("resumed.dpab"));
    assert_eq!(full.policy.params.to_tensors(), resumed.policy.params.to_tensors());
    assert_eq!(full.epoch_losses, resumed.epoch_losses);
    assert_eq!(full.adam.m, resumed.adam.m);
    let err = r.fails(&["train", "--data", "data.dpab", "--epochs", "1", "--resume", "full.dpab"]);
    assert!(err.contains("past --epochs"), "{err}");
}

#[test]
fn artifacts_round_trip_and_carry_the_run_hash() {
    let r = Run::new();
    r.policy();
    r.ok(&["attack", "offline", "--ckpt", "policy.dpab", "--data", "data.dpab", "--sigma", "0.05", "--out", "off.dpab"]);
    r.ok(&["attack", "offline", "--ckpt", "policy.dpab", "--data", "data.dpab", "--sigma", "0.05", "--out", "off2.dpab"]);
    let load = |n| GlobalPerturbation::from_container(&Container::load(r.path(n)).unwrap()).unwrap();
    let (a, b) = (load("off.dpab"), load("off2.dpab"));
    assert_eq!(a, b);
    assert_eq!(a.sigma, 0.05);
    assert_eq!(a.delta.shape(), &[3, 64, 64]);
    assert!(a.within_budget());
    assert_eq!(run_hash(&r.path("off.dpab")).len(), 16);

    r.ok(&["attack", "random", "--sigma", "0.03", "--out", "rnd.dpab"]);
    assert!(load("rnd.dpab").linf() <= 0.03);

    r.ok(&["attack", "online", "--ckpt", "policy.dpab", "--obs-source", "data.dpab", "--obs-index", "3", "--out", "on.dpab"]);
    assert_eq!(load("on.dpab").delta.shape(), &[2, 3, 64, 64]);
}

#[test]
fn patch_exports_a_ppm() {
    let r = Run::new();
    r.policy();
    r.ok(&["attack", "patch", "--ckpt", "policy.dpab", "--data", "data.dpab", "--out", "p.dpab"]);
    let patch = patch_from_container(&Container::load(r.path("p.dpab")).unwrap()).unwrap();
    assert_eq!(patch.shape(), &[3, 13, 13]);
    let ppm = std::fs::read(r.path("p.ppm")).unwrap();
    let hash = run_hash(&r.path("p.dpab"));
    let header = format!("P6\n# config_hash {hash} seed 11\n13 13\n255\n");
    assert!(ppm.starts_with(header.as_bytes()));
    assert_eq!(ppm.len(), header.len() + 3 * 13 * 13);
}

#[test]
fn online_without_source_runs_in_the_benchmark() {
    let r = Run::new();
    r.policy();
    r.ok(&["attack", "online", "--ckpt", "policy.dpab", "--episodes", "1", "--report-dir", "rep"]);
    let csv = std::fs::read_to_string(r.path("rep/online.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let err = r.fails(&["attack", "online", "--ckpt", "policy.dpab", "--out", "x.dpab"]);
    assert!(err.contains("--obs-source"), "{err}");
}

#[test]
fn bench_reports_embed_hash_and_seed() {
    let r = Run::new();
    r.policy();
    r.ok(&["bench", "--ckpt", "policy.dpab", "--conditions", "clean", "--report-dir", "a"]);
    let csv = std::fs::read_to_string(r.path("a/bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].ends_with("config_hash,seed"));
    assert!(lines[1].starts_with("clean,2,"));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(r.path("a/bench.json")).unwrap()).unwrap();
    let hash = doc["meta"]["config_hash"].as_str().unwrap();
    assert!(lines[1].ends_with(&format!("{hash},11")));

    // Same configuration, same numbers.
    r.ok(&["bench", "--ckpt", "policy.dpab", "--conditions", "clean", "--report-dir", "a2"]);
    let again: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(r.path("a2/bench.json")).unwrap()).unwrap();
    let scores = |d: &serde_json::Value| {
        d["data"][0]["episodes"].as_array().unwrap().iter().map(|e| e["score"].clone()).collect::<Vec<_>>()
    };
    assert_eq!(scores(&doc), scores(&again));
}

#[test]
fn bench_runs_every_condition_kind() {
    let r = Run::new();
    r.policy();
    r.ok(&["attack", "offline", "--ckpt", "policy.dpab", "--data", "data.dpab", "--out", "off.dpab"]);
    r.ok(&["attack", "patch", "--ckpt", "policy.dpab", "--data", "data.dpab", "--out", "pat.dpab"]);
    r.ok(&[
        "bench",
        "--ckpt",
        "policy.dpab",
        "--episodes",
        "1",
        "--conditions",
        "clean,random,online,e2e,offline,patch",
        "--offline",
        "off.dpab",
        "--patch",
        "pat.dpab",
        "--untargeted",
        "--report-dir",
        "b",
    ]);
    let csv = std::fs::read_to_string(r.path("b/bench.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        labels,
        [
            "clean",
            "random-sigma0.03",
            "untargeted-online-sigma0.03-n2",
            "untargeted-e2e-sigma0.03-n2",
            "offline:off",
            "patch:pat"
        ]
    );
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(r.path("b/bench.json")).unwrap()).unwrap();
    assert!(doc["meta"]["extra"]["sign_tests"]["offline:off"]["p_value"].is_number());
}

#[test]
fn analysis_flags_write_tables() {
    let r = Run::new();
    r.policy();
    r.ok(&["attack", "offline", "--ckpt", "policy.dpab", "--data", "data.dpab", "--out", "off.dpab"]);
    r.ok(&["bench", "--ckpt", "policy.dpab", "--episodes", "1", "--ablate", "sigma", "--report-dir", "c"]);
    let csv = std::fs::read_to_string(r.path("c/ablation_sigma.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "sigma,steps,alpha,n,success_rate,mean_score,config_hash,seed");
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("0.01,50,0.0004,1,"));

    r.ok(&[
        "bench",
        "--ckpt",
        "policy.dpab",
        "--analyze-encoder",
        "--images",
        "6",
        "--offline",
        "off.dpab",
        "--data",
        "data.dpab",
        "--report-dir",
        "c",
    ]);
    let csv = std::fs::read_to_string(r.path("c/encoder_distances.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 12);
    assert!(csv.lines().nth(1).unwrap().contains(",random,"));
    assert!(csv.lines().last().unwrap().contains(",adversarial,"));

    r.ok(&["bench", "--ckpt", "policy.dpab", "--timing", "--runs", "1", "--data", "data.dpab", "--report-dir", "c"]);
    let csv = std::fs::read_to_string(r.path("c/timing.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
}

#[test]
fn contradictory_flags_fail_fast() {
    let r = Run::new();
    let cases: &[(&[&str], &str)] = &[
        (&["bench", "--conditions", "clean", "--targeted"], "--targeted/--untargeted"),
        (&["bench", "--conditions", "clean", "--steps", "5"], "--steps"),
        (&["bench", "--conditions", "clean", "--sigma", "0.1"], "--sigma"),
        (&["bench", "--conditions", "offline"], "--offline artifact"),
        (&["bench", "--conditions", "clean", "--offline", "x.dpab"], "offline condition is not requested"),
        (&["bench", "--conditions", "clean,clean"], "twice"),
        (&["bench", "--ablate", "sigma", "--sigma", "0.1"], "--ablate sigma"),
        (&["bench", "--images", "5"], "--analyze-encoder"),
        (&["attack", "random", "--steps", "3"], "random noise"),
        (&["attack", "patch", "--sigma", "0.1"], "patches"),
        (&["attack", "offline", "--obs-source", "d.dpab"], "offline attack"),
        (&["attack", "online", "--targeted", "--untargeted"], "cannot be used with"),
        (&["attack", "online", "--alpha=-1"], "--alpha"),
        (&["attack", "online", "--alpha", "0"], "--alpha"),
    ];
    for (args, needle) in cases {
        let err = r.fails(args);
        assert!(err.contains(needle), "{args:?}: {err}");
    }
}

#[test]
fn config_file_is_strict_and_flags_override_it() {
    let r = Run::new();
    std::fs::write(r.path("bad.json"), r#"{"seeed": 1}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dpattack"))
        .current_dir(r.dir.path())
        .args(["--config", "bad.json", "show-config"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seeed"));

    let shown: RunConfig = serde_json::from_str(&r.ok(&["show-config"])).unwrap();
    assert_eq!(shown, RunConfig::from_json(TINY).unwrap());

    r.ok(&["gen-data", "--episodes", "1", "--seed", "99", "--out", "s.dpab"]);
    let c = Container::load(r.path("s.dpab")).unwrap();
    assert_eq!(c.metadata["run"]["seed"], 99);
    assert_eq!(c.metadata["run"]["config"]["data"]["episodes"], 1);
    assert_eq!(c.metadata["run"]["config"]["policy"]["hidden"], 32);
}
