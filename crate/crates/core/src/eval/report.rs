//! JSON and CSV report files and the paired sign test.

use std::fs;
use std::path::Path;

use serde::Serialize;
use statrs::distribution::{Binomial, DiscreteCDF};

use super::RolloutReport;
use crate::error::{Error, Result};

/// One-sided paired sign test of "clean succeeds more often than attacked".
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SignTest {
    /// Episodes solved clean but failed under attack.
    pub drops: usize,
    /// Episodes failed clean but solved under attack.
    pub gains: usize,
    /// `P(X ≥ drops)` with `X ∼ Bin(drops + gains, 1/2)`.
    pub p_value: f64,
}

pub fn sign_test(clean: &[bool], attacked: &[bool]) -> Result<SignTest> {
    if clean.len() != attacked.len() {
        return Err(Error::dim(format!("{} clean vs {} attacked episodes", clean.len(), attacked.len())));
    }
    let drops = clean.iter().zip(attacked).filter(|(c, a)| **c && !**a).count();
    let gains = clean.iter().zip(attacked).filter(|(c, a)| !**c && **a).count();
    let n = drops + gains;
    let p_value = if drops == 0 {
        1.0
    } else {
        let b = Binomial::new(0.5, n as u64).map_err(|e| Error::usage(e.to_string()))?;
        b.sf(drops as u64 - 1)
    };
    Ok(SignTest { drops, gains, p_value })
}

fn create_dir(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

/// Pretty JSON document `{meta, data}`.
pub fn write_json<S: Serialize>(path: impl AsRef<Path>, meta: &serde_json::Value, data: &S) -> Result<()> {
    let path = path.as_ref();
    create_dir(path)?;
    let doc = serde_json::json!({ "meta": meta, "data": data });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// RFC-4180 CSV with a header row.
pub fn write_csv(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let path = path.as_ref();
    create_dir(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    })?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `{stem}.json` with every episode and `{stem}.csv` with one row per
/// condition. `config_hash` and `seed` are stamped into both files.
pub fn emit_reports(
    dir: impl AsRef<Path>,
    stem: &str,
    reports: &[RolloutReport],
    config_hash: &str,
    seed: u64,
    meta: serde_json::Value,
) -> Result<()> {
    let dir = dir.as_ref();
    let mut m = serde_json::json!({ "config_hash": config_hash, "seed": seed });
    m["extra"] = meta;
    write_json(dir.join(format!("{stem}.json")), &m, &reports)?;
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.condition.clone(),
                r.episodes.len().to_string(),
                r.success_rate.to_string(),
                r.mean_score.to_string(),
                r.mean_attack_ms.to_string(),
                config_hash.to_string(),
                seed.to_string(),
            ]
        })
        .collect();
    write_csv(
        dir.join(format!("{stem}.csv")),
        &["condition", "n", "success_rate", "mean_score", "mean_attack_ms", "config_hash", "seed"],
        &rows,
    )
}
