use std::fs;
use std::path::{Path, PathBuf};

use mftf_core::evaluation::{evaluate_pairs, load_manifest, scorer_from_spec};

use crate::error::CliError;
use crate::Cli;

/// Environment variable naming the scorer when `--scorer` is absent.
pub const SCORER_ENV: &str = "MFTF_SCORER";

/// `--out` names the CSV when it ends in `.csv`, otherwise a directory
/// receiving `metrics.csv`. The JSON report sits next to the CSV.
fn outputs(out: &Path) -> (PathBuf, PathBuf) {
    let csv = if out.extension().is_some_and(|e| e == "csv") {
        out.to_path_buf()
    } else {
        out.join("metrics.csv")
    };
    let json = csv.with_extension("json");
    (csv, json)
}

pub fn run(cli: &Cli, pairs: &Path, scorer: Option<&str>) -> Result<(), CliError> {
    if !pairs.is_file() {
        return Err(CliError::config(format!("manifest {} does not exist", pairs.display())));
    }
    let env = std::env::var(SCORER_ENV).ok();
    let scorer = scorer_from_spec(scorer.or(env.as_deref()))?;
    let entries = load_manifest(pairs)?;
    let report = evaluate_pairs(&entries, scorer.as_ref())?;
    let (csv, json) = outputs(&cli.out);
    if let Some(dir) = csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&csv, report.to_csv())?;
    fs::write(&json, serde_json::to_vec_pretty(&report)?)?;
    println!(
        "{} pairs: clip source {:.3}, clip target {:.3}, lpips {:.4} ({})",
        report.rows.len(),
        report.mean_clip_source,
        report.mean_clip_target,
        report.mean_lpips,
        report.scorer
    );
    Ok(())
}
