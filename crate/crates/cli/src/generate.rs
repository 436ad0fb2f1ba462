use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use mftf_core::export::{save_image, TraceWriter};
use mftf_core::job::{parse_job, resolve_job, JobSpec, ResolvedJob};
use mftf_core::{run_mftf, BackendInfo, RunTrace};

use crate::backend::{self, Backend};
use crate::error::CliError;
use crate::Cli;

/// `trace/manifest.json`.
#[derive(Serialize)]
pub struct Manifest<'a> {
    pub backend: &'a BackendInfo,
    pub seed: u64,
    pub object_tokens: Vec<usize>,
    pub controlled_steps: Vec<usize>,
    pub warnings: &'a [String],
    pub trace: &'a RunTrace,
}

pub fn run(cli: &Cli, job_path: &Path, seeds: &[u64], jobs: usize, dump_tensors: bool) -> Result<(), CliError> {
    let text = fs::read_to_string(job_path)
        .map_err(|e| CliError::config(format!("cannot read job {}: {e}", job_path.display())))?;
    let job = parse_job(&text)?;
    let backend = backend::build(cli, job.toy.as_ref(), job.run.image_size)?;
    let resolved = resolve_job(&job, &text, backend.as_ref())?;
    for w in &resolved.warnings {
        log::warn!("{w}");
    }

    let seeds: Vec<u64> = if seeds.is_empty() {
        vec![cli.seed.unwrap_or(resolved.run.seed)]
    } else {
        seeds.to_vec()
    };
    let nested = seeds.len() > 1;
    let targets: Vec<(u64, PathBuf)> = seeds
        .iter()
        .map(|&s| {
            let dir = if nested { cli.out.join(format!("seed_{s}")) } else { cli.out.clone() };
            (s, dir)
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<(), CliError>> = pool.install(|| {
        targets
            .par_iter()
            .map(|(seed, dir)| run_one(&backend, &resolved, *seed, dir, dump_tensors))
            .collect()
    });
    results.into_iter().collect()
}

fn run_one(backend: &Backend, job: &ResolvedJob, seed: u64, dir: &Path, dump_tensors: bool) -> Result<(), CliError> {
    let mut cfg = job.run.clone();
    cfg.seed = seed;
    let snapshot = JobSpec {
        run: cfg.clone(),
        ..job.snapshot.clone()
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join("resolved_job.json"), serde_json::to_vec_pretty(&snapshot)?)?;

    let trace_dir = dir.join("trace");
    let mut writer = TraceWriter::new(&trace_dir, dump_tensors)?;
    let info = backend.info();
    let object_tokens: Vec<usize> = job.layouts.iter().map(|l| l.token_index).collect();
    let write_manifest = |trace: &RunTrace| -> Result<(), CliError> {
        let mut warnings = job.warnings.clone();
        warnings.extend(trace.warnings.iter().cloned());
        let manifest = Manifest {
            backend: info,
            seed,
            object_tokens: object_tokens.clone(),
            controlled_steps: trace.controlled_steps(),
            warnings: &warnings,
            trace,
        };
        fs::write(trace_dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    };

    match run_mftf(backend.as_ref(), &job.source, &job.target, &job.layouts, &cfg, &mut writer) {
        Ok(out) => {
            writer.finish()?;
            write_manifest(&out.trace)?;
            save_image(&out.image_s, &dir.join("image_s.png"))?;
            save_image(&out.image_t, &dir.join("image_t.png"))?;
            log::info!(
                "seed {seed}: {} controlled steps in {:.0} ms",
                out.trace.controlled_steps().len(),
                out.trace.total_ms
            );
            Ok(())
        }
        Err(e) => {
            writer.finish()?;
            write_manifest(&e.trace)?;
            Err(e.into())
        }
    }
}
