use std::fs;
use std::path::Path;

use serde::Serialize;

use mftf_core::export::{heatmap_to_gray, load_image, mask_to_gray, overlay};
use mftf_core::segmentation::{segment, SegmentOptions, SegmentTrace};
use mftf_core::{prepare_prompt, MftfError};

use crate::backend;
use crate::error::CliError;
use crate::Cli;

#[derive(Serialize)]
struct SegmentReport<'a> {
    prompt: &'a str,
    eta: f64,
    tokens: Vec<TokenEntry>,
    trace: &'a SegmentTrace,
}

#[derive(Serialize)]
struct TokenEntry {
    token: String,
    token_index: usize,
    mask_cells: usize,
    files: [String; 4],
}

/// A file-name-safe form of a token label.
fn stem(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    s.trim_matches('_').to_string()
}

pub fn run(
    cli: &Cli,
    image: &Path,
    prompt: &str,
    tokens: &[String],
    eta: f64,
    steps: usize,
    step_index: Option<usize>,
) -> Result<(), CliError> {
    if !image.is_file() {
        return Err(CliError::config(format!("image {} does not exist", image.display())));
    }
    let backend = backend::build(cli, None, None)?;
    let img = load_image(image)?;
    let prepared = prepare_prompt(backend.as_ref(), prompt)?;
    let indices = tokens
        .iter()
        .map(|t| match t.trim().parse::<usize>() {
            Ok(i) => Ok(i),
            Err(_) => prepared.spec.find_token(t.trim()),
        })
        .collect::<Result<Vec<_>, MftfError>>()?;
    let opts = SegmentOptions {
        total_steps: steps,
        step_index,
        ..SegmentOptions::default()
    };
    let seg = segment(backend.as_ref(), &img, &prepared, &indices, eta, &opts)?;

    fs::create_dir_all(&cli.out)?;
    let mut entries = Vec::new();
    for (s, raw) in seg.segments.iter().zip(tokens) {
        let name = match stem(raw) {
            n if n.is_empty() => format!("tok{}", s.token_index),
            n => n,
        };
        let files = [
            format!("mask_{name}.png"),
            format!("overlay_{name}.png"),
            format!("qobject_{name}.png"),
            format!("qbackground_{name}.png"),
        ];
        mask_to_gray(&s.mask_image).save(cli.out.join(&files[0]))?;
        overlay(&img, &s.mask_image)?.save(cli.out.join(&files[1]))?;
        heatmap_to_gray(&s.q_object).save(cli.out.join(&files[2]))?;
        heatmap_to_gray(&s.q_background).save(cli.out.join(&files[3]))?;
        entries.push(TokenEntry {
            token: s.label.clone(),
            token_index: s.token_index,
            mask_cells: s.mask.count(),
            files,
        });
    }
    let report = SegmentReport {
        prompt,
        eta,
        tokens: entries,
        trace: &seg.trace,
    };
    fs::write(cli.out.join("segment.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(())
}
