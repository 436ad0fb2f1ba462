use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use clap::ValueEnum;
use image::GrayImage;
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use mftf_core::export::{contact_sheet, heatmap_to_gray, QnormEntry, TensorIndex};
use mftf_core::{AttentionKind, BackendInfo, Branch, Pass};

use crate::error::CliError;
use crate::Cli;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum View {
    Masks,
    CrossMaps,
    QHeatmaps,
}

/// `sheet.json`: grid geometry and labels of `sheet.png`.
#[derive(Debug, Serialize)]
pub struct SheetInfo {
    pub what: View,
    pub rows: usize,
    pub cols: usize,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct ManifestHead {
    backend: BackendInfo,
    object_tokens: Vec<usize>,
}

struct Grid {
    row_labels: Vec<String>,
    col_labels: Vec<String>,
    tiles: Vec<Vec<Option<GrayImage>>>,
    warnings: Vec<String>,
}

fn load_gray(path: &Path) -> Result<GrayImage, CliError> {
    Ok(image::open(path)?.to_luma8())
}

/// `step{s}_obj{k}_tok{t}.png` to `(s, k)`.
fn parse_mask_name(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("step")?.strip_suffix(".png")?;
    let (step, rest) = rest.split_once("_obj")?;
    let (obj, _) = rest.split_once("_tok")?;
    Some((step.parse().ok()?, obj.parse().ok()?))
}

fn masks(trace: &Path) -> Result<Grid, CliError> {
    let dir = trace.join("masks");
    let mut files: BTreeMap<usize, BTreeMap<usize, String>> = BTreeMap::new();
    if dir.is_dir() {
        for entry in fs::read_dir(&dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some((step, obj)) = parse_mask_name(&name) {
                files.entry(step).or_default().insert(obj, name);
            }
        }
    }
    let objects: BTreeSet<usize> = files.values().flat_map(|m| m.keys().copied()).collect();
    let mut tiles = Vec::new();
    for row in files.values() {
        let mut line = Vec::new();
        for k in &objects {
            line.push(match row.get(k) {
                Some(name) => Some(load_gray(&dir.join(name))?),
                None => None,
            });
        }
        tiles.push(line);
    }
    Ok(Grid {
        row_labels: files.keys().map(|s| format!("step {s}")).collect(),
        col_labels: objects.iter().map(|k| format!("object {k}")).collect(),
        tiles,
        warnings: Vec::new(),
    })
}

fn q_heatmaps(trace: &Path, layers: &[usize]) -> Result<Grid, CliError> {
    let index = trace.join("qnorm").join("index.json");
    let entries: Vec<QnormEntry> = if index.is_file() {
        serde_json::from_slice(&fs::read(&index)?)?
    } else {
        Vec::new()
    };
    let present: BTreeSet<usize> = entries.iter().map(|e| e.ordinal).collect();
    let cols: Vec<usize> = if layers.is_empty() {
        present.iter().copied().collect()
    } else {
        layers.to_vec()
    };
    let mut warnings = Vec::new();
    for l in &cols {
        if !present.contains(l) {
            warnings.push(format!("self-attention layer {l} has no query heatmaps in this trace"));
        }
    }
    let mut by_step: BTreeMap<usize, BTreeMap<usize, &QnormEntry>> = BTreeMap::new();
    for e in &entries {
        by_step.entry(e.step).or_default().insert(e.ordinal, e);
    }
    let mut tiles = Vec::new();
    for row in by_step.values() {
        let mut line = Vec::new();
        for l in &cols {
            line.push(match row.get(l) {
                Some(e) => Some(load_gray(&trace.join("qnorm").join(&e.after))?),
                None => None,
            });
        }
        tiles.push(line);
    }
    Ok(Grid {
        row_labels: by_step.keys().map(|s| format!("step {s}")).collect(),
        col_labels: cols.iter().map(|l| format!("layer {l}")).collect(),
        tiles,
        warnings,
    })
}

/// Head-mean map of token `t` from a `(heads, cells, m)` cross map.
fn token_map(map: &Array3<f32>, t: usize, h: usize, w: usize) -> Option<Array2<f32>> {
    if t >= map.dim().2 || map.dim().1 != h * w {
        return None;
    }
    let mean = map.index_axis(Axis(2), t).mean_axis(Axis(0))?;
    mean.into_shape_with_order((h, w)).ok()
}

fn cross_maps(trace: &Path, layers: &[usize]) -> Result<Grid, CliError> {
    let mut warnings = Vec::new();
    let index_path = trace.join("tensors").join("index.json");
    let manifest_path = trace.join("manifest.json");
    if !index_path.is_file() || !manifest_path.is_file() {
        warnings.push("trace has no tensor dump; rerun generate with --dump-tensors".to_string());
        return Ok(Grid {
            row_labels: Vec::new(),
            col_labels: Vec::new(),
            tiles: Vec::new(),
            warnings,
        });
    }
    let head: ManifestHead = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    let index: TensorIndex = serde_json::from_slice(&fs::read(&index_path)?)?;
    let cross: Vec<_> = index
        .entries
        .iter()
        .filter(|e| e.kind == "cross" && e.pass == Pass::Source && e.branch == Branch::Cond)
        .collect();
    let ordinal_of = |layer: usize| head.backend.layers.get(layer).map(|l| l.ordinal);
    let present: BTreeSet<usize> = cross.iter().filter_map(|e| ordinal_of(e.layer)).collect();
    let wanted: Vec<usize> = if layers.is_empty() {
        present.iter().copied().collect()
    } else {
        layers.to_vec()
    };
    for l in &wanted {
        if !present.contains(l) {
            warnings.push(format!("cross-attention layer {l} was not captured in this trace"));
        }
    }
    let cols: Vec<(usize, usize)> = wanted
        .iter()
        .flat_map(|&l| head.object_tokens.iter().map(move |&t| (l, t)))
        .collect();
    let mut by_step: BTreeMap<usize, BTreeMap<usize, &str>> = BTreeMap::new();
    for e in &cross {
        if let Some(o) = ordinal_of(e.layer) {
            by_step.entry(e.step).or_default().insert(o, &e.file);
        }
    }
    let mut tiles = Vec::new();
    for row in by_step.values() {
        let mut line = Vec::new();
        for &(l, t) in &cols {
            let tile = match row.get(&l) {
                Some(file) => {
                    let map: Array3<f32> = ndarray_npy::read_npy(trace.join("tensors").join(file))
                        .map_err(|e| CliError::Runtime(format!("cannot read {file}: {e}")))?;
                    let grid = head
                        .backend
                        .by_ordinal(AttentionKind::Cross, l)
                        .map(|li| li.grid)
                        .map_err(CliError::from)?;
                    token_map(&map, t, grid.h, grid.w).map(|m| heatmap_to_gray(&m))
                }
                None => None,
            };
            line.push(tile);
        }
        tiles.push(line);
    }
    Ok(Grid {
        row_labels: by_step.keys().map(|s| format!("step {s}")).collect(),
        col_labels: cols.iter().map(|(l, t)| format!("layer {l} token {t}")).collect(),
        tiles,
        warnings,
    })
}

pub fn run(cli: &Cli, trace: &Path, what: View, layers: &[usize]) -> Result<(), CliError> {
    if !trace.is_dir() {
        return Err(CliError::config(format!("trace directory {} does not exist", trace.display())));
    }
    let grid = match what {
        View::Masks => masks(trace)?,
        View::QHeatmaps => q_heatmaps(trace, layers)?,
        View::CrossMaps => cross_maps(trace, layers)?,
    };
    let mut warnings = grid.warnings;
    if grid.tiles.is_empty() {
        warnings.push(format!("trace {} holds nothing to show", trace.display()));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    fs::create_dir_all(&cli.out)?;
    contact_sheet(&grid.tiles).save(cli.out.join("sheet.png"))?;
    let info = SheetInfo {
        what,
        rows: grid.row_labels.len(),
        cols: grid.col_labels.len(),
        row_labels: grid.row_labels,
        col_labels: grid.col_labels,
        warnings,
    };
    fs::write(cli.out.join("sheet.json"), serde_json::to_vec_pretty(&info)?)?;
    Ok(())
}
