//! Image, mask and tensor files.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{MftfError, Result};
use crate::layout::query_norm_map;
use crate::model::{AttentionRecord, Branch, Image, LayerInfo, MaskGrid, QueryTensor, RecordData};
use crate::pipeline::{Pass, RunObserver, StepMask};

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `(3, h, w)` in `[0, 1]` to an RGB buffer; values outside are clamped.
pub fn image_to_rgb(img: &Image) -> Result<RgbImage> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(MftfError::shape(format!("image has {c} channels, expected 3")));
    }
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([to_u8(img[[0, y, x]]), to_u8(img[[1, y, x]]), to_u8(img[[2, y, x]])])
    }))
}

pub fn rgb_to_image(rgb: &RgbImage) -> Image {
    let (w, h) = rgb.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        f32::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0
    })
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    image_to_rgb(img)?.save(path)?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    Ok(rgb_to_image(&img))
}

/// PNG bytes of an image.
pub fn png_bytes(img: &Image) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    image_to_rgb(img)?.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn mask_to_gray(mask: &MaskGrid) -> GrayImage {
    let g = mask.shape();
    ImageBuffer::from_fn(g.w as u32, g.h as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    })
}

/// Grayscale heatmap, min-max scaled.
pub fn heatmap_to_gray(map: &Array2<f32>) -> GrayImage {
    let min = map.iter().copied().fold(f32::INFINITY, f32::min);
    let max = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = if max > min { max - min } else { 1.0 };
    let (h, w) = map.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8((map[[y as usize, x as usize]] - min) / range)])
    })
}

/// Red tint over the masked pixels of `img`.
pub fn overlay(img: &Image, mask: &MaskGrid) -> Result<RgbImage> {
    let mut rgb = image_to_rgb(img)?;
    let g = mask.shape();
    if (g.w as u32, g.h as u32) != rgb.dimensions() {
        return Err(MftfError::shape("overlay mask does not match image size"));
    }
    for (x, y, px) in rgb.enumerate_pixels_mut() {
        if mask.get(y as usize, x as usize) {
            px[0] = ((u16::from(px[0]) + 255) / 2) as u8;
            px[1] /= 2;
            px[2] /= 2;
        }
    }
    Ok(rgb)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub token_index: usize,
    pub eta: f64,
    pub step: usize,
    pub source_layers: Vec<usize>,
}

/// Write `<stem>.png` (0/255) and `<stem>.json`.
pub fn save_mask(mask: &MaskGrid, sidecar: &MaskSidecar, dir: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let png = dir.join(format!("{stem}.png"));
    mask_to_gray(mask).save(&png)?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(sidecar)?)?;
    Ok(png)
}

/// Tiles of possibly different sizes on a grid, each upscaled to the largest
/// tile by pixel repetition and separated by a 1-pixel gutter.
pub fn contact_sheet(tiles: &[Vec<Option<GrayImage>>]) -> GrayImage {
    let rows = tiles.len();
    let cols = tiles.iter().map(Vec::len).max().unwrap_or(0);
    let (mut tw, mut th) = (1u32, 1u32);
    for t in tiles.iter().flatten().flatten() {
        tw = tw.max(t.width());
        th = th.max(t.height());
    }
    let gutter = 1;
    let width = (cols as u32 * (tw + gutter)).max(1);
    let height = (rows as u32 * (th + gutter)).max(1);
    let mut sheet = GrayImage::from_pixel(width, height, Luma([64]));
    for (r, row) in tiles.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            let Some(tile) = tile else { continue };
            let (ox, oy) = (c as u32 * (tw + gutter), r as u32 * (th + gutter));
            for y in 0..th {
                for x in 0..tw {
                    let sx = x * tile.width() / tw;
                    let sy = y * tile.height() / th;
                    sheet.put_pixel(ox + x, oy + y, *tile.get_pixel(sx, sy));
                }
            }
        }
    }
    sheet
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorIndexEntry {
    pub step: usize,
    pub layer: usize,
    pub kind: String,
    pub pass: Pass,
    pub branch: Branch,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TensorIndex {
    pub entries: Vec<TensorIndexEntry>,
}

/// One row of the Q-heatmap index.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QnormEntry {
    pub step: usize,
    pub layer: usize,
    pub ordinal: usize,
    pub before: String,
    pub after: String,
}

/// Writes a run's masks, query heatmaps and optionally raw tensors under
/// `root`.
pub struct TraceWriter {
    root: PathBuf,
    dump_tensors: bool,
    tensors: TensorIndex,
    qnorm: Vec<QnormEntry>,
    pub mask_files: Vec<(usize, usize, String)>,
}

impl TraceWriter {
    pub fn new(root: impl Into<PathBuf>, dump_tensors: bool) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("masks"))?;
        fs::create_dir_all(root.join("qnorm"))?;
        if dump_tensors {
            fs::create_dir_all(root.join("tensors"))?;
        }
        Ok(Self {
            root,
            dump_tensors,
            tensors: TensorIndex::default(),
            qnorm: Vec::new(),
            mask_files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Write the index files.
    pub fn finish(&self) -> Result<()> {
        fs::write(
            self.root.join("qnorm").join("index.json"),
            serde_json::to_vec_pretty(&self.qnorm)?,
        )?;
        if self.dump_tensors {
            fs::write(
                self.root.join("tensors").join("index.json"),
                serde_json::to_vec_pretty(&self.tensors)?,
            )?;
        }
        Ok(())
    }
}

fn npy_error(e: impl std::fmt::Display) -> MftfError {
    MftfError::Io(std::io::Error::other(e.to_string()))
}

impl RunObserver for TraceWriter {
    fn on_records(&mut self, step: usize, pass: Pass, records: &[AttentionRecord]) -> Result<()> {
        if !self.dump_tensors {
            return Ok(());
        }
        for r in records {
            let (kind, arr) = match r.data() {
                RecordData::Cross(m) => ("cross", m),
                RecordData::SelfQuery(q) => ("self", q),
            };
            let pass_name = match pass {
                Pass::Source => "source",
                Pass::Target => "target",
            };
            let branch = match r.branch {
                Branch::Uncond => "uncond",
                Branch::Cond => "cond",
            };
            let file = format!("s{step:03}_l{:02}_{kind}_{pass_name}_{branch}.npy", r.site.layer);
            ndarray_npy::write_npy(self.root.join("tensors").join(&file), arr).map_err(npy_error)?;
            self.tensors.entries.push(TensorIndexEntry {
                step,
                layer: r.site.layer,
                kind: kind.into(),
                pass,
                branch: r.branch,
                shape: arr.shape().to_vec(),
                file,
            });
        }
        Ok(())
    }

    fn on_masks(&mut self, step: usize, masks: &[StepMask]) -> Result<()> {
        for (k, m) in masks.iter().enumerate() {
            let stem = format!("step{step:03}_obj{k}_tok{}", m.token_index);
            let sidecar = MaskSidecar {
                token_index: m.token_index,
                eta: m.eta,
                step,
                source_layers: m.source_layers.clone(),
            };
            save_mask(&m.mask, &sidecar, &self.root.join("masks"), &stem)?;
            self.mask_files.push((step, k, format!("{stem}.png")));
        }
        Ok(())
    }

    fn on_edit(
        &mut self,
        step: usize,
        layer: &LayerInfo,
        branch: Branch,
        _masks: &[MaskGrid],
        before: &QueryTensor,
        after: &QueryTensor,
    ) -> Result<()> {
        if branch != Branch::Cond {
            return Ok(());
        }
        let dir = self.root.join("qnorm");
        let stem = format!("step{step:03}_l{:02}", layer.index);
        let b = format!("{stem}_before.png");
        let a = format!("{stem}_after.png");
        heatmap_to_gray(&query_norm_map(before, layer.grid)?).save(dir.join(&b))?;
        heatmap_to_gray(&query_norm_map(after, layer.grid)?).save(dir.join(&a))?;
        self.qnorm.push(QnormEntry {
            step,
            layer: layer.index,
            ordinal: layer.ordinal,
            before: b,
            after: a,
        });
        Ok(())
    }
}
