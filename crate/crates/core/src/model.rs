//! Domain types shared by every stage of the layout-control pipeline.
//!
//! Tensors are plain `ndarray` arrays with fixed axis conventions:
//!
//! - latents: `(channels, h, w)`
//! - images: `(3, h, w)`, values in `[0, 1]`
//! - self-attention queries: `(heads, n, head_dim)` with `n = h * w`
//! - cross-attention maps: `(heads, n, m)` with `m` the text length
//! - text embeddings: `(m, dim)`

use std::fmt;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{MftfError, Result};

pub type Latent = Array3<f32>;
pub type Image = Array3<f32>;
pub type QueryTensor = Array3<f32>;
pub type CrossMap = Array3<f32>;
pub type TextEmbedding = Array2<f32>;

/// Default mask threshold, inside the usable 0.1 to 0.3 band.
pub const DEFAULT_ETA: f64 = 0.2;

/// Spatial resolution of one attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridShape {
    pub h: usize,
    pub w: usize,
}

impl GridShape {
    pub const fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    /// Sequence length `n = h * w`.
    pub const fn cells(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub const fn index(&self, row: usize, col: usize) -> usize {
        row * self.w + col
    }

    #[inline]
    pub const fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.w, index % self.w)
    }

    /// Factor a sequence length into a grid with the aspect ratio of `latent`.
    ///
    /// Returns `None` if `n` is not an integer downsampling of the latent grid.
    pub fn for_sequence(n: usize, latent: GridShape) -> Option<Self> {
        if n == 0 || latent.cells() % n != 0 {
            return None;
        }
        let ratio = latent.cells() / n;
        let factor = (ratio as f64).sqrt().round() as usize;
        if factor == 0 || factor * factor != ratio {
            return None;
        }
        if latent.h % factor != 0 || latent.w % factor != 0 {
            return None;
        }
        Some(Self::new(latent.h / factor, latent.w / factor))
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttentionKind {
    #[serde(rename = "self")]
    SelfAttention,
    #[serde(rename = "cross")]
    Cross,
}

impl AttentionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::SelfAttention => "self",
            Self::Cross => "cross",
        }
    }
}

/// Which half of classifier-free guidance a forward pass belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Uncond,
    Cond,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectToken {
    pub index: usize,
    pub label: String,
}

/// A tokenized prompt plus the tokens selected for layout control.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub text: String,
    pub token_ids: Vec<u32>,
    pub token_strings: Vec<String>,
    pub object_tokens: Vec<ObjectToken>,
}

impl PromptSpec {
    pub fn new(
        text: impl Into<String>,
        token_ids: Vec<u32>,
        token_strings: Vec<String>,
        max_len: usize,
    ) -> Result<Self> {
        if token_ids.len() != token_strings.len() {
            return Err(MftfError::config(format!(
                "token ids ({}) and strings ({}) are not aligned",
                token_ids.len(),
                token_strings.len()
            )));
        }
        if token_ids.len() > max_len {
            return Err(MftfError::config(format!(
                "prompt has {} tokens, encoder maximum is {max_len}",
                token_ids.len()
            )));
        }
        Ok(Self {
            text: text.into(),
            token_ids,
            token_strings,
            object_tokens: Vec::new(),
        })
    }

    /// Text length `m`, special tokens included.
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Index of the first token whose normalized text equals `word`.
    pub fn find_token(&self, word: &str) -> Result<usize> {
        let wanted = normalize_token(word);
        self.token_strings
            .iter()
            .position(|s| normalize_token(s) == wanted)
            .ok_or_else(|| {
                MftfError::NotFound(format!("token {word:?} does not occur in prompt {:?}", self.text))
            })
    }

    pub fn add_object(&mut self, index: usize, label: impl Into<String>) -> Result<()> {
        if index >= self.len() {
            return Err(MftfError::Index(format!(
                "object token index {index} out of range for prompt of {} tokens",
                self.len()
            )));
        }
        self.object_tokens.push(ObjectToken {
            index,
            label: label.into(),
        });
        Ok(())
    }
}

/// Lowercase and strip BPE end-of-word markers so lookups match by word.
pub fn normalize_token(s: &str) -> String {
    s.trim()
        .trim_end_matches("</w>")
        .trim_start_matches('\u{0120}')
        .to_lowercase()
}

/// Per-object affine edit.
///
/// `dx` moves along columns, `dy` along rows (positive is down), both in
/// latent-grid cells at the finest controlled resolution. `theta` is in
/// degrees, counterclockwise as seen in the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutParams {
    pub token_index: usize,
    #[serde(default)]
    pub dx: f64,
    #[serde(default)]
    pub dy: f64,
    #[serde(default)]
    pub theta: f64,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub drop: bool,
    #[serde(default = "default_eta")]
    pub eta: f64,
}

fn one() -> f64 {
    1.0
}

fn default_eta() -> f64 {
    DEFAULT_ETA
}

impl LayoutParams {
    pub fn identity(token_index: usize) -> Self {
        Self {
            token_index,
            dx: 0.0,
            dy: 0.0,
            theta: 0.0,
            scale: 1.0,
            drop: false,
            eta: DEFAULT_ETA,
        }
    }

    pub fn translate(token_index: usize, dx: f64, dy: f64) -> Self {
        Self {
            dx,
            dy,
            ..Self::identity(token_index)
        }
    }

    pub fn dropped(token_index: usize) -> Self {
        Self {
            drop: true,
            ..Self::identity(token_index)
        }
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(MftfError::config(format!("eta {} outside [0, 1]", self.eta)));
        }
        if self.scale <= 0.0 || !self.scale.is_finite() {
            return Err(MftfError::config(format!("scale {} must be positive", self.scale)));
        }
        if !self.dx.is_finite() || !self.dy.is_finite() || !self.theta.is_finite() {
            return Err(MftfError::config("dx, dy and theta must be finite"));
        }
        if self.drop && !self.is_identity_motion() {
            return Err(MftfError::config(
                "a dropped object cannot also be translated, rotated or scaled",
            ));
        }
        Ok(())
    }

    pub fn is_identity_motion(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0 && self.theta == 0.0 && self.scale == 1.0
    }

    /// Same edit with translations expressed at a coarser (or finer) grid.
    pub fn rescaled(&self, from: GridShape, to: GridShape) -> Self {
        Self {
            dx: self.dx * to.w as f64 / from.w as f64,
            dy: self.dy * to.h as f64 / from.h as f64,
            ..*self
        }
    }
}

/// How cells vacated by a moved or dropped object are filled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillPolicy {
    /// Copy the source query of the nearest background cell.
    #[default]
    NearestBackground,
    Zero,
}

/// Inclusive range of self-attention layer ordinals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct LayerWindow {
    pub start: usize,
    pub end: usize,
}

impl LayerWindow {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, ordinal: usize) -> bool {
        (self.start..=self.end).contains(&ordinal)
    }
}

impl From<(usize, usize)> for LayerWindow {
    fn from((start, end): (usize, usize)) -> Self {
        Self { start, end }
    }
}

impl From<LayerWindow> for (usize, usize) {
    fn from(w: LayerWindow) -> Self {
        (w.start, w.end)
    }
}

/// Sampler constants for one dual run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "T", default = "default_steps")]
    pub total_steps: usize,
    /// Number of initial denoising steps with control active.
    #[serde(default = "default_t_star")]
    pub t_star: usize,
    #[serde(default = "default_guidance")]
    pub guidance_scale: f64,
    /// Self-attention layer ordinals receiving injected queries; all when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_window: Option<LayerWindow>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<(usize, usize)>,
    /// Cross-attention layer ordinals feeding mask creation; all when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_layers: Option<Vec<usize>>,
    #[serde(default)]
    pub fill: FillPolicy,
}

fn default_steps() -> usize {
    30
}

fn default_t_star() -> usize {
    15
}

fn default_guidance() -> f64 {
    7.5
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            total_steps: default_steps(),
            t_star: default_t_star(),
            guidance_scale: default_guidance(),
            layer_window: None,
            seed: 0,
            image_size: None,
            mask_layers: None,
            fill: FillPolicy::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self, info: &BackendInfo) -> Result<()> {
        if self.total_steps == 0 {
            return Err(MftfError::config("T must be at least 1"));
        }
        if self.t_star > self.total_steps {
            return Err(MftfError::config(format!(
                "t_star {} exceeds T {}",
                self.t_star, self.total_steps
            )));
        }
        if !self.guidance_scale.is_finite() {
            return Err(MftfError::config("guidance_scale must be finite"));
        }
        let n_self = info.layers_of(AttentionKind::SelfAttention).count();
        if let Some(w) = self.layer_window {
            if w.start > w.end || w.end >= n_self {
                return Err(MftfError::config(format!(
                    "layer_window [{}, {}] invalid for {n_self} self-attention layers",
                    w.start, w.end
                )));
            }
        }
        if let Some(layers) = &self.mask_layers {
            let n_cross = info.layers_of(AttentionKind::Cross).count();
            if layers.is_empty() {
                return Err(MftfError::config("mask_layers must not be empty"));
            }
            if let Some(bad) = layers.iter().find(|&&l| l >= n_cross) {
                return Err(MftfError::config(format!(
                    "mask layer {bad} invalid for {n_cross} cross-attention layers"
                )));
            }
        }
        if let Some((h, w)) = self.image_size {
            if [h, w] != info.image_size {
                return Err(MftfError::config(format!(
                    "image_size {h}x{w} does not match backend image size {}x{}",
                    info.image_size[0], info.image_size[1]
                )));
            }
        }
        Ok(())
    }

    /// Whether layout control is active at 0-based denoising index `step`.
    pub fn is_controlled(&self, step: usize) -> bool {
        step < self.t_star
    }

    pub fn window(&self, info: &BackendInfo) -> LayerWindow {
        self.layer_window.unwrap_or_else(|| {
            let n = info.layers_of(AttentionKind::SelfAttention).count();
            LayerWindow::new(0, n.saturating_sub(1))
        })
    }
}

/// Address of one attention capture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AttentionSite {
    pub step: usize,
    pub layer: usize,
    pub kind: AttentionKind,
}

/// Binary spatial mask for one token at one layer resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGrid {
    pub token_index: usize,
    pub source_layer: usize,
    shape: GridShape,
    cells: Vec<bool>,
}

impl MaskGrid {
    pub fn from_cells(
        token_index: usize,
        source_layer: usize,
        shape: GridShape,
        cells: Vec<bool>,
    ) -> Result<Self> {
        if cells.len() != shape.cells() {
            return Err(MftfError::shape(format!(
                "mask of {} cells cannot have shape {shape}",
                cells.len()
            )));
        }
        Ok(Self {
            token_index,
            source_layer,
            shape,
            cells,
        })
    }

    pub fn zeros(token_index: usize, source_layer: usize, shape: GridShape) -> Self {
        Self {
            token_index,
            source_layer,
            shape,
            cells: vec![false; shape.cells()],
        }
    }

    pub fn from_fn(
        token_index: usize,
        source_layer: usize,
        shape: GridShape,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Self {
        let cells = (0..shape.cells())
            .map(|i| {
                let (r, c) = shape.coords(i);
                f(r, c)
            })
            .collect();
        Self {
            token_index,
            source_layer,
            shape,
            cells,
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[self.shape.index(row, col)]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        let i = self.shape.index(row, col);
        self.cells[i] = value;
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Row-major `(row, col)` of every set cell.
    pub fn object_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(|(i, _)| self.shape.coords(i))
    }

    /// Mean `(row, col)` of the set cells.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let n = self.count();
        if n == 0 {
            return None;
        }
        let (sr, sc) = self
            .object_cells()
            .fold((0.0, 0.0), |(r, c), (i, j)| (r + i as f64, c + j as f64));
        Some((sr / n as f64, sc / n as f64))
    }

    /// Entries as 0/1 bytes in row-major order.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.cells.iter().map(|&c| u8::from(c)).collect()
    }

    /// `true` if every cell of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &MaskGrid) -> bool {
        self.shape == other.shape && self.cells.iter().zip(&other.cells).all(|(&a, &b)| !a || b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RecordData {
    Cross(CrossMap),
    SelfQuery(QueryTensor),
}

/// One captured attention tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub site: AttentionSite,
    pub branch: Branch,
    data: RecordData,
}

impl AttentionRecord {
    pub fn cross(step: usize, layer: usize, branch: Branch, map: CrossMap) -> Self {
        Self {
            site: AttentionSite {
                step,
                layer,
                kind: AttentionKind::Cross,
            },
            branch,
            data: RecordData::Cross(map),
        }
    }

    pub fn self_query(step: usize, layer: usize, branch: Branch, q: QueryTensor) -> Self {
        Self {
            site: AttentionSite {
                step,
                layer,
                kind: AttentionKind::SelfAttention,
            },
            branch,
            data: RecordData::SelfQuery(q),
        }
    }

    pub fn cross_map(&self) -> Option<&CrossMap> {
        match &self.data {
            RecordData::Cross(m) => Some(m),
            RecordData::SelfQuery(_) => None,
        }
    }

    pub fn self_query_tensor(&self) -> Option<&QueryTensor> {
        match &self.data {
            RecordData::SelfQuery(q) => Some(q),
            RecordData::Cross(_) => None,
        }
    }

    pub fn data(&self) -> &RecordData {
        &self.data
    }
}

/// Static description of one attention layer in forward order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    /// Global index over all attention layers.
    pub index: usize,
    pub kind: AttentionKind,
    pub grid: GridShape,
    pub heads: usize,
    pub head_dim: usize,
    /// Index among layers of the same kind.
    pub ordinal: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub name: String,
    pub layers: Vec<LayerInfo>,
    /// `(channels, h, w)`
    pub latent_shape: [usize; 3],
    pub max_text_len: usize,
    /// `(h_px, w_px)`
    pub image_size: [usize; 2],
}

impl BackendInfo {
    /// Build from `(kind, grid, heads, head_dim)` in forward order.
    pub fn new(
        name: impl Into<String>,
        layers: impl IntoIterator<Item = (AttentionKind, GridShape, usize, usize)>,
        latent_shape: [usize; 3],
        max_text_len: usize,
        image_size: [usize; 2],
    ) -> Self {
        let mut n_self = 0;
        let mut n_cross = 0;
        let layers = layers
            .into_iter()
            .enumerate()
            .map(|(index, (kind, grid, heads, head_dim))| {
                let counter = match kind {
                    AttentionKind::SelfAttention => &mut n_self,
                    AttentionKind::Cross => &mut n_cross,
                };
                let ordinal = *counter;
                *counter += 1;
                LayerInfo {
                    index,
                    kind,
                    grid,
                    heads,
                    head_dim,
                    ordinal,
                }
            })
            .collect();
        Self {
            name: name.into(),
            layers,
            latent_shape,
            max_text_len,
            image_size,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, index: usize) -> Result<&LayerInfo> {
        self.layers.get(index).ok_or_else(|| {
            MftfError::config(format!(
                "layer {index} does not exist (backend has {} attention layers)",
                self.layers.len()
            ))
        })
    }

    pub fn layers_of(&self, kind: AttentionKind) -> impl Iterator<Item = &LayerInfo> + '_ {
        self.layers.iter().filter(move |l| l.kind == kind)
    }

    pub fn by_ordinal(&self, kind: AttentionKind, ordinal: usize) -> Result<&LayerInfo> {
        self.layers_of(kind).nth(ordinal).ok_or_else(|| {
            MftfError::config(format!("no {} attention layer with ordinal {ordinal}", kind.as_str()))
        })
    }

    pub fn latent_grid(&self) -> GridShape {
        GridShape::new(self.latent_shape[1], self.latent_shape[2])
    }
}

/// Spatial factorization of a layer's sequence length.
pub fn grid_shape_for_layer(layer: usize, info: &BackendInfo) -> Result<GridShape> {
    let l = info.layer(layer)?;
    match GridShape::for_sequence(l.grid.cells(), info.latent_grid()) {
        Some(g) if g == l.grid => Ok(g),
        // declared grids need not share the latent aspect ratio
        _ => Ok(l.grid),
    }
}
