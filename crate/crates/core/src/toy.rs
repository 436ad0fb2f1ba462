//! Deterministic desk-scale denoiser.
//!
//! A miniature UNet over a token grid: one self-attention and one
//! cross-attention block per resolution on the way down, mirrored on the way
//! up, with average-pool downsampling, nearest upsampling and additive skips.
//! All weights come from a single seed. The latent codec is an exact
//! pixel-unshuffle so `decode(encode(x)) == x`.

use std::hash::{DefaultHasher, Hash, Hasher};

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attn_tap::{attention, TapSession};
use crate::backend::{DenoiserBackend, LatentCodec, Tokenized};
use crate::error::{MftfError, Result};
use crate::model::{AttentionKind, BackendInfo, GridShape, Image, Latent, TextEmbedding};

const START: &str = "<start>";
const END: &str = "<end>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    #[serde(default)]
    pub seed: u64,
    /// Grid resolutions from finest to coarsest.
    #[serde(default = "default_resolutions")]
    pub resolutions: Vec<(usize, usize)>,
    /// Model width.
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Pixel-unshuffle factor of the codec.
    #[serde(default = "default_patch")]
    pub patch: usize,
    #[serde(default = "default_max_text_len")]
    pub max_text_len: usize,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
}

fn default_resolutions() -> Vec<(usize, usize)> {
    vec![(8, 8), (4, 4)]
}
fn default_d() -> usize {
    16
}
fn default_heads() -> usize {
    2
}
fn default_patch() -> usize {
    2
}
fn default_max_text_len() -> usize {
    16
}
fn default_vocab() -> usize {
    512
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            resolutions: default_resolutions(),
            d: default_d(),
            heads: default_heads(),
            patch: default_patch(),
            max_text_len: default_max_text_len(),
            vocab: default_vocab(),
        }
    }
}

struct SelfBlock {
    wq: Array2<f32>,
    wk: Array2<f32>,
    wv: Array2<f32>,
    wo: Array2<f32>,
}

struct CrossBlock {
    wq: Array2<f32>,
    wk: Array2<f32>,
    wv: Array2<f32>,
    wo: Array2<f32>,
}

pub struct ToyBackend {
    config: ToyConfig,
    info: BackendInfo,
    grids: Vec<GridShape>,
    w_in: Array2<f32>,
    b_in: Array1<f32>,
    w_time: Array2<f32>,
    token_embed: Array2<f32>,
    pos_embed: Array2<f32>,
    w_text: Array2<f32>,
    down: Vec<(SelfBlock, CrossBlock)>,
    up: Vec<(SelfBlock, CrossBlock)>,
    w_out: Array2<f32>,
    codec: ToyCodec,
    checksum: String,
}

struct WeightRng {
    rng: ChaCha8Rng,
    digest: Sha256,
}

impl WeightRng {
    fn matrix(&mut self, rows: usize, cols: usize, gain: f32) -> Array2<f32> {
        let scale = gain / (rows as f32).sqrt();
        let m = Array2::from_shape_simple_fn((rows, cols), || {
            let v: f32 = StandardNormal.sample(&mut self.rng);
            v * scale
        });
        for v in m.iter() {
            self.digest.update(v.to_le_bytes());
        }
        m
    }
}

/// Construct the toy denoiser from `(seed, resolutions, d)`.
pub fn build_toy_backend(seed: u64, resolutions: &[(usize, usize)], d: usize) -> Result<ToyBackend> {
    ToyBackend::new(ToyConfig {
        seed,
        resolutions: resolutions.to_vec(),
        d,
        ..ToyConfig::default()
    })
}

impl ToyBackend {
    pub fn new(config: ToyConfig) -> Result<Self> {
        if config.resolutions.is_empty() {
            return Err(MftfError::config("toy backend needs at least one resolution"));
        }
        if config.heads == 0 || config.d == 0 || config.d % config.heads != 0 {
            return Err(MftfError::config(format!(
                "toy width d={} is not divisible by {} heads",
                config.d, config.heads
            )));
        }
        if config.patch == 0 {
            return Err(MftfError::config("toy codec patch factor must be positive"));
        }
        if config.max_text_len < 2 || config.vocab < 3 {
            return Err(MftfError::config("toy text encoder needs max_text_len >= 2 and vocab >= 3"));
        }
        let grids: Vec<GridShape> = config
            .resolutions
            .iter()
            .map(|&(h, w)| GridShape::new(h, w))
            .collect();
        for g in &grids {
            if g.h < 2 || g.w < 2 {
                return Err(MftfError::config(format!("toy resolution {g} is smaller than 2x2")));
            }
        }
        for pair in grids.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let ok = a.h % b.h == 0 && a.w % b.w == 0 && a.h / b.h == a.w / b.w && a.h > b.h;
            if !ok {
                return Err(MftfError::config(format!(
                    "toy resolution {b} is not an integer downsampling of {a}"
                )));
            }
        }

        let d = config.d;
        let head_dim = d / config.heads;
        let channels = 3 * config.patch * config.patch;
        let mut wr = WeightRng {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            digest: Sha256::new(),
        };
        let w_in = wr.matrix(channels, d, 1.0);
        let b_in = wr.matrix(1, d, 0.1).row(0).to_owned();
        let w_time = wr.matrix(d, d, 1.0);
        let token_embed = wr.matrix(config.vocab, d, (config.vocab as f32).sqrt());
        let pos_embed = wr.matrix(config.max_text_len, d, 0.5 * (config.max_text_len as f32).sqrt());
        let w_text = wr.matrix(d, d, 1.0);
        let block = |wr: &mut WeightRng| {
            (
                SelfBlock {
                    wq: wr.matrix(d, d, 1.0),
                    wk: wr.matrix(d, d, 1.0),
                    wv: wr.matrix(d, d, 1.0),
                    wo: wr.matrix(d, d, 0.5),
                },
                CrossBlock {
                    wq: wr.matrix(d, d, 1.0),
                    wk: wr.matrix(d, d, 1.0),
                    wv: wr.matrix(d, d, 1.0),
                    wo: wr.matrix(d, d, 0.5),
                },
            )
        };
        let down: Vec<_> = grids.iter().map(|_| block(&mut wr)).collect();
        let up: Vec<_> = grids.iter().map(|_| block(&mut wr)).collect();
        let w_out = wr.matrix(d, channels, 1.0);
        let checksum = format!("{:x}", wr.digest.finalize());

        let layer_grids = grids.iter().chain(grids.iter().rev());
        let layers = layer_grids.flat_map(|&g| {
            [
                (AttentionKind::SelfAttention, g, config.heads, head_dim),
                (AttentionKind::Cross, g, config.heads, head_dim),
            ]
        });
        let latent = grids[0];
        let info = BackendInfo::new(
            format!("toy(seed={}, d={})", config.seed, d),
            layers.collect::<Vec<_>>(),
            [channels, latent.h, latent.w],
            config.max_text_len,
            [latent.h * config.patch, latent.w * config.patch],
        );
        let codec = ToyCodec::new(config.patch, latent);
        Ok(Self {
            config,
            info,
            grids,
            w_in,
            b_in,
            w_time,
            token_embed,
            pos_embed,
            w_text,
            down,
            up,
            w_out,
            codec,
            checksum,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    fn token_id(&self, word: &str) -> u32 {
        let mut h = DefaultHasher::new();
        word.hash(&mut h);
        2 + (h.finish() % (self.config.vocab as u64 - 2)) as u32
    }

    fn split_heads(&self, x: &Array2<f32>) -> Array3<f32> {
        let (n, d) = x.dim();
        let heads = self.config.heads;
        let hd = d / heads;
        Array3::from_shape_fn((heads, n, hd), |(h, i, j)| x[[i, h * hd + j]])
    }

    fn merge_heads(&self, x: &Array3<f32>) -> Array2<f32> {
        let (heads, n, hd) = x.dim();
        Array2::from_shape_fn((n, heads * hd), |(i, c)| x[[c / hd, i, c % hd]])
    }

    fn self_block(
        &self,
        b: &SelfBlock,
        layer: usize,
        h: &Array2<f32>,
        session: &mut TapSession<'_>,
    ) -> Array2<f32> {
        let x = layer_norm(h.view());
        let q = session.self_query(layer, self.split_heads(&x.dot(&b.wq)));
        let k = self.split_heads(&x.dot(&b.wk));
        let v = self.split_heads(&x.dot(&b.wv));
        let (o, _) = attention(q.view(), k.view(), v.view());
        let out = self.merge_heads(&o).dot(&b.wo);
        session.activation(layer, out.iter());
        out
    }

    fn cross_block(
        &self,
        b: &CrossBlock,
        layer: usize,
        h: &Array2<f32>,
        text: &TextEmbedding,
        session: &mut TapSession<'_>,
    ) -> Array2<f32> {
        let x = layer_norm(h.view());
        let q = self.split_heads(&x.dot(&b.wq));
        let k = self.split_heads(&text.dot(&b.wk));
        let v = self.split_heads(&text.dot(&b.wv));
        let (o, probs) = attention(q.view(), k.view(), v.view());
        session.cross_map(layer, &probs);
        let out = self.merge_heads(&o).dot(&b.wo);
        session.activation(layer, out.iter());
        out
    }
}

impl DenoiserBackend for ToyBackend {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn tokenize(&self, text: &str) -> Result<Tokenized> {
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        if words.is_empty() {
            return Err(MftfError::config("cannot tokenize an empty prompt"));
        }
        let mut warnings = Vec::new();
        let room = self.config.max_text_len - 2;
        let kept = if words.len() > room {
            warnings.push(format!(
                "prompt truncated from {} to {room} words (max text length {})",
                words.len(),
                self.config.max_text_len
            ));
            &words[..room]
        } else {
            &words[..]
        };
        let mut ids = vec![0];
        let mut strings = vec![START.to_string()];
        for w in kept {
            ids.push(self.token_id(w));
            strings.push(w.clone());
        }
        ids.push(1);
        strings.push(END.to_string());
        Ok(Tokenized {
            ids,
            strings,
            warnings,
        })
    }

    fn empty_prompt(&self) -> Result<Tokenized> {
        Ok(Tokenized {
            ids: vec![0, 1],
            strings: vec![START.into(), END.into()],
            warnings: Vec::new(),
        })
    }

    fn embed(&self, tokens: &Tokenized) -> Result<TextEmbedding> {
        let m = tokens.ids.len();
        if m > self.config.max_text_len {
            return Err(MftfError::config(format!(
                "{m} tokens exceed max text length {}",
                self.config.max_text_len
            )));
        }
        let mut x = Array2::<f32>::zeros((m, self.config.d));
        for (i, &id) in tokens.ids.iter().enumerate() {
            let id = id as usize % self.config.vocab;
            let mut row = x.row_mut(i);
            row += &self.token_embed.row(id);
            row += &self.pos_embed.row(i);
        }
        Ok(x.dot(&self.w_text).mapv(f32::tanh))
    }

    fn predict_noise(
        &self,
        latent: &Latent,
        timestep: usize,
        text: &TextEmbedding,
        session: &mut TapSession<'_>,
    ) -> Result<Latent> {
        let [c, hh, ww] = self.info.latent_shape;
        if latent.shape() != [c, hh, ww] {
            return Err(MftfError::shape(format!(
                "latent shape {:?} does not match {:?}",
                latent.shape(),
                self.info.latent_shape
            )));
        }
        if text.ncols() != self.config.d {
            return Err(MftfError::shape(format!(
                "text embedding width {} does not match d={}",
                text.ncols(),
                self.config.d
            )));
        }
        let grid0 = self.grids[0];
        let x = Array2::from_shape_fn((grid0.cells(), c), |(i, ch)| {
            let (r, col) = grid0.coords(i);
            latent[[ch, r, col]]
        });
        let temb = timestep_embedding(timestep, self.config.d).dot(&self.w_time);
        let mut h = x.dot(&self.w_in);
        h += &self.b_in;
        h += &temb;

        let levels = self.grids.len();
        let mut skips = Vec::with_capacity(levels);
        for (k, (sb, cb)) in self.down.iter().enumerate() {
            if k > 0 {
                h = avg_pool(&h, self.grids[k - 1], self.grids[k]);
            }
            h = &h + &self.self_block(sb, 2 * k, &h, session);
            h = &h + &self.cross_block(cb, 2 * k + 1, &h, text, session);
            skips.push(h.clone());
        }
        for (j, (sb, cb)) in self.up.iter().enumerate() {
            let k = levels - 1 - j;
            if j > 0 {
                h = upsample(&h, self.grids[k + 1], self.grids[k]);
            }
            h += &skips[k];
            let base = 2 * levels + 2 * j;
            h = &h + &self.self_block(sb, base, &h, session);
            h = &h + &self.cross_block(cb, base + 1, &h, text, session);
        }
        let out = layer_norm(h.view()).dot(&self.w_out);
        Ok(Array3::from_shape_fn((c, hh, ww), |(ch, r, col)| {
            out[[grid0.index(r, col), ch]]
        }))
    }

    fn codec(&self) -> &dyn LatentCodec {
        &self.codec
    }

    fn weights_checksum(&self) -> String {
        self.checksum.clone()
    }
}

/// Exact pixel-unshuffle codec.
#[derive(Clone, Copy, Debug)]
pub struct ToyCodec {
    patch: usize,
    latent: GridShape,
}

impl ToyCodec {
    pub fn new(patch: usize, latent: GridShape) -> Self {
        Self { patch, latent }
    }
}

impl LatentCodec for ToyCodec {
    fn encode(&self, image: &Image) -> Result<Latent> {
        let f = self.patch;
        let (h, w) = (self.latent.h * f, self.latent.w * f);
        if image.shape() != [3, h, w] {
            return Err(MftfError::shape(format!(
                "image shape {:?} does not match codec input [3, {h}, {w}]",
                image.shape()
            )));
        }
        Ok(Array3::from_shape_fn(
            (3 * f * f, self.latent.h, self.latent.w),
            |(ch, r, c)| {
                let (color, off) = (ch / (f * f), ch % (f * f));
                image[[color, r * f + off / f, c * f + off % f]]
            },
        ))
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        let f = self.patch;
        if latent.shape() != [3 * f * f, self.latent.h, self.latent.w] {
            return Err(MftfError::shape(format!(
                "latent shape {:?} does not match codec latent",
                latent.shape()
            )));
        }
        Ok(Array3::from_shape_fn(
            (3, self.latent.h * f, self.latent.w * f),
            |(color, y, x)| {
                let off = (y % f) * f + x % f;
                latent[[color * f * f + off, y / f, x / f]]
            },
        ))
    }
}

fn layer_norm(x: ArrayView2<'_, f32>) -> Array2<f32> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let n = row.len() as f32;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

pub(crate) fn timestep_embedding(t: usize, dim: usize) -> Array2<f32> {
    let half = dim / 2;
    let mut emb = Array2::<f32>::zeros((1, dim));
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        emb[[0, i]] = arg.sin() as f32;
        emb[[0, half + i]] = arg.cos() as f32;
    }
    emb
}

fn avg_pool(x: &Array2<f32>, from: GridShape, to: GridShape) -> Array2<f32> {
    let f = from.h / to.h;
    let d = x.ncols();
    let mut out = Array2::<f32>::zeros((to.cells(), d));
    let norm = 1.0 / (f * f) as f32;
    for r in 0..to.h {
        for c in 0..to.w {
            let mut acc = out.row_mut(to.index(r, c));
            for dr in 0..f {
                for dc in 0..f {
                    acc += &x.row(from.index(r * f + dr, c * f + dc));
                }
            }
            acc *= norm;
        }
    }
    out
}

fn upsample(x: &Array2<f32>, from: GridShape, to: GridShape) -> Array2<f32> {
    let f = to.h / from.h;
    let mut out = Array2::<f32>::zeros((to.cells(), x.ncols()));
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (r, c) = to.coords(i);
        row.assign(&x.slice(s![from.index(r / f, c / f), ..]));
    }
    out
}
