//! Conditional UNet whose attention layers report to a tap session.
//!
//! Parameter names follow the diffusers layout, so standard
//! `diffusion_pytorch_model.safetensors` files load unchanged.

use candle_core::{Device, Module, Tensor, D};
use candle_nn::{self as nn, VarBuilder};
use candle_transformers::models::stable_diffusion::embeddings::{TimestepEmbedding, Timesteps};
use candle_transformers::models::stable_diffusion::resnet::{ResnetBlock2D, ResnetBlock2DConfig};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use mftf_core::{AttentionKind, GridShape, MftfError, Result, TapSession};

use crate::ce;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    pub cross_attention: bool,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub layers_per_block: usize,
    pub transformer_depth: usize,
    pub norm_groups: usize,
    pub norm_eps: f64,
    pub cross_attention_dim: usize,
    pub use_linear_projection: bool,
}

impl UNetConfig {
    /// Stable Diffusion 1.x.
    pub fn sd15() -> Self {
        let block = |channels, cross_attention| BlockSpec {
            channels,
            cross_attention,
            heads: 8,
        };
        Self {
            in_channels: 4,
            out_channels: 4,
            blocks: vec![block(320, true), block(640, true), block(1280, true), block(1280, false)],
            layers_per_block: 2,
            transformer_depth: 1,
            norm_groups: 32,
            norm_eps: 1e-5,
            cross_attention_dim: 768,
            use_linear_projection: false,
        }
    }

    fn time_dim(&self) -> usize {
        self.blocks[0].channels * 4
    }
}

/// `(kind, grid, heads, head_dim)` of every attention layer in forward order.
pub type LayerTable = Vec<(AttentionKind, GridShape, usize, usize)>;

struct Builder {
    layers: LayerTable,
}

impl Builder {
    fn next(&mut self, kind: AttentionKind, grid: GridShape, heads: usize, head_dim: usize) -> usize {
        self.layers.push((kind, grid, heads, head_dim));
        self.layers.len() - 1
    }
}

pub(crate) fn to_array3(t: &Tensor) -> Result<Array3<f32>> {
    let (a, b, c) = t.dims3().map_err(ce)?;
    let data = t.flatten_all().and_then(|t| t.to_vec1::<f32>()).map_err(ce)?;
    Array3::from_shape_vec((a, b, c), data).map_err(|e| MftfError::shape(e.to_string()))
}

pub(crate) fn from_array3(a: &Array3<f32>, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = a.iter().copied().collect();
    Tensor::from_vec(data, a.dim(), device).map_err(ce)
}

struct TappedAttention {
    to_q: nn::Linear,
    to_k: nn::Linear,
    to_v: nn::Linear,
    to_out: nn::Linear,
    heads: usize,
    head_dim: usize,
    layer: usize,
    is_cross: bool,
}

impl TappedAttention {
    fn new(
        vb: VarBuilder,
        dim: usize,
        context_dim: Option<usize>,
        heads: usize,
        layer: usize,
    ) -> candle_core::Result<Self> {
        let head_dim = dim / heads;
        let inner = head_dim * heads;
        let kv_dim = context_dim.unwrap_or(dim);
        Ok(Self {
            to_q: nn::linear_no_bias(dim, inner, vb.pp("to_q"))?,
            to_k: nn::linear_no_bias(kv_dim, inner, vb.pp("to_k"))?,
            to_v: nn::linear_no_bias(kv_dim, inner, vb.pp("to_v"))?,
            to_out: nn::linear(inner, dim, vb.pp("to_out.0"))?,
            heads,
            head_dim,
            layer,
            is_cross: context_dim.is_some(),
        })
    }

    /// `(1, n, h·d)` to `(h, n, d)`.
    fn split(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (_, n, _) = x.dims3()?;
        x.reshape((n, self.heads, self.head_dim))?.transpose(0, 1)?.contiguous()
    }

    fn forward(&self, x: &Tensor, context: &Tensor, session: &mut TapSession<'_>) -> Result<Tensor> {
        let kv_src = if self.is_cross { context } else { x };
        let (_, n, _) = x.dims3().map_err(ce)?;
        let q = self.to_q.forward(x).and_then(|t| self.split(&t)).map_err(ce)?;
        let k = self.to_k.forward(kv_src).and_then(|t| self.split(&t)).map_err(ce)?;
        let v = self.to_v.forward(kv_src).and_then(|t| self.split(&t)).map_err(ce)?;
        let q = if self.is_cross {
            q
        } else {
            let used = session.self_query(self.layer, to_array3(&q)?);
            from_array3(&used, q.device())?
        };
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let probs = k
            .t()
            .and_then(|kt| q.matmul(&kt.contiguous()?))
            .and_then(|s| s * scale)
            .and_then(|s| nn::ops::softmax_last_dim(&s))
            .map_err(ce)?;
        if self.is_cross && session.wants_cross(self.layer) {
            session.cross_map(self.layer, &to_array3(&probs)?);
        }
        let out = probs
            .matmul(&v)
            .and_then(|o| o.transpose(0, 1)?.reshape((1, n, self.heads * self.head_dim)))
            .and_then(|o| self.to_out.forward(&o))
            .map_err(ce)?;
        if session.probing() {
            let values = out.flatten_all().and_then(|t| t.to_vec1::<f32>()).map_err(ce)?;
            session.activation(self.layer, values.iter());
        }
        Ok(out)
    }
}

struct TransformerBlock {
    norm1: nn::LayerNorm,
    attn1: TappedAttention,
    norm2: nn::LayerNorm,
    attn2: TappedAttention,
    norm3: nn::LayerNorm,
    ff_in: nn::Linear,
    ff_out: nn::Linear,
}

impl TransformerBlock {
    fn new(vb: VarBuilder, dim: usize, heads: usize, context_dim: usize, grid: GridShape, b: &mut Builder) -> candle_core::Result<Self> {
        let head_dim = dim / heads;
        let self_layer = b.next(AttentionKind::SelfAttention, grid, heads, head_dim);
        let cross_layer = b.next(AttentionKind::Cross, grid, heads, head_dim);
        Ok(Self {
            norm1: nn::layer_norm(dim, 1e-5, vb.pp("norm1"))?,
            attn1: TappedAttention::new(vb.pp("attn1"), dim, None, heads, self_layer)?,
            norm2: nn::layer_norm(dim, 1e-5, vb.pp("norm2"))?,
            attn2: TappedAttention::new(vb.pp("attn2"), dim, Some(context_dim), heads, cross_layer)?,
            norm3: nn::layer_norm(dim, 1e-5, vb.pp("norm3"))?,
            ff_in: nn::linear(dim, dim * 8, vb.pp("ff.net.0.proj"))?,
            ff_out: nn::linear(dim * 4, dim, vb.pp("ff.net.2"))?,
        })
    }

    fn forward(&self, x: &Tensor, context: &Tensor, s: &mut TapSession<'_>) -> Result<Tensor> {
        let h = self.norm1.forward(x).map_err(ce)?;
        let x = (self.attn1.forward(&h, context, s)? + x).map_err(ce)?;
        let h = self.norm2.forward(&x).map_err(ce)?;
        let x = (self.attn2.forward(&h, context, s)? + &x).map_err(ce)?;
        let ff = || -> candle_core::Result<Tensor> {
            let h = self.ff_in.forward(&self.norm3.forward(&x)?)?;
            let parts = h.chunk(2, D::Minus1)?;
            let h = (&parts[0] * parts[1].gelu_erf()?)?;
            self.ff_out.forward(&h)? + &x
        };
        ff().map_err(ce)
    }
}

enum Proj {
    Conv(nn::Conv2d),
    Linear(nn::Linear),
}

struct SpatialTransformer {
    norm: nn::GroupNorm,
    proj_in: Proj,
    blocks: Vec<TransformerBlock>,
    proj_out: Proj,
}

impl SpatialTransformer {
    fn new(vb: VarBuilder, channels: usize, heads: usize, cfg: &UNetConfig, grid: GridShape, b: &mut Builder) -> candle_core::Result<Self> {
        let proj = |name: &str| -> candle_core::Result<Proj> {
            Ok(if cfg.use_linear_projection {
                Proj::Linear(nn::linear(channels, channels, vb.pp(name))?)
            } else {
                Proj::Conv(nn::conv2d(channels, channels, 1, Default::default(), vb.pp(name))?)
            })
        };
        let norm = nn::group_norm(cfg.norm_groups, channels, 1e-6, vb.pp("norm"))?;
        let proj_in = proj("proj_in")?;
        let vb_tb = vb.pp("transformer_blocks");
        let blocks = (0..cfg.transformer_depth)
            .map(|i| TransformerBlock::new(vb_tb.pp(i.to_string()), channels, heads, cfg.cross_attention_dim, grid, b))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let proj_out = proj("proj_out")?;
        Ok(Self {
            norm,
            proj_in,
            blocks,
            proj_out,
        })
    }

    fn forward(&self, x: &Tensor, context: &Tensor, s: &mut TapSession<'_>) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4().map_err(ce)?;
        let to_seq = |t: &Tensor| t.permute((0, 2, 3, 1))?.reshape((1, h * w, c));
        let to_map = |t: &Tensor| t.reshape((1, h, w, c))?.permute((0, 3, 1, 2))?.contiguous();
        let normed = self.norm.forward(x).map_err(ce)?;
        let mut seq = match &self.proj_in {
            Proj::Conv(p) => p.forward(&normed).and_then(|t| to_seq(&t)),
            Proj::Linear(p) => to_seq(&normed).and_then(|t| p.forward(&t)),
        }
        .map_err(ce)?;
        for block in &self.blocks {
            seq = block.forward(&seq, context, s)?;
        }
        let out = match &self.proj_out {
            Proj::Conv(p) => to_map(&seq).and_then(|t| p.forward(&t)),
            Proj::Linear(p) => p.forward(&seq).and_then(|t| to_map(&t)),
        };
        out.and_then(|o| o + x).map_err(ce)
    }
}

struct Block {
    resnets: Vec<ResnetBlock2D>,
    attentions: Vec<SpatialTransformer>,
    downsample: Option<nn::Conv2d>,
    upsample: Option<nn::Conv2d>,
}

fn conv3(vb: VarBuilder, cin: usize, cout: usize, stride: usize) -> candle_core::Result<nn::Conv2d> {
    let cfg = nn::Conv2dConfig {
        padding: 1,
        stride,
        ..Default::default()
    };
    nn::conv2d(cin, cout, 3, cfg, vb)
}

/// Upsampled (or downsampled) `grid` with factor 2.
fn scaled(grid: GridShape, up: bool) -> GridShape {
    if up {
        GridShape::new(grid.h * 2, grid.w * 2)
    } else {
        GridShape::new(grid.h / 2, grid.w / 2)
    }
}

pub struct UNet {
    conv_in: nn::Conv2d,
    time_proj: Timesteps,
    time_embedding: TimestepEmbedding,
    down: Vec<Block>,
    mid_resnets: [ResnetBlock2D; 2],
    mid_attention: SpatialTransformer,
    up: Vec<Block>,
    norm_out: nn::GroupNorm,
    conv_out: nn::Conv2d,
}

impl UNet {
    /// Build for latents of shape `(in_channels, latent.h, latent.w)`.
    pub fn new(vb: VarBuilder, cfg: &UNetConfig, latent: GridShape) -> Result<(Self, LayerTable)> {
        let n = cfg.blocks.len();
        if n == 0 {
            return Err(MftfError::config("UNet needs at least one block"));
        }
        let factor = 1 << (n - 1);
        if latent.h % factor != 0 || latent.w % factor != 0 || latent.h < factor || latent.w < factor {
            return Err(MftfError::config(format!(
                "latent {}x{} is not divisible by the UNet downsampling factor {factor}",
                latent.h, latent.w
            )));
        }
        for spec in &cfg.blocks {
            if spec.channels % spec.heads != 0 || spec.channels % cfg.norm_groups != 0 {
                return Err(MftfError::config(format!(
                    "block width {} must be divisible by its {} heads and {} norm groups",
                    spec.channels, spec.heads, cfg.norm_groups
                )));
            }
        }
        let mut b = Builder { layers: Vec::new() };
        let unet = Self::build(vb, cfg, latent, &mut b).map_err(ce)?;
        Ok((unet, b.layers))
    }

    fn build(vb: VarBuilder, cfg: &UNetConfig, latent: GridShape, b: &mut Builder) -> candle_core::Result<Self> {
        let n = cfg.blocks.len();
        let c0 = cfg.blocks[0].channels;
        let temb = cfg.time_dim();
        let resnet = |vb: VarBuilder, cin: usize, cout: usize| {
            let rc = ResnetBlock2DConfig {
                out_channels: Some(cout),
                temb_channels: Some(temb),
                groups: cfg.norm_groups,
                eps: cfg.norm_eps,
                ..Default::default()
            };
            ResnetBlock2D::new(vb, cin, rc)
        };

        let conv_in = conv3(vb.pp("conv_in"), cfg.in_channels, c0, 1)?;
        let time_proj = Timesteps::new(c0, true, 0.0);
        let time_embedding = TimestepEmbedding::new(vb.pp("time_embedding"), c0, temb)?;

        let mut grid = latent;
        let mut down = Vec::with_capacity(n);
        let vb_down = vb.pp("down_blocks");
        for (i, spec) in cfg.blocks.iter().enumerate() {
            let vbi = vb_down.pp(i.to_string());
            let cin = if i == 0 { c0 } else { cfg.blocks[i - 1].channels };
            let mut resnets = Vec::new();
            let mut attentions = Vec::new();
            for j in 0..cfg.layers_per_block {
                let c = if j == 0 { cin } else { spec.channels };
                resnets.push(resnet(vbi.pp("resnets").pp(j.to_string()), c, spec.channels)?);
                if spec.cross_attention {
                    attentions.push(SpatialTransformer::new(
                        vbi.pp("attentions").pp(j.to_string()),
                        spec.channels,
                        spec.heads,
                        cfg,
                        grid,
                        b,
                    )?);
                }
            }
            let downsample = if i + 1 < n {
                grid = scaled(grid, false);
                Some(conv3(vbi.pp("downsamplers.0.conv"), spec.channels, spec.channels, 2)?)
            } else {
                None
            };
            down.push(Block {
                resnets,
                attentions,
                downsample,
                upsample: None,
            });
        }

        let last = &cfg.blocks[n - 1];
        let vb_mid = vb.pp("mid_block");
        let mid0 = resnet(vb_mid.pp("resnets.0"), last.channels, last.channels)?;
        let mid_attention = SpatialTransformer::new(vb_mid.pp("attentions.0"), last.channels, last.heads, cfg, grid, b)?;
        let mid1 = resnet(vb_mid.pp("resnets.1"), last.channels, last.channels)?;

        let mut up = Vec::with_capacity(n);
        let vb_up = vb.pp("up_blocks");
        for i in 0..n {
            let spec = &cfg.blocks[n - 1 - i];
            let vbi = vb_up.pp(i.to_string());
            let prev = if i > 0 { cfg.blocks[n - i].channels } else { last.channels };
            let skip = cfg.blocks[if i == n - 1 { 0 } else { n - i - 2 }].channels;
            let layers = cfg.layers_per_block + 1;
            let mut resnets = Vec::new();
            let mut attentions = Vec::new();
            for j in 0..layers {
                let res_skip = if j == layers - 1 { skip } else { spec.channels };
                let res_in = if j == 0 { prev } else { spec.channels };
                resnets.push(resnet(
                    vbi.pp("resnets").pp(j.to_string()),
                    res_in + res_skip,
                    spec.channels,
                )?);
                if spec.cross_attention {
                    attentions.push(SpatialTransformer::new(
                        vbi.pp("attentions").pp(j.to_string()),
                        spec.channels,
                        spec.heads,
                        cfg,
                        grid,
                        b,
                    )?);
                }
            }
            let upsample = if i + 1 < n {
                grid = scaled(grid, true);
                Some(conv3(vbi.pp("upsamplers.0.conv"), spec.channels, spec.channels, 1)?)
            } else {
                None
            };
            up.push(Block {
                resnets,
                attentions,
                downsample: None,
                upsample,
            });
        }

        Ok(Self {
            conv_in,
            time_proj,
            time_embedding,
            down,
            mid_resnets: [mid0, mid1],
            mid_attention,
            up,
            norm_out: nn::group_norm(cfg.norm_groups, c0, cfg.norm_eps, vb.pp("conv_norm_out"))?,
            conv_out: conv3(vb.pp("conv_out"), c0, cfg.out_channels, 1)?,
        })
    }

    /// Noise prediction for a `(1, c, h, w)` latent and a `(1, m, d)` context.
    pub fn forward(&self, latent: &Tensor, timestep: usize, context: &Tensor, s: &mut TapSession<'_>) -> Result<Tensor> {
        let device = latent.device();
        let emb = Tensor::new(&[timestep as f32], device)
            .and_then(|t| self.time_proj.forward(&t))
            .and_then(|t| self.time_embedding.forward(&t))
            .map_err(ce)?;
        let mut x = self.conv_in.forward(latent).map_err(ce)?;
        let mut skips = vec![x.clone()];
        for block in &self.down {
            for (j, resnet) in block.resnets.iter().enumerate() {
                x = resnet.forward(&x, Some(&emb)).map_err(ce)?;
                if let Some(attn) = block.attentions.get(j) {
                    x = attn.forward(&x, context, s)?;
                }
                skips.push(x.clone());
            }
            if let Some(conv) = &block.downsample {
                x = conv.forward(&x).map_err(ce)?;
                skips.push(x.clone());
            }
        }
        x = self.mid_resnets[0].forward(&x, Some(&emb)).map_err(ce)?;
        x = self.mid_attention.forward(&x, context, s)?;
        x = self.mid_resnets[1].forward(&x, Some(&emb)).map_err(ce)?;
        for block in &self.up {
            for (j, resnet) in block.resnets.iter().enumerate() {
                let skip = skips.pop().ok_or_else(|| MftfError::backend("UNet skip stack exhausted"))?;
                x = Tensor::cat(&[&x, &skip], 1)
                    .and_then(|t| resnet.forward(&t, Some(&emb)))
                    .map_err(ce)?;
                if let Some(attn) = block.attentions.get(j) {
                    x = attn.forward(&x, context, s)?;
                }
            }
            if let Some(conv) = &block.upsample {
                let (_, _, h, w) = x.dims4().map_err(ce)?;
                x = x
                    .upsample_nearest2d(h * 2, w * 2)
                    .and_then(|t| conv.forward(&t))
                    .map_err(ce)?;
            }
        }
        self.norm_out
            .forward(&x)
            .and_then(|t| nn::ops::silu(&t))
            .and_then(|t| self.conv_out.forward(&t))
            .map_err(ce)
    }
}
