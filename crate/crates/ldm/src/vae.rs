//! KL autoencoder used as the latent codec.

use candle_core::{Device, Module, Tensor};
use candle_nn::{self as nn, VarBuilder};
use candle_transformers::models::stable_diffusion::unet_2d_blocks::{
    DownEncoderBlock2D, DownEncoderBlock2DConfig, UNetMidBlock2D, UNetMidBlock2DConfig,
};
use candle_transformers::models::stable_diffusion::vae::{AutoEncoderKL, AutoEncoderKLConfig};
use serde::{Deserialize, Serialize};

use mftf_core::{Image, Latent, LatentCodec, MftfError, Result};

use crate::ce;
use crate::unet::{from_array3, to_array3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub block_out_channels: Vec<usize>,
    pub layers_per_block: usize,
    pub latent_channels: usize,
    pub norm_groups: usize,
    pub scaling_factor: f64,
}

impl VaeConfig {
    pub fn sd15() -> Self {
        Self {
            block_out_channels: vec![128, 256, 512, 512],
            layers_per_block: 2,
            latent_channels: 4,
            norm_groups: 32,
            scaling_factor: 0.18215,
        }
    }

    /// Pixels per latent cell along each axis.
    pub fn downsampling(&self) -> usize {
        1 << (self.block_out_channels.len() - 1)
    }
}

/// The encoder half, reimplemented because the library keeps its own private.
struct Encoder {
    conv_in: nn::Conv2d,
    down: Vec<DownEncoderBlock2D>,
    mid: UNetMidBlock2D,
    norm_out: nn::GroupNorm,
    conv_out: nn::Conv2d,
    quant_conv: nn::Conv2d,
}

impl Encoder {
    fn new(vb: VarBuilder, cfg: &VaeConfig) -> candle_core::Result<Self> {
        let enc = vb.pp("encoder");
        let padded = nn::Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let ch = &cfg.block_out_channels;
        let conv_in = nn::conv2d(3, ch[0], 3, padded, enc.pp("conv_in"))?;
        let down = (0..ch.len())
            .map(|i| {
                let block = DownEncoderBlock2DConfig {
                    num_layers: cfg.layers_per_block,
                    resnet_eps: 1e-6,
                    resnet_groups: cfg.norm_groups,
                    add_downsample: i + 1 < ch.len(),
                    downsample_padding: 0,
                    ..Default::default()
                };
                let cin = if i > 0 { ch[i - 1] } else { ch[0] };
                DownEncoderBlock2D::new(enc.pp("down_blocks").pp(i.to_string()), cin, ch[i], block)
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        let last = ch[ch.len() - 1];
        let mid_cfg = UNetMidBlock2DConfig {
            resnet_eps: 1e-6,
            output_scale_factor: 1.0,
            attn_num_head_channels: None,
            resnet_groups: Some(cfg.norm_groups),
            ..Default::default()
        };
        let mid = UNetMidBlock2D::new(enc.pp("mid_block"), last, None, mid_cfg)?;
        let norm_out = nn::group_norm(cfg.norm_groups, last, 1e-6, enc.pp("conv_norm_out"))?;
        let conv_out = nn::conv2d(last, 2 * cfg.latent_channels, 3, padded, enc.pp("conv_out"))?;
        let lc = 2 * cfg.latent_channels;
        let quant_conv = nn::conv2d(lc, lc, 1, Default::default(), vb.pp("quant_conv"))?;
        Ok(Self {
            conv_in,
            down,
            mid,
            norm_out,
            conv_out,
            quant_conv,
        })
    }

    /// Mean and log-variance stacked on the channel axis.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut x = self.conv_in.forward(x)?;
        for block in &self.down {
            x = block.forward(&x)?;
        }
        let x = self.mid.forward(&x, None)?;
        let x = nn::ops::silu(&self.norm_out.forward(&x)?)?;
        self.quant_conv.forward(&self.conv_out.forward(&x)?)
    }
}

/// Encodes to the posterior mean (no sampling), scaled by the latent
/// scaling factor; decodes through the library decoder.
pub struct VaeCodec {
    encoder: Encoder,
    autoencoder: AutoEncoderKL,
    cfg: VaeConfig,
    device: Device,
}

impl VaeCodec {
    pub fn new(vb: VarBuilder, cfg: &VaeConfig) -> Result<Self> {
        let kl = AutoEncoderKLConfig {
            block_out_channels: cfg.block_out_channels.clone(),
            layers_per_block: cfg.layers_per_block,
            latent_channels: cfg.latent_channels,
            norm_num_groups: cfg.norm_groups,
            use_quant_conv: true,
            use_post_quant_conv: true,
        };
        Ok(Self {
            encoder: Encoder::new(vb.clone(), cfg).map_err(ce)?,
            autoencoder: AutoEncoderKL::new(vb.clone(), 3, 3, kl).map_err(ce)?,
            cfg: cfg.clone(),
            device: vb.device().clone(),
        })
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let (c, h, w) = image.dim();
        let f = self.cfg.downsampling();
        if c != 3 || h % f != 0 || w % f != 0 {
            return Err(MftfError::shape(format!(
                "image {c}x{h}x{w} must have 3 channels and sides divisible by {f}"
            )));
        }
        Ok(())
    }
}

impl LatentCodec for VaeCodec {
    fn encode(&self, image: &Image) -> Result<Latent> {
        self.check_image(image)?;
        let x = from_array3(image, &self.device)?;
        let scale = self.cfg.scaling_factor;
        let z = x
            .affine(2.0, -1.0)
            .and_then(|x| x.unsqueeze(0))
            .and_then(|x| self.encoder.forward(&x))
            .and_then(|p| p.narrow(1, 0, self.cfg.latent_channels))
            .and_then(|m| m.affine(scale, 0.0))
            .and_then(|m| m.squeeze(0))
            .map_err(ce)?;
        to_array3(&z)
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        if latent.dim().0 != self.cfg.latent_channels {
            return Err(MftfError::shape(format!(
                "latent has {} channels, codec expects {}",
                latent.dim().0,
                self.cfg.latent_channels
            )));
        }
        let z = from_array3(latent, &self.device)?;
        let img = z
            .affine(1.0 / self.cfg.scaling_factor, 0.0)
            .and_then(|z| z.unsqueeze(0))
            .and_then(|z| self.autoencoder.decode(&z))
            .and_then(|x| x.affine(0.5, 0.5))
            .and_then(|x| x.clamp(0f32, 1f32))
            .and_then(|x| x.squeeze(0))
            .map_err(ce)?;
        to_array3(&img)
    }
}
