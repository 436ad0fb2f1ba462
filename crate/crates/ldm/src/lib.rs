//! Latent-diffusion backend for `mftf-core`.
//!
//! Loads a Stable Diffusion 1.x checkpoint in the diffusers directory layout
//! and exposes its UNet through the [`DenoiserBackend`] tap surface:
//!
//! ```text
//! $MFTF_CHECKPOINT_ROOT/
//!   unet/diffusion_pytorch_model.safetensors
//!   vae/diffusion_pytorch_model.safetensors
//!   text_encoder/model.safetensors
//!   tokenizer/tokenizer.json
//! ```
//!
//! [`LdmBackend::tiny`] builds a randomly initialised miniature with the same
//! architecture, used by tests and benchmarks.

pub mod text;
pub mod unet;
pub mod vae;

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{VarBuilder, VarMap};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use tokenizers::Tokenizer;

use mftf_core::{
    BackendInfo, DenoiserBackend, GridShape, Latent, LatentCodec, MftfError, Result, TapSession, TextEmbedding,
    Tokenized,
};

pub use text::{PromptTokenizer, TextEncoder};
pub use unet::{BlockSpec, UNet, UNetConfig};
pub use vae::{VaeCodec, VaeConfig};

/// Environment variable naming the checkpoint directory.
pub const CHECKPOINT_ENV: &str = "MFTF_CHECKPOINT_ROOT";

pub(crate) fn ce(e: candle_core::Error) -> MftfError {
    MftfError::backend(e.to_string())
}

/// `cpu`, `cuda`, `cuda:N` or `metal`.
pub fn parse_device(spec: &str) -> Result<Device> {
    let unavailable = |e: candle_core::Error| MftfError::Dependency(format!("device {spec:?} unavailable: {e}"));
    match spec {
        "cpu" => Ok(Device::Cpu),
        "cuda" => Device::new_cuda(0).map_err(unavailable),
        "metal" => Device::new_metal(0).map_err(unavailable),
        s => match s.strip_prefix("cuda:").map(str::parse::<usize>) {
            Some(Ok(n)) => Device::new_cuda(n).map_err(unavailable),
            _ => Err(MftfError::config(format!("unknown device {spec:?}"))),
        },
    }
}

#[derive(Clone, Debug)]
pub struct CheckpointPaths {
    pub unet: PathBuf,
    pub vae: PathBuf,
    pub text_encoder: PathBuf,
    pub tokenizer: PathBuf,
}

impl CheckpointPaths {
    pub fn under(root: &Path) -> Self {
        Self {
            unet: root.join("unet/diffusion_pytorch_model.safetensors"),
            vae: root.join("vae/diffusion_pytorch_model.safetensors"),
            text_encoder: root.join("text_encoder/model.safetensors"),
            tokenizer: root.join("tokenizer/tokenizer.json"),
        }
    }

    fn all(&self) -> [&Path; 4] {
        [&self.unet, &self.vae, &self.text_encoder, &self.tokenizer]
    }

    pub fn check(&self) -> Result<()> {
        let missing: Vec<String> = self
            .all()
            .iter()
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(MftfError::Dependency(format!("checkpoint files missing: {}", missing.join(", "))))
        }
    }
}

fn sha256_files(paths: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    for p in paths {
        let mut f = File::open(p)?;
        loop {
            let n = f.read(&mut buf)?;
            if n == 0 {
                break;
            }
            h.update(&buf[..n]);
        }
    }
    Ok(format!("{:x}", h.finalize()))
}

pub struct LdmBackend {
    info: BackendInfo,
    unet: UNet,
    text: TextEncoder,
    tokenizer: PromptTokenizer,
    codec: VaeCodec,
    cross_dim: usize,
    device: Device,
    checksum: String,
}

impl LdmBackend {
    /// Load a Stable Diffusion 1.x checkpoint. `image_size` defaults to 512².
    pub fn load(root: &Path, device: &Device, image_size: Option<[usize; 2]>) -> Result<Self> {
        let paths = CheckpointPaths::under(root);
        paths.check()?;
        let unet_cfg = UNetConfig::sd15();
        let vae_cfg = VaeConfig::sd15();
        let mmap = |p: &Path| {
            // SAFETY: the files are only read, and are not expected to change
            // while the backend is alive.
            unsafe { VarBuilder::from_mmaped_safetensors(&[p], DType::F32, device) }.map_err(ce)
        };
        let tokenizer = PromptTokenizer::from_file(&paths.tokenizer, 77)?;
        let text = TextEncoder::clip(mmap(&paths.text_encoder)?)?;
        let codec = VaeCodec::new(mmap(&paths.vae)?, &vae_cfg)?;
        let checksum = sha256_files(&paths.all())?;
        Self::assemble(
            "ldm-sd15",
            mmap(&paths.unet)?,
            &unet_cfg,
            &vae_cfg,
            image_size.unwrap_or([512, 512]),
            text,
            tokenizer,
            codec,
            checksum,
        )
    }

    /// Load from the directory named by [`CHECKPOINT_ENV`].
    pub fn from_env(device: &Device, image_size: Option<[usize; 2]>) -> Result<Self> {
        let root = std::env::var_os(CHECKPOINT_ENV)
            .ok_or_else(|| MftfError::Dependency(format!("{CHECKPOINT_ENV} is not set")))?;
        Self::load(Path::new(&root), device, image_size)
    }

    /// Random miniature: three UNet levels, 14 attention layers, 32² images,
    /// 16×16 latents and a 16-token word-level vocabulary.
    pub fn tiny(seed: u64) -> Result<Self> {
        let device = Device::Cpu;
        let unet_cfg = UNetConfig {
            in_channels: 4,
            out_channels: 4,
            blocks: vec![
                BlockSpec {
                    channels: 32,
                    cross_attention: true,
                    heads: 2,
                },
                BlockSpec {
                    channels: 64,
                    cross_attention: true,
                    heads: 2,
                },
                BlockSpec {
                    channels: 64,
                    cross_attention: false,
                    heads: 2,
                },
            ],
            layers_per_block: 1,
            transformer_depth: 1,
            norm_groups: 8,
            norm_eps: 1e-5,
            cross_attention_dim: 32,
            use_linear_projection: false,
        };
        let vae_cfg = VaeConfig {
            block_out_channels: vec![8, 16],
            layers_per_block: 1,
            latent_channels: 4,
            norm_groups: 4,
            scaling_factor: 0.18215,
        };
        let tokenizer = PromptTokenizer::new(tiny_tokenizer()?, 16)?;
        let vocab = TINY_WORDS.len() + 3;

        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &device);
        let text = TextEncoder::shallow(vb.pp("text_encoder"), vocab, 16, unet_cfg.cross_attention_dim)?;
        let codec = VaeCodec::new(vb.pp("vae"), &vae_cfg)?;
        let mut backend = Self::assemble(
            "ldm-tiny",
            vb.pp("unet"),
            &unet_cfg,
            &vae_cfg,
            [32, 32],
            text,
            tokenizer,
            codec,
            String::new(),
        )?;
        backend.checksum = randomize(&varmap, seed, &device)?;
        Ok(backend)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        name: &str,
        unet_vb: VarBuilder,
        unet_cfg: &UNetConfig,
        vae_cfg: &VaeConfig,
        image_size: [usize; 2],
        text: TextEncoder,
        tokenizer: PromptTokenizer,
        codec: VaeCodec,
        checksum: String,
    ) -> Result<Self> {
        let f = vae_cfg.downsampling();
        let [h, w] = image_size;
        if h % f != 0 || w % f != 0 {
            return Err(MftfError::config(format!("image size {h}x{w} is not divisible by {f}")));
        }
        let latent = GridShape::new(h / f, w / f);
        let device = unet_vb.device().clone();
        let (unet, layers) = UNet::new(unet_vb, unet_cfg, latent)?;
        let info = BackendInfo::new(
            name,
            layers,
            [vae_cfg.latent_channels, latent.h, latent.w],
            tokenizer.max_len(),
            image_size,
        );
        Ok(Self {
            info,
            unet,
            text,
            tokenizer,
            codec,
            cross_dim: unet_cfg.cross_attention_dim,
            device,
            checksum,
        })
    }
}

const TINY_WORDS: &[&str] = &[
    "a", "an", "the", "of", "on", "in", "with", "and", "to", "next", "photo", "cat", "dog", "bird", "car", "chair",
    "table", "tree", "house", "street", "park", "bowl", "apple", "red", "blue", "sitting", "standing", "big", "small",
];

/// Word-level tokenizer over [`TINY_WORDS`] with `<start>`/`<end>` markers.
fn tiny_tokenizer() -> Result<Tokenizer> {
    let mut vocab = serde_json::Map::new();
    for (i, w) in ["<start>", "<end>", "<unk>"].iter().chain(TINY_WORDS).enumerate() {
        vocab.insert((*w).to_string(), serde_json::json!(i));
    }
    let special = |id: u32, s: &str| {
        serde_json::json!({
            "id": id, "content": s, "single_word": false, "lstrip": false,
            "rstrip": false, "normalized": false, "special": true
        })
    };
    let spec = serde_json::json!({
        "version": "1.0",
        "truncation": null,
        "padding": null,
        "added_tokens": [special(0, "<start>"), special(1, "<end>"), special(2, "<unk>")],
        "normalizer": { "type": "Lowercase" },
        "pre_tokenizer": { "type": "Whitespace" },
        "post_processor": {
            "type": "TemplateProcessing",
            "single": [
                { "SpecialToken": { "id": "<start>", "type_id": 0 } },
                { "Sequence": { "id": "A", "type_id": 0 } },
                { "SpecialToken": { "id": "<end>", "type_id": 0 } }
            ],
            "pair": [
                { "SpecialToken": { "id": "<start>", "type_id": 0 } },
                { "Sequence": { "id": "A", "type_id": 0 } },
                { "Sequence": { "id": "B", "type_id": 1 } },
                { "SpecialToken": { "id": "<end>", "type_id": 0 } }
            ],
            "special_tokens": {
                "<start>": { "id": "<start>", "ids": [0], "tokens": ["<start>"] },
                "<end>": { "id": "<end>", "ids": [1], "tokens": ["<end>"] }
            }
        },
        "decoder": null,
        "model": { "type": "WordLevel", "vocab": vocab, "unk_token": "<unk>" }
    });
    let bytes = serde_json::to_vec(&spec)?;
    Tokenizer::from_bytes(bytes).map_err(|e| MftfError::backend(format!("tokenizer: {e}")))
}

/// Overwrite every variable with seeded values and return a checksum of them.
///
/// One-dimensional `weight`s are norm gains and start near one; other
/// one-dimensional tensors are biases and start near zero; matrices and
/// kernels get a `1/√fan_in` normal.
fn randomize(varmap: &VarMap, seed: u64, device: &Device) -> Result<String> {
    let data = varmap.data().lock().map_err(|_| MftfError::backend("variable map lock poisoned"))?;
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hash = Sha256::new();
    for name in names {
        let var = &data[name];
        let dims = var.dims().to_vec();
        let numel: usize = dims.iter().product();
        let mut draw = |scale: f32, offset: f32| -> Vec<f32> {
            (0..numel)
                .map(|_| {
                    let n: f32 = StandardNormal.sample(&mut rng);
                    offset + scale * n
                })
                .collect()
        };
        let values = match dims.len() {
            1 if name.ends_with(".weight") => draw(0.05, 1.0),
            1 => draw(0.02, 0.0),
            _ => draw(1.0 / ((numel / dims[0]) as f32).sqrt(), 0.0),
        };
        hash.update(name.as_bytes());
        for v in &values {
            hash.update(v.to_le_bytes());
        }
        let t = Tensor::from_vec(values, dims, device).map_err(ce)?;
        var.set(&t).map_err(ce)?;
    }
    Ok(format!("{:x}", hash.finalize()))
}

impl DenoiserBackend for LdmBackend {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn tokenize(&self, text: &str) -> Result<Tokenized> {
        self.tokenizer.tokenize(text)
    }

    fn empty_prompt(&self) -> Result<Tokenized> {
        self.tokenizer.tokenize("")
    }

    fn embed(&self, tokens: &Tokenized) -> Result<TextEmbedding> {
        let e = self.text.encode(&tokens.ids, &self.device)?;
        if e.ncols() != self.cross_dim {
            return Err(MftfError::shape(format!(
                "text encoder width {} does not match UNet context width {}",
                e.ncols(),
                self.cross_dim
            )));
        }
        Ok(e)
    }

    fn predict_noise(
        &self,
        latent: &Latent,
        timestep: usize,
        text: &TextEmbedding,
        session: &mut TapSession<'_>,
    ) -> Result<Latent> {
        if latent.shape() != self.info.latent_shape {
            return Err(MftfError::shape(format!(
                "latent shape {:?} does not match {:?}",
                latent.shape(),
                self.info.latent_shape
            )));
        }
        if text.ncols() != self.cross_dim {
            return Err(MftfError::shape(format!(
                "text embedding width {} does not match {}",
                text.ncols(),
                self.cross_dim
            )));
        }
        let z = unet::from_array3(latent, &self.device)?.unsqueeze(0).map_err(ce)?;
        let ctx: Vec<f32> = text.iter().copied().collect();
        let ctx = Tensor::from_vec(ctx, (1, text.nrows(), text.ncols()), &self.device).map_err(ce)?;
        let eps = self.unet.forward(&z, timestep, &ctx, session)?;
        let eps: Array3<f32> = unet::to_array3(&eps.squeeze(0).map_err(ce)?)?;
        Ok(eps)
    }

    fn codec(&self) -> &dyn LatentCodec {
        &self.codec
    }

    fn weights_checksum(&self) -> String {
        self.checksum.clone()
    }
}
