//! Prompt tokenization and text encoding.

use std::path::Path;

use candle_core::{Device, Module, Tensor};
use candle_nn::{self as nn, VarBuilder};
use candle_transformers::models::stable_diffusion::clip::{ClipTextTransformer, Config as ClipConfig};
use ndarray::Array2;
use tokenizers::Tokenizer;

use mftf_core::{MftfError, Result, Tokenized};

use crate::ce;

/// A `tokenizers` tokenizer padded to a fixed context length.
///
/// The pad token is the last token of the encoded empty string, which for
/// CLIP-style templates is the end-of-text marker.
pub struct PromptTokenizer {
    inner: Tokenizer,
    max_len: usize,
    pad: (u32, String),
}

fn tok_err(e: impl std::fmt::Display) -> MftfError {
    MftfError::backend(format!("tokenizer: {e}"))
}

impl PromptTokenizer {
    pub fn new(inner: Tokenizer, max_len: usize) -> Result<Self> {
        let empty = inner.encode("", true).map_err(tok_err)?;
        let (Some(&id), Some(s)) = (empty.get_ids().last(), empty.get_tokens().last()) else {
            return Err(MftfError::backend(
                "tokenizer adds no special tokens; cannot derive the pad token",
            ));
        };
        let pad = (id, s.clone());
        Ok(Self { inner, max_len, pad })
    }

    pub fn from_file(path: &Path, max_len: usize) -> Result<Self> {
        let inner = Tokenizer::from_file(path)
            .map_err(|e| MftfError::Dependency(format!("cannot load tokenizer {}: {e}", path.display())))?;
        Self::new(inner, max_len)
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Encode, truncate to the context length keeping the final end token,
    /// and pad.
    pub fn tokenize(&self, text: &str) -> Result<Tokenized> {
        let enc = self.inner.encode(text, true).map_err(tok_err)?;
        let mut ids = enc.get_ids().to_vec();
        let mut strings = enc.get_tokens().to_vec();
        let mut warnings = Vec::new();
        if ids.len() > self.max_len {
            warnings.push(format!(
                "prompt {text:?} has {} tokens, truncated to {}",
                ids.len(),
                self.max_len
            ));
            let last = (ids[ids.len() - 1], strings[strings.len() - 1].clone());
            ids.truncate(self.max_len - 1);
            strings.truncate(self.max_len - 1);
            ids.push(last.0);
            strings.push(last.1);
        }
        while ids.len() < self.max_len {
            ids.push(self.pad.0);
            strings.push(self.pad.1.clone());
        }
        Ok(Tokenized { ids, strings, warnings })
    }
}

pub enum TextEncoder {
    Clip(ClipTextTransformer),
    /// Token plus position embeddings and a final layer norm: the input
    /// stage of a CLIP text model without its transformer layers.
    Shallow {
        tokens: nn::Embedding,
        positions: nn::Embedding,
        norm: nn::LayerNorm,
    },
}

impl TextEncoder {
    pub fn clip(vb: VarBuilder) -> Result<Self> {
        ClipTextTransformer::new(vb, &ClipConfig::v1_5()).map(Self::Clip).map_err(ce)
    }

    pub fn shallow(vb: VarBuilder, vocab: usize, max_len: usize, dim: usize) -> Result<Self> {
        let vb = vb.pp("text_model");
        let build = || -> candle_core::Result<Self> {
            Ok(Self::Shallow {
                tokens: nn::embedding(vocab, dim, vb.pp("embeddings.token_embedding"))?,
                positions: nn::embedding(max_len, dim, vb.pp("embeddings.position_embedding"))?,
                norm: nn::layer_norm(dim, 1e-5, vb.pp("final_layer_norm"))?,
            })
        };
        build().map_err(ce)
    }

    /// `(m, dim)` hidden states for `ids`.
    pub fn encode(&self, ids: &[u32], device: &Device) -> Result<Array2<f32>> {
        let input = Tensor::new(ids, device).and_then(|t| t.unsqueeze(0)).map_err(ce)?;
        let hidden = match self {
            Self::Clip(clip) => clip.forward(&input),
            Self::Shallow {
                tokens,
                positions,
                norm,
            } => {
                let pos = Tensor::arange(0u32, ids.len() as u32, device).and_then(|p| p.unsqueeze(0));
                pos.and_then(|p| tokens.forward(&input)? + positions.forward(&p)?)
                    .and_then(|h| norm.forward(&h))
            }
        }
        .map_err(ce)?;
        let (_, m, d) = hidden.dims3().map_err(ce)?;
        let data = hidden.flatten_all().and_then(|t| t.to_vec1::<f32>()).map_err(ce)?;
        Array2::from_shape_vec((m, d), data).map_err(|e| MftfError::shape(e.to_string()))
    }
}
