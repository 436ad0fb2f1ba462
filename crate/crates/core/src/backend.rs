//! Denoiser, text-encoder and latent-codec abstraction.

use crate::attn_tap::{TapOutput, TapPlan, TapSession};
use crate::error::{MftfError, Result};
use crate::model::{BackendInfo, Branch, Image, Latent, PromptSpec, TextEmbedding};

/// Aligned token ids and strings, special tokens included.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<u32>,
    pub strings: Vec<String>,
    /// Non-fatal notes such as truncation.
    pub warnings: Vec<String>,
}

pub trait LatentCodec {
    fn encode(&self, image: &Image) -> Result<Latent>;
    fn decode(&self, latent: &Latent) -> Result<Image>;
}

/// A noise-prediction network with an attention tap surface.
///
/// Implementations must be deterministic: identical inputs and identical tap
/// plans yield bitwise-identical outputs.
pub trait DenoiserBackend {
    fn info(&self) -> &BackendInfo;

    fn tokenize(&self, text: &str) -> Result<Tokenized>;

    /// Tokens of the empty prompt used by the unconditional branch.
    fn empty_prompt(&self) -> Result<Tokenized>;

    fn embed(&self, tokens: &Tokenized) -> Result<TextEmbedding>;

    /// One unguided noise prediction. Attention layers must report to `session`.
    fn predict_noise(
        &self,
        latent: &Latent,
        timestep: usize,
        text: &TextEmbedding,
        session: &mut TapSession<'_>,
    ) -> Result<Latent>;

    fn codec(&self) -> &dyn LatentCodec;

    /// Stable identifier of the loaded weights.
    fn weights_checksum(&self) -> String;
}

/// A prompt tokenized and embedded for both guidance branches.
#[derive(Clone, Debug)]
pub struct PreparedPrompt {
    pub spec: PromptSpec,
    pub cond: TextEmbedding,
    pub uncond: TextEmbedding,
    pub warnings: Vec<String>,
}

pub fn prepare_prompt(backend: &dyn DenoiserBackend, text: &str) -> Result<PreparedPrompt> {
    let info = backend.info();
    let tokens = backend.tokenize(text)?;
    let spec = PromptSpec::new(text, tokens.ids.clone(), tokens.strings.clone(), info.max_text_len)?;
    let cond = backend.embed(&tokens)?;
    let uncond = backend.embed(&backend.empty_prompt()?)?;
    for w in &tokens.warnings {
        log::warn!("{w}");
    }
    Ok(PreparedPrompt {
        spec,
        cond,
        uncond,
        warnings: tokens.warnings,
    })
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Guided noise prediction.
    pub epsilon: Latent,
    pub taps: TapOutput,
}

/// Classifier-free-guided noise prediction.
///
/// With `guidance_scale == 1` only the conditional branch runs and its
/// prediction is returned unchanged.
pub fn denoise_step(
    backend: &dyn DenoiserBackend,
    latent: &Latent,
    timestep: usize,
    prompt: &PreparedPrompt,
    guidance_scale: f64,
    plan: &TapPlan,
) -> Result<StepOutput> {
    let info = backend.info();
    if latent.shape() != info.latent_shape {
        return Err(MftfError::shape(format!(
            "latent shape {:?} does not match backend latent shape {:?}",
            latent.shape(),
            info.latent_shape
        )));
    }
    if !guidance_scale.is_finite() {
        return Err(MftfError::config("guidance_scale must be finite"));
    }
    plan.validate(info)?;

    let mut taps = TapOutput::default();
    if guidance_scale == 1.0 {
        let mut session = TapSession::new(plan, Branch::Cond);
        let epsilon = backend.predict_noise(latent, timestep, &prompt.cond, &mut session)?;
        taps.extend(session.finish());
        return Ok(StepOutput { epsilon, taps });
    }

    let mut session = TapSession::new(plan, Branch::Uncond);
    let eps_uncond = backend.predict_noise(latent, timestep, &prompt.uncond, &mut session)?;
    taps.extend(session.finish());
    let mut session = TapSession::new(plan, Branch::Cond);
    let eps_cond = backend.predict_noise(latent, timestep, &prompt.cond, &mut session)?;
    taps.extend(session.finish());

    let g = guidance_scale as f32;
    let mut epsilon = eps_uncond;
    epsilon.zip_mut_with(&eps_cond, |u, &c| *u += g * (c - *u));
    Ok(StepOutput { epsilon, taps })
}
