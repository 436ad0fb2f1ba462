//! Text-controlled segmentation of an existing image.
//!
//! The image is encoded and the latent is fed to the denoiser untouched, with
//! no noise added, at one mid-schedule timestep. Token masks come from the
//! captured cross-attention exactly as in generation.

use ndarray::{Array2, Zip};
use serde::Serialize;

use crate::attn_tap::{checksum, TapPlan};
use crate::backend::{denoise_step, DenoiserBackend, PreparedPrompt};
use crate::error::{MftfError, Result};
use crate::layout::query_norm_map;
use crate::masking::{resample_mask, soft_mask, threshold};
use crate::model::{AttentionKind, GridShape, Image, MaskGrid};
use crate::schedule::DdimSchedule;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentOptions {
    pub total_steps: usize,
    /// Index into the schedule; `total_steps / 2` when unset.
    pub step_index: Option<usize>,
    pub guidance_scale: f64,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self {
            total_steps: 30,
            step_index: None,
            guidance_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TokenSegment {
    pub token_index: usize,
    pub label: String,
    /// Mask at the finest cross-attention resolution.
    pub mask: MaskGrid,
    /// Mask at image resolution.
    pub mask_image: MaskGrid,
    /// Query magnitude inside the mask, normalized to `[0, 1]`.
    pub q_object: Array2<f32>,
    /// Query magnitude outside the mask, normalized to `[0, 1]`.
    pub q_background: Array2<f32>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SegmentTrace {
    pub timestep: usize,
    pub step_index: usize,
    /// L2 norm of the difference between the encoded and the denoised latent input.
    pub added_noise_norm: f64,
    pub latent_checksum: u64,
    pub query_layer: usize,
}

#[derive(Clone, Debug)]
pub struct Segmentation {
    pub segments: Vec<TokenSegment>,
    pub trace: SegmentTrace,
}

pub fn segment(
    backend: &dyn DenoiserBackend,
    image: &Image,
    prompt: &PreparedPrompt,
    tokens: &[usize],
    eta: f64,
    opts: &SegmentOptions,
) -> Result<Segmentation> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(MftfError::config(format!("eta {eta} outside [0, 1]")));
    }
    let info = backend.info();
    let [_, ih, iw] = [image.dim().0, image.dim().1, image.dim().2];
    if [ih, iw] != info.image_size || image.dim().0 != 3 {
        return Err(MftfError::shape(format!(
            "image is {}x{}x{}, backend expects 3x{}x{}",
            image.dim().0,
            ih,
            iw,
            info.image_size[0],
            info.image_size[1]
        )));
    }
    for &t in tokens {
        if t >= prompt.spec.len() {
            return Err(MftfError::Index(format!(
                "token index {t} out of range for prompt of {} tokens",
                prompt.spec.len()
            )));
        }
    }
    let schedule = DdimSchedule::new(opts.total_steps)?;
    let step_index = opts.step_index.unwrap_or(opts.total_steps / 2);
    let timestep = *schedule.timesteps().get(step_index).ok_or_else(|| {
        MftfError::config(format!(
            "segmentation step {step_index} outside {} steps",
            opts.total_steps
        ))
    })?;

    let encoded = backend.codec().encode(image)?;
    let z = encoded.clone();
    let added_noise_norm = Zip::from(&z)
        .and(&encoded)
        .fold(0.0f64, |acc, &a, &b| acc + f64::from(a - b).powi(2))
        .sqrt();

    let cross_layers: Vec<usize> = info.layers_of(AttentionKind::Cross).map(|l| l.index).collect();
    let q_layer = info
        .layers_of(AttentionKind::SelfAttention)
        .max_by_key(|l| (l.grid.cells(), std::cmp::Reverse(l.index)))
        .ok_or_else(|| MftfError::backend("backend has no self-attention layers"))?;
    let mask_grid = info
        .layers_of(AttentionKind::Cross)
        .map(|l| l.grid)
        .max_by_key(|g| g.cells())
        .ok_or_else(|| MftfError::backend("backend has no cross-attention layers"))?;
    let tap = TapPlan::at_step(step_index)
        .capture_cross(cross_layers.iter().copied())
        .capture_self([q_layer.index]);
    let out = denoise_step(backend, &z, timestep, prompt, opts.guidance_scale, &tap)?;

    let (cross, selfq): (Vec<_>, Vec<_>) = out
        .taps
        .records
        .into_iter()
        .partition(|r| r.site.kind == AttentionKind::Cross);
    let q = selfq
        .iter()
        .rev()
        .find_map(|r| r.self_query_tensor())
        .ok_or_else(|| MftfError::backend("no self-attention query was captured"))?;
    let qnorm = query_norm_map(q, q_layer.grid)?;
    let image_grid = GridShape::new(ih, iw);

    let mut segments = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let soft = soft_mask(&cross, t, mask_grid, info)?;
        let mask = threshold(&soft, t, cross_layers[0], eta);
        let mask_image = resample_mask(&mask, image_grid);
        let at_q = resample_mask(&mask, q_layer.grid);
        let (q_object, q_background) = split_by_mask(&qnorm, &at_q);
        segments.push(TokenSegment {
            token_index: t,
            label: prompt.spec.token_strings[t].clone(),
            mask,
            mask_image,
            q_object,
            q_background,
        });
    }
    Ok(Segmentation {
        segments,
        trace: SegmentTrace {
            timestep,
            step_index,
            added_noise_norm,
            latent_checksum: checksum(z.iter()),
            query_layer: q_layer.index,
        },
    })
}

fn split_by_mask(norm: &Array2<f32>, mask: &MaskGrid) -> (Array2<f32>, Array2<f32>) {
    let max = norm.iter().copied().fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let pick = |inside: bool| {
        Array2::from_shape_fn(norm.dim(), |(r, c)| {
            if mask.get(r, c) == inside {
                norm[[r, c]] * scale
            } else {
                0.0
            }
        })
    };
    (pick(true), pick(false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::prepare_prompt;
    use crate::toy::build_toy_backend;
    use ndarray::Array3;

    fn fixture() -> Image {
        Array3::from_shape_fn((3, 16, 16), |(c, y, x)| {
            let inside = (4..10).contains(&y) && (6..12).contains(&x);
            if inside {
                0.9 - 0.1 * c as f32
            } else {
                0.1 + 0.02 * x as f32
            }
        })
    }

    #[test]
    fn eta_zero_covers_the_image() {
        let b = build_toy_backend(0, &[(8, 8), (4, 4)], 16).unwrap();
        let p = prepare_prompt(&b, "a panda and a bird").unwrap();
        let panda = p.spec.find_token("panda").unwrap();
        let s = segment(&b, &fixture(), &p, &[panda], 0.0, &SegmentOptions::default()).unwrap();
        assert_eq!(s.segments[0].mask_image.count(), 256);
        assert_eq!(s.trace.added_noise_norm, 0.0);
        assert_eq!(s.trace.step_index, 15);
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let b = build_toy_backend(0, &[(8, 8), (4, 4)], 16).unwrap();
        let p = prepare_prompt(&b, "a panda").unwrap();
        let img = Array3::zeros((3, 8, 8));
        assert!(matches!(
            segment(&b, &img, &p, &[1], 0.2, &SegmentOptions::default()),
            Err(MftfError::Shape(_))
        ));
    }
}
