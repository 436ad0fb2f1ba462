//! Object-level layout control for text-to-image diffusion without masks or
//! training.
//!
//! A source and a target trajectory are denoised in lockstep from the same
//! noise. During the first denoising steps the source pass exposes its
//! cross-attention maps, which are thresholded into per-object masks, and its
//! self-attention queries. The masked queries are moved by a per-object
//! affine edit and injected into the target pass, which then draws the same
//! objects at their new positions.
//!
//! ```no_run
//! use mftf_core::{build_toy_backend, prepare_prompt, run_mftf, LayoutParams, RunConfig};
//!
//! let backend = build_toy_backend(0, &[(8, 8), (4, 4)], 16)?;
//! let source = prepare_prompt(&backend, "a cat sitting on a chair")?;
//! let target = source.clone();
//! let cat = source.spec.find_token("cat")?;
//! let layouts = [LayoutParams::translate(cat, 2.0, 0.0)];
//! let out = run_mftf(&backend, &source, &target, &layouts, &RunConfig::default(), &mut ())
//!     .map_err(|e| e.error)?;
//! println!("{} controlled steps", out.trace.controlled_steps().len());
//! # Ok::<(), mftf_core::MftfError>(())
//! ```

pub mod attn_tap;
pub mod backend;
pub mod conformance;
pub mod error;
pub mod evaluation;
pub mod export;
pub mod job;
pub mod layout;
pub mod masking;
pub mod model;
pub mod pipeline;
pub mod schedule;
pub mod segmentation;
pub mod toy;

pub use attn_tap::{attention, ActivationChecksum, TapOutput, TapPlan, TapSession};
pub use backend::{
    denoise_step, prepare_prompt, DenoiserBackend, LatentCodec, PreparedPrompt, StepOutput, Tokenized,
};
pub use error::{MftfError, Result};
pub use layout::{build_affine, edit_query, edit_query_multi, AffineMap, QueryEdit};
pub use masking::{create_mask, resample_mask, union_masks};
pub use model::*;
pub use pipeline::{run_mftf, Pass, RunError, RunObserver, RunOutput, RunTrace, StepTrace};
pub use schedule::{ddim_step, DdimSchedule};
pub use segmentation::{segment, SegmentOptions, Segmentation};
pub use toy::{build_toy_backend, ToyBackend, ToyConfig};
