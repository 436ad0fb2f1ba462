//! The dual denoising loop.
//!
//! Source and target latents start from one Gaussian draw. At each controlled
//! step the source pass runs first with captures, masks are rebuilt from that
//! step's cross-attention maps, every self-attention layer in the window gets
//! an edited query, and the target pass runs with those queries injected.
//! Uncontrolled steps denoise both trajectories plainly.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt;
use std::time::Instant;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attn_tap::TapPlan;
use crate::backend::{denoise_step, DenoiserBackend, PreparedPrompt, StepOutput};
use crate::error::{MftfError, Result};
use crate::layout::{edit_query_multi, QueryEdit};
use crate::masking::{soft_mask, threshold};
use crate::model::{
    AttentionKind, AttentionRecord, BackendInfo, Branch, GridShape, Image, LayerInfo, LayoutParams,
    Latent, MaskGrid, QueryTensor, RunConfig,
};
use crate::schedule::DdimSchedule;

/// Which trajectory a pass belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pass {
    Source,
    Target,
}

/// Hooks for dumping intermediate state. Every method defaults to a no-op.
pub trait RunObserver {
    fn on_records(&mut self, _step: usize, _pass: Pass, _records: &[AttentionRecord]) -> Result<()> {
        Ok(())
    }

    /// Masks of one step at the finest controlled resolution, one per object.
    fn on_masks(&mut self, _step: usize, _masks: &[StepMask]) -> Result<()> {
        Ok(())
    }

    /// `masks` are the object masks at this layer's resolution.
    fn on_edit(
        &mut self,
        _step: usize,
        _layer: &LayerInfo,
        _branch: Branch,
        _masks: &[MaskGrid],
        _before: &QueryTensor,
        _after: &QueryTensor,
    ) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

#[derive(Clone, Debug, Serialize)]
pub struct StepMask {
    pub token_index: usize,
    pub eta: f64,
    pub dropped: bool,
    pub source_layers: Vec<usize>,
    #[serde(skip)]
    pub mask: MaskGrid,
    pub cells: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectEditSummary {
    pub token_index: usize,
    pub mask_cells: usize,
    pub centroid: Option<(f64, f64)>,
    pub dx: f64,
    pub dy: f64,
    pub noop: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerEdit {
    pub layer: usize,
    pub ordinal: usize,
    pub grid: GridShape,
    pub branches: Vec<Branch>,
    pub objects: Vec<ObjectEditSummary>,
    pub destinations: usize,
    pub vacated: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct StepTrace {
    pub step: usize,
    pub timestep: usize,
    pub controlled: bool,
    pub source_ms: f64,
    pub target_ms: f64,
    pub edit_ms: f64,
    pub masks: Vec<StepMask>,
    pub edits: Vec<LayerEdit>,
    /// `(layer, branch)` pairs where the target used an injected query.
    pub injected: Vec<(usize, Branch)>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct RunTrace {
    pub backend: String,
    pub weights_checksum: String,
    pub seed: u64,
    pub total_steps: usize,
    pub t_star: usize,
    pub window_layers: Vec<usize>,
    pub mask_layers: Vec<usize>,
    pub steps: Vec<StepTrace>,
    pub warnings: Vec<String>,
    pub total_ms: f64,
}

impl RunTrace {
    /// Steps at which at least one injection happened.
    pub fn controlled_steps(&self) -> Vec<usize> {
        self.steps
            .iter()
            .filter(|s| !s.injected.is_empty())
            .map(|s| s.step)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub image_s: Image,
    pub image_t: Image,
    pub latent_s: Latent,
    pub latent_t: Latent,
    pub trace: RunTrace,
}

/// A failed run with everything traced up to the failure.
#[derive(Debug)]
pub struct RunError {
    pub error: MftfError,
    pub trace: RunTrace,
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} steps)", self.error, self.trace.steps.len())
    }
}

impl std::error::Error for RunError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<MftfError> for RunError {
    fn from(error: MftfError) -> Self {
        Self {
            error,
            trace: RunTrace::default(),
        }
    }
}

/// Standard-normal latent drawn from `seed`.
pub fn initial_latent(shape: [usize; 3], seed: u64) -> Latent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn((shape[0], shape[1], shape[2]), || StandardNormal.sample(&mut rng))
}

/// Layers the run touches, resolved once from the config.
struct Plan<'a> {
    window: Vec<&'a LayerInfo>,
    mask_layers: Vec<usize>,
    finest: GridShape,
}

fn resolve_layers<'a>(info: &'a BackendInfo, cfg: &RunConfig) -> Result<Plan<'a>> {
    let win = cfg.window(info);
    let window: Vec<&LayerInfo> = info
        .layers_of(AttentionKind::SelfAttention)
        .filter(|l| win.contains(l.ordinal))
        .collect();
    let mask_layers: Vec<usize> = match &cfg.mask_layers {
        Some(ords) => ords
            .iter()
            .map(|&o| info.by_ordinal(AttentionKind::Cross, o).map(|l| l.index))
            .collect::<Result<_>>()?,
        None => info.layers_of(AttentionKind::Cross).map(|l| l.index).collect(),
    };
    if mask_layers.is_empty() {
        return Err(MftfError::config("backend exposes no cross-attention layers"));
    }
    let finest = window
        .iter()
        .map(|l| l.grid)
        .max_by_key(|g| g.cells())
        .unwrap_or_else(|| info.latent_grid());
    Ok(Plan {
        window,
        mask_layers,
        finest,
    })
}

/// Run source and target trajectories with layout control.
///
/// `layouts` index tokens of the source prompt.
#[allow(clippy::result_large_err)]
pub fn run_mftf(
    backend: &dyn DenoiserBackend,
    source: &PreparedPrompt,
    target: &PreparedPrompt,
    layouts: &[LayoutParams],
    cfg: &RunConfig,
    observer: &mut dyn RunObserver,
) -> std::result::Result<RunOutput, RunError> {
    let started = Instant::now();
    let info = backend.info();
    cfg.validate(info)?;
    for p in layouts {
        p.validate()?;
        if p.token_index >= source.spec.len() {
            return Err(MftfError::Index(format!(
                "layout token index {} out of range for source prompt of {} tokens",
                p.token_index,
                source.spec.len()
            ))
            .into());
        }
    }
    if layouts.is_empty() && cfg.t_star > 0 {
        return Err(MftfError::config("layout control requested without any objects").into());
    }
    let plan = resolve_layers(info, cfg)?;
    let schedule = DdimSchedule::new(cfg.total_steps)?;

    let mut trace = RunTrace {
        backend: info.name.clone(),
        weights_checksum: backend.weights_checksum(),
        seed: cfg.seed,
        total_steps: cfg.total_steps,
        t_star: cfg.t_star,
        window_layers: plan.window.iter().map(|l| l.index).collect(),
        mask_layers: plan.mask_layers.clone(),
        warnings: source.warnings.iter().chain(&target.warnings).cloned().collect(),
        ..RunTrace::default()
    };

    let z0 = initial_latent(info.latent_shape, cfg.seed);
    let mut z_s = z0.clone();
    let mut z_t = z0;
    for (step, &t) in schedule.timesteps().iter().enumerate() {
        let result = if cfg.is_controlled(step) {
            controlled_step(
                backend, source, target, layouts, cfg, &plan, &schedule, step, t, &mut z_s, &mut z_t,
                observer,
            )
        } else {
            plain_step(backend, source, target, cfg, &schedule, step, t, &mut z_s, &mut z_t)
        };
        match result {
            Ok(st) => trace.steps.push(st),
            Err(error) => {
                trace.total_ms = ms(started);
                return Err(RunError { error, trace });
            }
        }
    }

    let decode = |z: &Latent| backend.codec().decode(z);
    let images = decode(&z_s).and_then(|s| decode(&z_t).map(|t| (s, t)));
    trace.total_ms = ms(started);
    match images {
        Ok((image_s, image_t)) => Ok(RunOutput {
            image_s,
            image_t,
            latent_s: z_s,
            latent_t: z_t,
            trace,
        }),
        Err(error) => Err(RunError { error, trace }),
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

#[allow(clippy::too_many_arguments)]
fn plain_step(
    backend: &dyn DenoiserBackend,
    source: &PreparedPrompt,
    target: &PreparedPrompt,
    cfg: &RunConfig,
    schedule: &DdimSchedule,
    step: usize,
    t: usize,
    z_s: &mut Latent,
    z_t: &mut Latent,
) -> Result<StepTrace> {
    let tap = TapPlan::at_step(step);
    let clock = Instant::now();
    let out = denoise_step(backend, z_s, t, source, cfg.guidance_scale, &tap)?;
    *z_s = schedule.step(z_s, &out.epsilon, t)?;
    let source_ms = ms(clock);
    let clock = Instant::now();
    let out = denoise_step(backend, z_t, t, target, cfg.guidance_scale, &tap)?;
    *z_t = schedule.step(z_t, &out.epsilon, t)?;
    Ok(StepTrace {
        step,
        timestep: t,
        controlled: false,
        source_ms,
        target_ms: ms(clock),
        edit_ms: 0.0,
        masks: Vec::new(),
        edits: Vec::new(),
        injected: Vec::new(),
    })
}

#[allow(clippy::too_many_arguments)]
fn controlled_step(
    backend: &dyn DenoiserBackend,
    source: &PreparedPrompt,
    target: &PreparedPrompt,
    layouts: &[LayoutParams],
    cfg: &RunConfig,
    plan: &Plan<'_>,
    schedule: &DdimSchedule,
    step: usize,
    t: usize,
    z_s: &mut Latent,
    z_t: &mut Latent,
    observer: &mut dyn RunObserver,
) -> Result<StepTrace> {
    let info = backend.info();
    let window_ids = plan.window.iter().map(|l| l.index);
    let tap = TapPlan::at_step(step)
        .capture_cross(plan.mask_layers.iter().copied())
        .capture_self(window_ids);
    let clock = Instant::now();
    let StepOutput { epsilon, taps } = denoise_step(backend, z_s, t, source, cfg.guidance_scale, &tap)?;
    *z_s = schedule.step(z_s, &epsilon, t)?;
    let source_ms = ms(clock);
    observer.on_records(step, Pass::Source, &taps.records)?;

    let clock = Instant::now();
    let (cross, selfq): (Vec<_>, Vec<_>) = taps
        .records
        .into_iter()
        .partition(|r| r.site.kind == AttentionKind::Cross);
    let queries: HashMap<(usize, Branch), QueryTensor> = selfq
        .into_iter()
        .filter_map(|r| {
            let key = (r.site.layer, r.branch);
            r.self_query_tensor().cloned().map(|q| (key, q))
        })
        .collect();

    // soft maps depend only on resolution, thresholds only on the object
    let mut soft_cache = HashMap::new();
    let mut masks_at = |grid: GridShape| -> Result<Vec<MaskGrid>> {
        layouts
            .iter()
            .map(|p| {
                let key = (grid, p.token_index);
                let soft = match soft_cache.entry(key) {
                    Entry::Occupied(e) => e.into_mut(),
                    Entry::Vacant(e) => e.insert(soft_mask(&cross, p.token_index, grid, info)?),
                };
                Ok(threshold(soft, p.token_index, plan.mask_layers[0], p.eta))
            })
            .collect()
    };

    let finest_masks = masks_at(plan.finest)?;
    let step_masks: Vec<StepMask> = layouts
        .iter()
        .zip(finest_masks)
        .map(|(p, mask)| StepMask {
            token_index: p.token_index,
            eta: p.eta,
            dropped: p.drop,
            source_layers: plan.mask_layers.clone(),
            cells: mask.count(),
            mask,
        })
        .collect();
    observer.on_masks(step, &step_masks)?;

    let branches: &[Branch] = if cfg.guidance_scale == 1.0 {
        &[Branch::Cond]
    } else {
        &[Branch::Uncond, Branch::Cond]
    };
    let mut target_tap = TapPlan::at_step(step);
    let mut edits = Vec::with_capacity(plan.window.len());
    for layer in &plan.window {
        let masks = masks_at(layer.grid)?;
        let objects: Vec<(MaskGrid, LayoutParams)> = masks
            .into_iter()
            .zip(layouts)
            .map(|(m, p)| (m, p.rescaled(plan.finest, layer.grid)))
            .collect();
        let mut last: Option<QueryEdit> = None;
        for &branch in branches {
            let q_s = queries.get(&(layer.index, branch)).ok_or_else(|| {
                MftfError::backend(format!(
                    "backend did not report the query of self-attention layer {}",
                    layer.index
                ))
            })?;
            let edit = edit_query_multi(q_s, &objects, cfg.fill)?;
            let layer_masks: Vec<MaskGrid> = objects.iter().map(|(m, _)| m.clone()).collect();
            observer.on_edit(step, layer, branch, &layer_masks, q_s, &edit.query)?;
            target_tap = target_tap.inject(layer.index, branch, edit.query.clone());
            last = Some(edit);
        }
        let edit = last.expect("at least one branch");
        edits.push(LayerEdit {
            layer: layer.index,
            ordinal: layer.ordinal,
            grid: layer.grid,
            branches: branches.to_vec(),
            objects: objects
                .iter()
                .enumerate()
                .map(|(k, (m, p))| ObjectEditSummary {
                    token_index: p.token_index,
                    mask_cells: m.count(),
                    centroid: m.centroid(),
                    dx: p.dx,
                    dy: p.dy,
                    noop: edit.noops.contains(&k),
                })
                .collect(),
            destinations: edit.destinations.len(),
            vacated: edit.vacated.len(),
        });
    }
    let edit_ms = ms(clock);

    let clock = Instant::now();
    let out = denoise_step(backend, z_t, t, target, cfg.guidance_scale, &target_tap)?;
    *z_t = schedule.step(z_t, &out.epsilon, t)?;
    observer.on_records(step, Pass::Target, &out.taps.records)?;
    Ok(StepTrace {
        step,
        timestep: t,
        controlled: true,
        source_ms,
        target_ms: ms(clock),
        edit_ms,
        masks: step_masks,
        edits,
        injected: out.taps.injected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::prepare_prompt;
    use crate::toy::build_toy_backend;

    fn quick_cfg(t_star: usize) -> RunConfig {
        RunConfig {
            total_steps: 6,
            t_star,
            ..RunConfig::default()
        }
    }

    #[test]
    fn identity_run_reproduces_source() {
        let b = build_toy_backend(0, &[(8, 8), (4, 4)], 16).unwrap();
        let p = prepare_prompt(&b, "a cat sitting on a chair").unwrap();
        let cat = p.spec.find_token("cat").unwrap();
        let out = run_mftf(&b, &p, &p, &[LayoutParams::identity(cat)], &quick_cfg(3), &mut ()).unwrap();
        assert_eq!(out.image_s, out.image_t);
        assert_eq!(out.trace.controlled_steps(), vec![0, 1, 2]);
    }

    #[test]
    fn translation_changes_target_only() {
        let b = build_toy_backend(0, &[(8, 8), (4, 4)], 16).unwrap();
        let p = prepare_prompt(&b, "a cat sitting on a chair").unwrap();
        let cat = p.spec.find_token("cat").unwrap();
        let moved = [LayoutParams::translate(cat, 2.0, 1.0)];
        let a = run_mftf(&b, &p, &p, &moved, &quick_cfg(3), &mut ()).unwrap();
        let plain = run_mftf(&b, &p, &p, &[LayoutParams::identity(cat)], &quick_cfg(0), &mut ()).unwrap();
        assert_eq!(a.image_s, plain.image_s);
        assert_ne!(a.image_t, a.image_s);
    }

    #[test]
    fn bad_token_index_is_rejected_before_running() {
        let b = build_toy_backend(0, &[(4, 4)], 8).unwrap();
        let p = prepare_prompt(&b, "a cat").unwrap();
        let err = run_mftf(&b, &p, &p, &[LayoutParams::identity(9)], &quick_cfg(1), &mut ()).unwrap_err();
        assert!(matches!(err.error, MftfError::Index(_)));
        assert!(err.trace.steps.is_empty());
    }
}
