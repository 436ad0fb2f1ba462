//! Behavioural checks every [`DenoiserBackend`] must pass.
//!
//! Backends are only usable by the pipeline if their tap surface behaves:
//! captures must not perturb the forward pass, injecting a layer's own query
//! must be a no-op, and an injection may only affect layers downstream of it.

use ndarray::Array3;

use crate::attn_tap::{checksum, TapPlan, TapSession};
use crate::backend::{denoise_step, prepare_prompt, DenoiserBackend};
use crate::model::{AttentionKind, Branch, LayoutParams, RunConfig};
use crate::pipeline::{initial_latent, run_mftf};

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub outcome: Result<String, String>,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.outcome.is_ok()
    }
}

type Outcome = Result<String, String>;

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Run every check on `backend` with `prompt`, which must contain `object`.
///
/// `steps` bounds the end-to-end identity run.
pub fn check_backend(backend: &dyn DenoiserBackend, prompt: &str, object: &str, steps: usize) -> Vec<Check> {
    vec![
        Check {
            name: "determinism",
            outcome: determinism(backend, prompt),
        },
        Check {
            name: "finite noise prediction",
            outcome: finite(backend, prompt),
        },
        Check {
            name: "capture non-intrusion",
            outcome: non_intrusion(backend, prompt),
        },
        Check {
            name: "single cross capture",
            outcome: single_capture(backend, prompt),
        },
        Check {
            name: "identity injection",
            outcome: identity_injection(backend, prompt),
        },
        Check {
            name: "injection locality",
            outcome: locality(backend, prompt).map(|v| format!("{} layers checked", v.len())),
        },
        Check {
            name: "unit guidance is conditional",
            outcome: unit_guidance(backend, prompt),
        },
        Check {
            name: "end-to-end identity",
            outcome: end_to_end_identity(backend, prompt, object, steps),
        },
    ]
}

fn latent(backend: &dyn DenoiserBackend, seed: u64) -> Array3<f32> {
    initial_latent(backend.info().latent_shape, seed)
}

/// Middle-of-schedule timestep used by the probes.
const T: usize = 500;

fn determinism(b: &dyn DenoiserBackend, prompt: &str) -> Outcome {
    let p = prepare_prompt(b, prompt).map_err(fail)?;
    let z = latent(b, 1);
    let plan = TapPlan::default();
    let a = denoise_step(b, &z, T, &p, 7.5, &plan).map_err(fail)?;
    let c = denoise_step(b, &z, T, &p, 7.5, &plan).map_err(fail)?;
    if a.epsilon != c.epsilon {
        return Err("two identical calls disagree".into());
    }
    if !a.taps.records.is_empty() {
        return Err("untapped step produced records".into());
    }
    Ok("bitwise equal".into())
}

fn finite(b: &dyn DenoiserBackend, prompt: &str) -> Outcome {
    let p = prepare_prompt(b, prompt).map_err(fail)?;
    let [c, h, w] = b.info().latent_shape;
    for z in [Array3::zeros((c, h, w)), latent(b, 2)] {
        let out = denoise_step(b, &z, T, &p, 7.5, &TapPlan::default()).map_err(fail)?;
        if out.epsilon.iter().any(|v| !v.is_finite()) {
            return Err("non-finite noise prediction".into());
        }
    }
    Ok("zeros and gaussian latents".into())
}

fn all_captures(b: &dyn DenoiserBackend) -> TapPlan {
    let info = b.info();
    TapPlan::at_step(0)
        .capture_cross(info.layers_of(AttentionKind::Cross).map(|l| l.index))
        .capture_self(info.layers_of(AttentionKind::SelfAttention).map(|l| l.index))
}

fn non_intrusion(b: &dyn DenoiserBackend, prompt: &str) -> Outcome {
    let p = prepare_prompt(b, prompt).map_err(fail)?;
    let z = latent(b, 3);
    let plain = denoise_step(b, &z, T, &p, 7.5, &TapPlan::default()).map_err(fail)?;
    let tapped = denoise_step(b, &z, T, &p, 7.5, &all_captures(b)).map_err(fail)?;
    if plain.epsilon != tapped.epsilon {
        return Err("captures changed the noise prediction".into());
    }
    Ok(format!("{} records captured", tapped.taps.records.len()))
}

fn single_capture(b: &dyn DenoiserBackend, prompt: &str) -> Outcome {
    let p = prepare_prompt(b, prompt).map_err(fail)?;
    let layer = b
        .info()
        .layers_of(AttentionKind::Cross)
        .last()
        .ok_or("no cross-attention layers")?
        .clone();
    let plan = TapPlan::at_step(0).capture_cross([layer.index]);
    let out = denoise_step(b, &latent(b, 4), T, &p, 7.5, &plan).map_err(fail)?;
    let [r] = out.taps.records.as_slice() else {
        return Err(format!("expected one record, got {}", out.taps.records.len()));
    };
    if r.site.layer != layer.index || r.site.kind != AttentionKind::Cross {
        return Err(format!("record addressed {:?}", r.site));
    }
    let map = r.cross_map().ok_or("record holds no cross map")?;
    let want = [layer.heads, layer.grid.cells(), p.spec.len()];
    let m = map.shape()[2];
    if map.shape()[..2] != want[..2] || m < p.spec.len() {
        return Err(format!("cross map shape {:?}, expected {want:?}", map.shape()));
    }
    let worst = map
        .rows()
        .into_iter()
        .map(|row| (row.sum() - 1.0).abs())
        .fold(0.0f32, f32::max);
    if worst > 1e-5 {
        return Err(format!("cross map row sums off by {worst}"));
    }
    Ok(format!("layer {}, max row-sum error {worst:.1e}", layer.index))
}

fn identity_injection(b: &dyn DenoiserBackend, prompt: &str) -> Outcome {
    let p = prepare_prompt(b, prompt).map_err(fail)?;
    let z = latent(b, 5);
    let captured = denoise_step(b, &z, T, &p, 7.5, &all_captures(b)).map_err(fail)?;
    let mut plan = TapPlan::at_step(0);
    for r in &captured.taps.records {
        if let Some(q) = r.self_query_tensor() {
            plan = plan.inject(r.site.layer, r.branch, q.clone());
        }
    }
    let injected = denoise_step(b, &z, T, &p, 7.5, &plan).map_err(fail)?;
    if injected.taps.injected.len() != plan.inject_q.len() {
        return Err("not every planned injection was applied".into());
    }
    if injected.epsilon != captured.epsilon {
        return Err("injecting the computed queries changed the output".into());
    }
    Ok(format!("{} injections", plan.inject_q.len()))
}

/// For every self-attention layer: inject a perturbed query and compare
/// per-layer activation checksums with the unperturbed pass. Returns the
/// checked layers.
pub fn locality(b: &dyn DenoiserBackend, prompt: &str) -> Result<Vec<usize>, String> {
    let p = prepare_prompt(b, prompt).map_err(fail)?;
    let info = b.info();
    let z = latent(b, 6);
    let base_plan = all_captures(b).with_probe();
    let mut base = TapSession::new(&base_plan, Branch::Cond);
    let eps = b.predict_noise(&z, T, &p.cond, &mut base).map_err(fail)?;
    let base = base.finish();
    let base_eps = checksum(eps.iter());
    let mut checked = Vec::new();
    for layer in info.layers_of(AttentionKind::SelfAttention) {
        let q = base
            .records
            .iter()
            .find(|r| r.site.layer == layer.index)
            .and_then(|r| r.self_query_tensor())
            .ok_or_else(|| format!("layer {} query not captured", layer.index))?;
        let perturbed = q.mapv(|v| -v + 0.25);
        let plan = TapPlan::at_step(0)
            .inject(layer.index, Branch::Cond, perturbed)
            .with_probe();
        let mut s = TapSession::new(&plan, Branch::Cond);
        let eps = b.predict_noise(&z, T, &p.cond, &mut s).map_err(fail)?;
        let out = s.finish();
        if out.checksums.len() != base.checksums.len() {
            return Err("backend reported a different number of activations".into());
        }
        for (x, y) in base.checksums.iter().zip(&out.checksums) {
            if x.layer < layer.index && x.checksum != y.checksum {
                return Err(format!(
                    "injection at layer {} changed upstream layer {}",
                    layer.index, x.layer
                ));
            }
            if x.layer == layer.index && x.checksum == y.checksum {
                return Err(format!("injection at layer {} had no effect on it", layer.index));
            }
        }
        if checksum(eps.iter()) == base_eps {
            return Err(format!("injection at layer {} left epsilon unchanged", layer.index));
        }
        checked.push(layer.index);
    }
    Ok(checked)
}

fn unit_guidance(b: &dyn DenoiserBackend, prompt: &str) -> Outcome {
    let p = prepare_prompt(b, prompt).map_err(fail)?;
    let z = latent(b, 7);
    let plan = TapPlan::default();
    let guided = denoise_step(b, &z, T, &p, 1.0, &plan).map_err(fail)?;
    let mut s = TapSession::new(&plan, Branch::Cond);
    let cond = b.predict_noise(&z, T, &p.cond, &mut s).map_err(fail)?;
    if guided.epsilon != cond {
        return Err("guidance 1 differs from the conditional prediction".into());
    }
    Ok("bitwise equal".into())
}

fn end_to_end_identity(b: &dyn DenoiserBackend, prompt: &str, object: &str, steps: usize) -> Outcome {
    let p = prepare_prompt(b, prompt).map_err(fail)?;
    let tok = p.spec.find_token(object).map_err(fail)?;
    let cfg = RunConfig {
        total_steps: steps,
        t_star: steps.div_ceil(2),
        ..RunConfig::default()
    };
    let out = run_mftf(b, &p, &p, &[LayoutParams::identity(tok)], &cfg, &mut ()).map_err(|e| e.to_string())?;
    if out.image_s != out.image_t {
        return Err("identity edit changed the target image".into());
    }
    Ok(format!("{} controlled steps", out.trace.controlled_steps().len()))
}
