use mftf_core::export::TraceWriter;
use mftf_core::pipeline::initial_latent;
use mftf_core::{
    build_toy_backend, prepare_prompt, run_mftf, DenoiserBackend, FillPolicy, LayerWindow, LayoutParams,
    RunConfig, ToyBackend,
};

fn backend() -> ToyBackend {
    build_toy_backend(0, &[(8, 8), (4, 4)], 16).unwrap()
}

fn cfg(t: usize, t_star: usize) -> RunConfig {
    RunConfig {
        total_steps: t,
        t_star,
        seed: 7,
        ..RunConfig::default()
    }
}

#[test]
fn source_trajectory_ignores_the_target() {
    let b = backend();
    let src = prepare_prompt(&b, "a cat sitting on a chair").unwrap();
    let tgt = prepare_prompt(&b, "a dog sitting on a chair").unwrap();
    let cat = src.spec.find_token("cat").unwrap();
    let edited = run_mftf(&b, &src, &tgt, &[LayoutParams::translate(cat, -2.0, 1.0)], &cfg(8, 4), &mut ()).unwrap();
    let plain = run_mftf(&b, &src, &src, &[LayoutParams::identity(cat)], &cfg(8, 0), &mut ()).unwrap();
    assert_eq!(edited.latent_s, plain.latent_s);
    assert_ne!(edited.latent_t, edited.latent_s);
}

#[test]
fn runs_are_deterministic_and_seeded() {
    let b = backend();
    let p = prepare_prompt(&b, "a cat sitting on a chair").unwrap();
    let cat = p.spec.find_token("cat").unwrap();
    let layouts = [LayoutParams::translate(cat, 1.0, 0.0)];
    let a = run_mftf(&b, &p, &p, &layouts, &cfg(6, 3), &mut ()).unwrap();
    let c = run_mftf(&b, &p, &p, &layouts, &cfg(6, 3), &mut ()).unwrap();
    assert_eq!(a.image_t, c.image_t);
    let mut other = cfg(6, 3);
    other.seed = 8;
    let d = run_mftf(&b, &p, &p, &layouts, &other, &mut ()).unwrap();
    assert_ne!(a.image_t, d.image_t);
}

#[test]
fn shared_initial_noise() {
    let b = backend();
    let z = initial_latent(b.info().latent_shape, 3);
    assert_eq!(z, initial_latent(b.info().latent_shape, 3));
    assert_eq!(z.shape(), [12, 8, 8]);
}

#[test]
fn zero_cutoff_performs_no_edits() {
    let b = backend();
    let p = prepare_prompt(&b, "a cat sitting on a chair").unwrap();
    let cat = p.spec.find_token("cat").unwrap();
    let out = run_mftf(&b, &p, &p, &[LayoutParams::translate(cat, 2.0, 2.0)], &cfg(5, 0), &mut ()).unwrap();
    assert!(out.trace.controlled_steps().is_empty());
    assert!(out.trace.steps.iter().all(|s| s.edits.is_empty()));
    assert_eq!(out.image_s, out.image_t);
}

#[test]
fn operating_point_edits_the_first_fifteen_steps_on_every_window_layer() {
    let b = backend();
    let p = prepare_prompt(&b, "a cat sitting on a chair").unwrap();
    let cat = p.spec.find_token("cat").unwrap();
    let run = RunConfig {
        layer_window: Some(LayerWindow::new(0, 3)),
        ..cfg(30, 15)
    };
    let out = run_mftf(&b, &p, &p, &[LayoutParams::translate(cat, 2.0, 0.0)], &run, &mut ()).unwrap();
    assert_eq!(out.trace.controlled_steps(), (0..15).collect::<Vec<_>>());
    for s in &out.trace.steps[..15] {
        let layers: Vec<usize> = s.edits.iter().map(|e| e.layer).collect();
        assert_eq!(layers, vec![0, 2, 4, 6]);
        assert_eq!(s.injected.len(), 8, "both guidance branches");
    }
}

#[test]
fn layer_window_restricts_injection() {
    let b = backend();
    let p = prepare_prompt(&b, "a cat sitting on a chair").unwrap();
    let cat = p.spec.find_token("cat").unwrap();
    let run = RunConfig {
        layer_window: Some(LayerWindow::new(1, 2)),
        fill: FillPolicy::Zero,
        ..cfg(4, 2)
    };
    let out = run_mftf(&b, &p, &p, &[LayoutParams::translate(cat, 1.0, 0.0)], &run, &mut ()).unwrap();
    let layers: Vec<usize> = out.trace.steps[0].edits.iter().map(|e| e.layer).collect();
    assert_eq!(layers, vec![2, 4]);
    assert!(out.trace.steps[0].edits.iter().all(|e| e.grid.h == 4));
}

#[test]
fn invalid_configs_fail_fast() {
    let b = backend();
    let p = prepare_prompt(&b, "a cat").unwrap();
    let cat = p.spec.find_token("cat").unwrap();
    let l = [LayoutParams::identity(cat)];
    assert!(run_mftf(&b, &p, &p, &l, &cfg(10, 11), &mut ()).is_err());
    let bad_window = RunConfig {
        layer_window: Some(LayerWindow::new(0, 4)),
        ..cfg(4, 2)
    };
    assert!(run_mftf(&b, &p, &p, &l, &bad_window, &mut ()).unwrap_err().error.is_config());
    assert!(run_mftf(&b, &p, &p, &[], &cfg(4, 2), &mut ()).is_err());
}

#[test]
fn trace_writer_emits_masks_and_heatmaps() {
    let b = backend();
    let p = prepare_prompt(&b, "a cat sitting on a chair").unwrap();
    let cat = p.spec.find_token("cat").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut w = TraceWriter::new(dir.path(), true).unwrap();
    run_mftf(&b, &p, &p, &[LayoutParams::translate(cat, 1.0, 0.0)], &cfg(4, 2), &mut w).unwrap();
    w.finish().unwrap();
    let masks = std::fs::read_dir(dir.path().join("masks")).unwrap().count();
    assert_eq!(masks, 2 * 2, "png and sidecar for each of two steps");
    assert!(dir.path().join("qnorm/step000_l00_before.png").exists());
    assert!(dir.path().join("tensors/index.json").exists());
    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("masks/step001_obj0_tok2.json")).unwrap()).unwrap();
    assert_eq!(sidecar["step"], 1);
    assert_eq!(sidecar["token_index"], 2);
}
