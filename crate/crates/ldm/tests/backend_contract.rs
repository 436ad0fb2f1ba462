use candle_core::{DType, Device};
use candle_nn::{VarBuilder, VarMap};
use mftf_core::conformance::check_backend;
use mftf_core::{AttentionKind, DenoiserBackend, GridShape};
use mftf_ldm::{LdmBackend, UNet, UNetConfig};
use ndarray::Array3;

#[test]
fn tiny_model_passes_contract() {
    let b = LdmBackend::tiny(3).unwrap();
    let checks = check_backend(&b, "a cat sitting on a chair", "cat", 4);
    for c in &checks {
        println!("{:<32} {:?}", c.name, c.outcome);
    }
    assert!(checks.iter().all(|c| c.passed()));
}

#[test]
fn tiny_layers_follow_forward_order() {
    let b = LdmBackend::tiny(0).unwrap();
    let info = b.info();
    assert_eq!(info.layer_count(), 14);
    let grids: Vec<usize> = info.layers_of(AttentionKind::SelfAttention).map(|l| l.grid.h).collect();
    assert_eq!(grids, [16, 8, 4, 8, 8, 16, 16]);
    for pair in info.layers.chunks(2) {
        assert_eq!(pair[0].kind, AttentionKind::SelfAttention);
        assert_eq!(pair[1].kind, AttentionKind::Cross);
        assert_eq!(pair[0].grid, pair[1].grid);
    }
}

#[test]
fn sd_shaped_unet_has_sixteen_self_and_cross_layers() {
    let mut cfg = UNetConfig::sd15();
    for (b, c) in cfg.blocks.iter_mut().zip([32, 64, 64, 64]) {
        b.channels = c;
    }
    cfg.norm_groups = 8;
    cfg.cross_attention_dim = 16;
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
    let (_, layers) = UNet::new(vb, &cfg, GridShape::new(64, 64)).unwrap();
    let self_grids: Vec<usize> = layers
        .iter()
        .filter(|l| l.0 == AttentionKind::SelfAttention)
        .map(|l| l.1.h)
        .collect();
    assert_eq!(self_grids, [64, 64, 32, 32, 16, 16, 8, 16, 16, 16, 32, 32, 32, 64, 64, 64]);
    assert_eq!(layers.iter().filter(|l| l.0 == AttentionKind::Cross).count(), 16);
    assert!(layers.iter().all(|l| l.2 == 8));
}

#[test]
fn weights_checksum_follows_seed() {
    let a = LdmBackend::tiny(1).unwrap();
    let b = LdmBackend::tiny(1).unwrap();
    let c = LdmBackend::tiny(2).unwrap();
    assert_eq!(a.weights_checksum(), b.weights_checksum());
    assert_ne!(a.weights_checksum(), c.weights_checksum());
}

#[test]
fn prompts_are_padded_to_context_length() {
    let b = LdmBackend::tiny(0).unwrap();
    let t = b.tokenize("a cat sitting on a chair").unwrap();
    assert_eq!(t.ids.len(), 16);
    assert_eq!(&t.strings[..8], ["<start>", "a", "cat", "sitting", "on", "a", "chair", "<end>"]);
    assert!(t.strings[8..].iter().all(|s| s == "<end>"));
    assert!(t.warnings.is_empty());

    let long = vec!["cat"; 20].join(" ");
    let t = b.tokenize(&long).unwrap();
    assert_eq!(t.ids.len(), 16);
    assert_eq!(t.strings[15], "<end>");
    assert_eq!(t.warnings.len(), 1);
}

#[test]
fn codec_maps_images_to_latents_and_back() {
    let b = LdmBackend::tiny(0).unwrap();
    let img = Array3::from_shape_fn((3, 32, 32), |(c, y, x)| ((c + y + x) % 7) as f32 / 6.0);
    let z = b.codec().encode(&img).unwrap();
    assert_eq!(z.shape(), [4, 16, 16]);
    assert_eq!(z, b.codec().encode(&img).unwrap());
    let back = b.codec().decode(&z).unwrap();
    assert_eq!(back.shape(), [3, 32, 32]);
    assert!(back.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(b.codec().encode(&Array3::zeros((3, 31, 32))).is_err());
}
