use std::sync::Arc;

use spg_core::attention::{apply_hooks, extract_style_features, AttentionHookPlan, LayerSelection, OperandProbe};
use spg_core::backbone::{Backbone, DenoiserProfile, LatentDenoiser, LayerNumbering};
use spg_core::oracle::{OracleBackbone, OracleBranches};
use spg_core::schedule::ScheduleSpec;
use spg_core::tensor::{gaussian_latent, Latent};
use spg_core::SpgError;

fn oracle() -> OracleBackbone {
    let s = ScheduleSpec::default().build().unwrap();
    OracleBackbone::new(OracleBranches::planar(0.2).unwrap(), &s, 12).unwrap()
}

#[test]
fn second_plan_on_same_instance_conflicts() {
    let o = oracle();
    let sel = LayerSelection::new([1, 2]).unwrap();
    let first = apply_hooks(AttentionHookPlan::passthrough(sel.clone()), &o).unwrap();
    assert!(o.hook_slot().is_active());
    assert!(matches!(
        apply_hooks(AttentionHookPlan::passthrough(sel.clone()), &o),
        Err(SpgError::HookConflict(_))
    ));
    // A clone is a separate instance.
    let other = o.clone();
    assert!(apply_hooks(AttentionHookPlan::passthrough(sel.clone()), &other).is_ok());
    drop(first);
    assert!(!o.hook_slot().is_active());
    assert!(apply_hooks(AttentionHookPlan::passthrough(sel), &o).is_ok());
}

#[test]
fn failed_activation_leaves_slot_free() {
    let o = oracle();
    let bad = AttentionHookPlan::passthrough(LayerSelection::new([13]).unwrap());
    assert!(matches!(apply_hooks(bad, &o), Err(SpgError::Configuration(_))));
    let no_cache = AttentionHookPlan {
        cache: None,
        ..AttentionHookPlan::record(LayerSelection::new([1]).unwrap(), 0)
    };
    let mut replace = no_cache.clone();
    replace.mode = spg_core::attention::HookMode::Replace;
    assert!(apply_hooks(replace, &o).is_err());
    assert!(!o.hook_slot().is_active());
}

#[test]
fn replace_plan_validates_step_entries() {
    let o = oracle();
    let s = ScheduleSpec::default().with_steps(3).build().unwrap();
    let sel = LayerSelection::new([4, 5]).unwrap();
    let style = Latent::from_shape_vec((1, 1, 2), vec![0.0, 1.0]).unwrap();
    let cache = Arc::new(extract_style_features(&style, &s, &sel, &o.reference_view(), 0).unwrap());
    assert!(apply_hooks(AttentionHookPlan::replace(sel.clone(), Arc::clone(&cache), 2), &o).is_ok());
    assert!(matches!(
        apply_hooks(AttentionHookPlan::replace(sel, Arc::clone(&cache), 3), &o),
        Err(SpgError::CacheMiss { step: 3, layer: 4 })
    ));
    let wider = LayerSelection::new([4, 5, 6]).unwrap();
    assert!(matches!(
        apply_hooks(AttentionHookPlan::replace(wider, cache, 0), &o),
        Err(SpgError::CacheMiss { step: 0, layer: 6 })
    ));
}

#[test]
fn record_mode_captures_only_selected_layers() {
    let b = LatentDenoiser::synthetic(DenoiserProfile::sd15(), 1);
    let sel = LayerSelection::new([2, 9, 16]).unwrap();
    let z = gaussian_latent((4, 8, 8), 0);
    let c = b.encode_text("").unwrap();
    let mut h = apply_hooks(AttentionHookPlan::record(sel, 0), &b).unwrap();
    let eps_hooked = h.predict_noise(&z, 500, &c, None).unwrap();
    let rec = h.take_recorded();
    drop(h);
    assert_eq!(rec.keys().copied().collect::<Vec<_>>(), vec![2, 9, 16]);
    // Recording does not perturb the pass.
    assert_eq!(eps_hooked, b.predict_noise(&z, 500, &c, None, None).unwrap());
}

#[test]
fn denoiser_replace_touches_only_selected_layers() {
    let b = LatentDenoiser::synthetic(DenoiserProfile::sd15(), 1);
    let s = ScheduleSpec::default().with_steps(2).build().unwrap();
    let sel = LayerSelection::new([3, 12]).unwrap();
    let cache = Arc::new(extract_style_features(&gaussian_latent((4, 8, 8), 5), &s, &sel, &b, 1).unwrap());
    let z = gaussian_latent((4, 8, 8), 0);
    let c = b.encode_text("").unwrap();
    let t = s.timestep(1).unwrap();
    let mut plain = OperandProbe::default();
    b.forward(&z, t, &c, None, &mut plain).unwrap();
    let mut h = apply_hooks(AttentionHookPlan::replace(sel.clone(), cache, 1), &b).unwrap().with_probe();
    h.predict_noise(&z, t, &c, None).unwrap();
    let hooked = h.take_probe();
    for (a, p) in hooked.iter().zip(&plain.records) {
        if sel.contains(a.layer) {
            assert_ne!(a.v_hash, p.v_hash, "layer {}", a.layer);
        } else if a.layer < 3 {
            // Before the first replaced layer nothing can differ.
            assert_eq!(a, p);
        }
    }
}

#[test]
fn cross_attention_ids_are_not_hookable() {
    let b = LatentDenoiser::synthetic(DenoiserProfile::sd15(), 1).with_numbering(LayerNumbering::AllAttention);
    let cross = LayerSelection::new([2]).unwrap();
    assert!(matches!(
        apply_hooks(AttentionHookPlan::passthrough(cross), &b),
        Err(SpgError::Configuration(_))
    ));
    let selfs = b.default_selection().unwrap();
    assert!(apply_hooks(AttentionHookPlan::passthrough(selfs), &b).is_ok());
}
