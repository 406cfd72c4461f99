use std::sync::Arc;

use spg_core::archive::Archive;
use spg_core::attention::{
    extract_style_features, extract_style_features_with, ExtractOptions, ExtractionMode, StyleFeatureCache,
};
use spg_core::backbone::{Backbone, DenoiserProfile, LatentDenoiser};
use spg_core::guidance::GuidanceWeights;
use spg_core::sampler::{sample, SamplerConfig, SamplerMode};
use spg_core::schedule::{forward_noise, ScheduleSpec};
use spg_core::tensor::{gaussian_latent, quantize_f32};
use spg_core::SpgError;

fn den() -> LatentDenoiser {
    LatentDenoiser::synthetic(DenoiserProfile::sd15(), 8)
}

#[test]
fn extraction_is_deterministic_and_complete() {
    let b = den();
    let s = ScheduleSpec::default().with_steps(5).build().unwrap();
    let sel = b.default_selection().unwrap();
    let style = gaussian_latent((4, 8, 8), 1);
    let a = extract_style_features(&style, &s, &sel, &b, 3).unwrap();
    let c = extract_style_features(&style, &s, &sel, &b, 3).unwrap();
    assert_eq!(a.len(), 5 * 6);
    assert_eq!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
    assert_eq!(a.manifest().timesteps, s.timesteps());
    assert_eq!(a.manifest().layer_ids, sel);
    let d = extract_style_features(&style, &s, &sel, &b, 4).unwrap();
    assert_ne!(a.digest().unwrap(), d.digest().unwrap());
}

#[test]
fn style_reference_follows_the_extraction_trajectory() {
    let b = den();
    let s = ScheduleSpec::default().with_steps(4).build().unwrap();
    let sel = b.default_selection().unwrap();
    let style = gaussian_latent((4, 8, 8), 1);
    let cache = extract_style_features(&style, &s, &sel, &b, 3).unwrap();
    let noise = gaussian_latent((4, 8, 8), 3);
    for step in 0..4 {
        let expect = forward_noise(&quantize_f32(&style), s.timestep(step).unwrap(), &noise, &s).unwrap();
        assert_eq!(cache.style_reference(step, &s).unwrap(), expect);
    }
}

#[test]
fn file_round_trip_and_missing_entry() {
    let b = den();
    let s = ScheduleSpec::default().with_steps(6).build().unwrap();
    let sel = b.default_selection().unwrap();
    let cache = extract_style_features(&gaussian_latent((4, 8, 8), 2), &s, &sel, &b, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("style.safetensors");
    cache.save(&path).unwrap();
    let back = StyleFeatureCache::load(&path).unwrap();
    assert_eq!(back, cache);

    // Drop one tensor pair from the file itself.
    let mut a = Archive::load(&path).unwrap();
    a.tensors.remove("t4/layer13/K");
    a.tensors.remove("t4/layer13/V");
    a.save(&path).unwrap();
    let broken = Arc::new(StyleFeatureCache::load(&path).unwrap());
    assert_eq!(broken.len(), cache.len() - 1);
    assert!(matches!(broken.check_complete(), Err(SpgError::CacheMiss { step: 4, layer: 13 })));

    let config = SamplerConfig {
        weights: GuidanceWeights::default(),
        selection: sel,
        schedule: s,
        seed: 0,
        mode: SamplerMode::SpgCfg,
        adain_enabled: true,
        adain_eps_floor: 1e-6,
        record_timings: false,
    };
    assert!(matches!(
        sample(&b, "a deer", Some(&broken), (4, 8, 8), &config),
        Err(SpgError::CacheMiss { step: 4, layer: 13 })
    ));
}

#[test]
fn corrupt_archives_are_rejected() {
    assert!(StyleFeatureCache::from_bytes(b"not a cache").is_err());
    let b = den();
    let s = ScheduleSpec::default().with_steps(2).build().unwrap();
    let sel = b.default_selection().unwrap();
    let cache = extract_style_features(&gaussian_latent((4, 8, 8), 2), &s, &sel, &b, 0).unwrap();
    let mut a = Archive::from_bytes(&cache.to_bytes().unwrap()).unwrap();
    let m = a.metadata.get_mut("manifest").unwrap();
    *m = m.replace("\"format_version\":1", "\"format_version\":99");
    assert!(matches!(
        StyleFeatureCache::from_bytes(&a.to_bytes().unwrap()),
        Err(SpgError::Format(_))
    ));
}

#[test]
fn inversion_mode_round_trips_with_trajectory() {
    let b = den();
    let s = ScheduleSpec::default().with_steps(5).build().unwrap();
    let sel = b.default_selection().unwrap();
    let opts = ExtractOptions {
        mode: ExtractionMode::DdimInversion,
        style_image_id: "blobs".into(),
    };
    let cache = extract_style_features_with(&gaussian_latent((4, 8, 8), 2), &s, &sel, &b, 0, &opts).unwrap();
    assert_eq!(cache.len(), 30);
    let back = StyleFeatureCache::from_bytes(&cache.to_bytes().unwrap()).unwrap();
    assert_eq!(back, cache);
    assert_eq!(back.manifest().style_image_id, "blobs");
    // Noisier steps sit further from the clean latent.
    let d = |step| {
        let r = back.style_reference(step, &s).unwrap();
        (&r - back.style_latent()).mapv(|v| v * v).sum()
    };
    assert!(d(0) > d(4));
}

#[test]
fn extraction_rejects_bad_layers() {
    let b = den();
    let s = ScheduleSpec::default().with_steps(2).build().unwrap();
    let too_far = spg_core::attention::LayerSelection::new([17]).unwrap();
    assert!(matches!(
        extract_style_features(&gaussian_latent((4, 8, 8), 2), &s, &too_far, &b, 0),
        Err(SpgError::Configuration(_))
    ));
    let wrong_shape = gaussian_latent((3, 8, 8), 2);
    assert!(extract_style_features(&wrong_shape, &s, &b.default_selection().unwrap(), &b, 0).is_err());
    let _ = b.id();
}
