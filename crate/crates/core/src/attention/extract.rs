use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::cache::{CacheManifest, KvPair, StyleFeatureCache, CACHE_FORMAT_VERSION};
use super::{apply_hooks, AttentionHookPlan, LayerId, LayerSelection};
use crate::backbone::Backbone;
use crate::error::{Result, SpgError};
use crate::schedule::{ddim_transition, forward_noise, DiffusionSchedule};
use crate::tensor::{gaussian_latent, quantize_f32, Latent};

/// How the style latent is brought to each step's noise level.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    /// Closed-form noising with one noise draw shared by every step.
    #[default]
    ForwardNoise,
    /// Deterministic DDIM inversion under the empty prompt.
    DdimInversion,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtractOptions {
    pub mode: ExtractionMode,
    pub style_image_id: String,
}

/// Record style K/V features at every step of `schedule` with default
/// options (forward noising).
pub fn extract_style_features<B: Backbone + ?Sized>(
    style_latent: &Latent,
    schedule: &DiffusionSchedule,
    selection: &LayerSelection,
    backbone: &B,
    noise_seed: u64,
) -> Result<StyleFeatureCache> {
    extract_style_features_with(
        style_latent,
        schedule,
        selection,
        backbone,
        noise_seed,
        &ExtractOptions::default(),
    )
}

pub fn extract_style_features_with<B: Backbone + ?Sized>(
    style_latent: &Latent,
    schedule: &DiffusionSchedule,
    selection: &LayerSelection,
    backbone: &B,
    noise_seed: u64,
    options: &ExtractOptions,
) -> Result<StyleFeatureCache> {
    let map = backbone.layer_map();
    selection.check_bounds(map.len() as u32)?;
    map.check_hookable(selection)?;
    backbone.latent_spec().check_latent(style_latent.dim())?;

    let x0 = quantize_f32(style_latent);
    let shape = x0.dim();
    let empty = backbone.encode_text("")?;
    let n = schedule.ddim_steps();
    let mut entries = BTreeMap::new();

    let mut record = |step: usize, z_t: &Latent| -> Result<Latent> {
        let t = schedule.timestep(step)?;
        let mut handle = apply_hooks(AttentionHookPlan::record(selection.clone(), step), backbone)?;
        let eps = handle.predict_noise(z_t, t, &empty, None)?;
        let mut recorded: BTreeMap<LayerId, KvPair> = handle.take_recorded();
        for &layer in selection.ids() {
            let kv = recorded.remove(&layer).ok_or_else(|| {
                SpgError::Configuration(format!(
                    "backbone `{}` exposed no hook point at layer {layer}",
                    backbone.id()
                ))
            })?;
            entries.insert((step, layer), kv);
        }
        Ok(eps)
    };

    let trajectory = match options.mode {
        ExtractionMode::ForwardNoise => {
            let noise = gaussian_latent(shape, noise_seed);
            for step in 0..n {
                let z = forward_noise(&x0, schedule.timestep(step)?, &noise, schedule)?;
                record(step, &z)?;
            }
            None
        }
        ExtractionMode::DdimInversion => {
            // Walk from the clean latent towards noise; the first transition
            // reuses the prediction at the least noisy timestep.
            let first_t = schedule.timestep(n - 1)?;
            let mut eps = backbone.predict_noise(&x0, first_t, &empty, None, None)?;
            let mut z = x0.clone();
            let mut a_cur = 1.0;
            let mut traj = vec![Latent::zeros(shape); n];
            for step in (0..n).rev() {
                let a = schedule.alpha_bar(schedule.timestep(step)?)?;
                z = quantize_f32(&ddim_transition(&z, &eps, a_cur, a)?);
                eps = record(step, &z)?;
                traj[step] = z.clone();
                a_cur = a;
            }
            Some(traj)
        }
    };

    let manifest = CacheManifest {
        format_version: CACHE_FORMAT_VERSION,
        schedule_id: schedule.id(),
        backbone_id: backbone.id().to_string(),
        layer_map_digest: map.digest(),
        layer_ids: selection.clone(),
        timesteps: schedule.timesteps().to_vec(),
        latent_shape: [shape.0, shape.1, shape.2],
        seed: noise_seed,
        extraction: options.mode,
        style_image_id: options.style_image_id.clone(),
    };
    StyleFeatureCache::from_parts(manifest, entries, x0, trajectory)
}
