//! Prompt (+ style cache) to image, with metadata sufficient to rerun.

use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{LayerSelection, StyleFeatureCache};
use crate::backbone::{Backbone, ExtraConditioning};
use crate::error::{Result, SpgError};
use crate::guidance::GuidanceWeights;
use crate::sampler::{sample_with_extra, RunReport, SamplerConfig, SamplerMode};
use crate::schedule::ScheduleSpec;
use crate::tensor::hex;

pub const METADATA_VERSION: u32 = 1;

/// Everything needed to regenerate an image bit for bit, given the same
/// backbone weights and feature cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetadata {
    pub version: u32,
    pub prompt: String,
    pub seed: u64,
    pub mode: SamplerMode,
    pub lambda_cfg: f64,
    pub lambda_spg: f64,
    pub layers: LayerSelection,
    pub schedule: ScheduleSpec,
    pub schedule_id: String,
    pub adain: bool,
    pub adain_eps_floor: f64,
    pub width: u32,
    pub height: u32,
    pub backbone_id: String,
    pub cache_digest: Option<String>,
    pub style_image_id: Option<String>,
    pub final_latent_sha256: String,
    pub image_sha256: String,
}

impl GenerationMetadata {
    /// Sampler configuration that reproduces this generation.
    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        if self.version != METADATA_VERSION {
            return Err(SpgError::Format(format!("unsupported metadata version {}", self.version)));
        }
        let schedule = self.schedule.build()?;
        if schedule.id() != self.schedule_id {
            return Err(SpgError::Format("metadata schedule id does not match its schedule".into()));
        }
        Ok(SamplerConfig {
            weights: GuidanceWeights::new(self.lambda_cfg, self.lambda_spg)?,
            selection: self.layers.clone(),
            schedule,
            seed: self.seed,
            mode: self.mode,
            adain_enabled: self.adain,
            adain_eps_floor: self.adain_eps_floor,
            record_timings: false,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub prompt: String,
    pub width: u32,
    pub height: u32,
    pub schedule: ScheduleSpec,
    pub config: SamplerConfig,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub image: RgbImage,
    pub metadata: GenerationMetadata,
    pub report: RunReport,
}

pub fn image_digest(image: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.as_raw());
    let d: [u8; 32] = h.finalize().into();
    hex(&d)
}

pub fn generate_image<B: Backbone + ?Sized>(
    backbone: &B,
    request: &GenerationRequest,
    cache: Option<&Arc<StyleFeatureCache>>,
    extra: Option<&ExtraConditioning>,
) -> Result<Generation> {
    if request.schedule.build()?.id() != request.config.schedule.id() {
        return Err(SpgError::Configuration("request schedule spec disagrees with sampler schedule".into()));
    }
    let shape = backbone.latent_spec().latent_shape(request.width, request.height)?;
    let out = sample_with_extra(backbone, &request.prompt, cache, shape, &request.config, extra)?;
    let image = backbone.decode_latent(&out.latent)?;
    let c = &request.config;
    let metadata = GenerationMetadata {
        version: METADATA_VERSION,
        prompt: request.prompt.clone(),
        seed: c.seed,
        mode: c.mode,
        lambda_cfg: c.weights.lambda_cfg(),
        lambda_spg: c.weights.lambda_spg(),
        layers: c.selection.clone(),
        schedule: request.schedule,
        schedule_id: c.schedule.id(),
        adain: c.adain_enabled,
        adain_eps_floor: c.adain_eps_floor,
        width: request.width,
        height: request.height,
        backbone_id: backbone.id().to_string(),
        cache_digest: out.report.cache_digest.clone(),
        style_image_id: cache.map(|c| c.manifest().style_image_id.clone()),
        final_latent_sha256: out.report.final_latent_sha256.clone(),
        image_sha256: image_digest(&image),
    };
    Ok(Generation {
        image,
        metadata,
        report: out.report,
    })
}
