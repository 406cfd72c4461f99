//! Shared plumbing for `extract`, `generate`, `ablate` and `eval`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use spg_core::attention::{extract_style_features_with, ExtractOptions, LayerSelection, StyleFeatureCache};
use spg_core::backbone::codec::preprocess_style;
use spg_core::backbone::Backbone;
use spg_core::pipeline::{generate_image, image_digest, Generation, GenerationRequest};
use spg_core::sampler::SamplerConfig;
use spg_core::tensor::Latent;

use crate::config::Settings;
use crate::error::Result;

/// Style image id: file stem plus a digest of the decoded pixels.
pub fn style_image_id(path: &Path, image: &image::RgbImage) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    format!("{stem}-{}", &image_digest(image)[..12])
}

/// Load, centre-crop and encode a style image at the output resolution.
pub fn encode_style<B: Backbone + ?Sized>(backbone: &B, path: &Path, width: u32, height: u32) -> Result<(Latent, String)> {
    let raw = image::open(path)?.to_rgb8();
    let id = style_image_id(path, &raw);
    let img = preprocess_style(&raw, width, height);
    Ok((backbone.encode_image(&img)?, id))
}

pub fn extract_cache<B: Backbone + ?Sized>(
    backbone: &B,
    style: &Path,
    settings: &Settings,
    selection: &LayerSelection,
) -> Result<StyleFeatureCache> {
    let (latent, id) = encode_style(backbone, style, settings.width, settings.height)?;
    let options = ExtractOptions {
        mode: settings.extraction,
        style_image_id: id,
    };
    let schedule = settings.schedule_spec().build()?;
    Ok(extract_style_features_with(&latent, &schedule, selection, backbone, settings.seed, &options)?)
}

pub fn run_generation<B: Backbone + ?Sized>(
    backbone: &B,
    prompt: &str,
    settings: &Settings,
    config: SamplerConfig,
    cache: Option<&Arc<StyleFeatureCache>>,
) -> Result<Generation> {
    let request = GenerationRequest {
        prompt: prompt.to_string(),
        width: settings.width,
        height: settings.height,
        schedule: settings.schedule_spec(),
        config,
    };
    Ok(generate_image(backbone, &request, cache, None)?)
}

/// `image.png` next to `image.json` (metadata, deterministic) and
/// `image.timings.json` (per-step report with wall-clock times).
pub fn sidecar_paths(png: &Path) -> (PathBuf, PathBuf) {
    (png.with_extension("json"), png.with_extension("timings.json"))
}

pub fn write_generation(png: &Path, g: &Generation) -> Result<()> {
    if let Some(dir) = png.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    g.image.save(png)?;
    let (meta, timings) = sidecar_paths(png);
    std::fs::write(meta, g.metadata.to_json()? + "\n")?;
    std::fs::write(timings, serde_json::to_string_pretty(&g.report)? + "\n")?;
    Ok(())
}
