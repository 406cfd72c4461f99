//! Evaluation grid: styles x prompts x images per prompt, for every mode.
//!
//! Output directory layout:
//!
//! ```text
//! styles/<style_id>.<ext>                  copy of each reference image
//! images/<mode>/<style_id>/<prompt>-<seed>.png (+ .json, .timings.json)
//! items.json                                every grid item, with errors
//! scores.csv                                one row per generated image
//! summary.json                              per-mode means, failures
//! ```
//!
//! `scores.csv` and `summary.json` are recomputed from the stored images by
//! [`rescore`], which gives the same bytes as the original run.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use spg_core::attention::StyleFeatureCache;
use spg_core::backbone::Backbone;
use spg_core::par;
use spg_core::sampler::SamplerMode;

use crate::config::FileConfig;
use crate::error::{EvalError, Result};
use crate::generate::{extract_cache, run_generation, style_image_id, write_generation};
use crate::metrics::{cosine, ImageEmbedder, MetricValue, Metrics, TextEmbedder};

pub const SUMMARY_VERSION: u32 = 1;

/// Default prompts. Four of the nouns (guitar, deer, chair, balls) come from
/// the published protocol; the fifth and the phrasing are a reconstruction.
pub const DEFAULT_PROMPTS: [&str; 5] = ["a guitar", "a deer", "a chair", "balls", "a lighthouse"];
pub const DEFAULT_IMAGES_PER_PROMPT: usize = 5;

fn default_prompts() -> Vec<String> {
    DEFAULT_PROMPTS.iter().map(|s| s.to_string()).collect()
}

fn default_images_per_prompt() -> usize {
    DEFAULT_IMAGES_PER_PROMPT
}

fn default_modes() -> Vec<SamplerMode> {
    vec![SamplerMode::SpgCfg, SamplerMode::KvInjectionBaseline]
}

/// TOML evaluation spec. Relative paths are resolved against the spec
/// file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRunSpec {
    /// Style image files, or directories of `.png`/`.jpg` files.
    pub styles: Vec<PathBuf>,
    #[serde(default = "default_prompts")]
    pub prompts: Vec<String>,
    #[serde(default = "default_images_per_prompt")]
    pub images_per_prompt: usize,
    #[serde(default = "default_modes")]
    pub modes: Vec<SamplerMode>,
    #[serde(default)]
    pub seed_base: u64,
    /// Output directory; `--out` wins.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Generation settings shared by every mode (same keys as the config
    /// file; `mode`, `seed`, `style`, `features`, `prompt`, `out` ignored).
    #[serde(default)]
    pub generation: FileConfig,
}

impl EvalRunSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let mut spec: EvalRunSpec = toml::from_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        spec.styles.iter_mut().for_each(rebase);
        if let Some(o) = spec.out.as_mut() {
            rebase(o)
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.styles.is_empty() || self.prompts.is_empty() {
            return Err(EvalError::usage("eval spec needs at least one style and one prompt"));
        }
        if self.images_per_prompt == 0 {
            return Err(EvalError::usage("images_per_prompt must be at least 1"));
        }
        if self.modes.is_empty() {
            return Err(EvalError::usage("eval spec needs at least one mode"));
        }
        Ok(())
    }

    /// Style files, directories expanded and sorted.
    pub fn style_files(&self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for p in &self.styles {
            if p.is_dir() {
                let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|f| {
                        f.extension()
                            .and_then(|e| e.to_str())
                            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                    })
                    .collect();
                found.sort();
                out.extend(found);
            } else if p.is_file() {
                out.push(p.clone());
            } else {
                return Err(EvalError::usage(format!("style path {} does not exist", p.display())));
            }
        }
        if out.is_empty() {
            return Err(EvalError::usage("no style images found"));
        }
        Ok(out)
    }

    /// Number of generations per mode.
    pub fn grid_size(&self, n_styles: usize) -> usize {
        n_styles * self.prompts.len() * self.images_per_prompt
    }
}

/// One grid cell. Paths are relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub style_id: String,
    pub style_file: PathBuf,
    pub prompt: String,
    pub seed: u64,
    pub mode: SamplerMode,
    pub image: Option<PathBuf>,
    pub gen_ms: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub style_id: String,
    pub prompt: String,
    pub seed: u64,
    pub mode: SamplerMode,
    pub text_alignment: String,
    pub style_alignment: String,
    pub gen_ms: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: SamplerMode,
    pub items: usize,
    pub scored: usize,
    /// `None` when the metric was skipped.
    pub text_alignment_mean: Option<f64>,
    pub style_alignment_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub style_id: String,
    pub prompt: String,
    pub seed: u64,
    pub mode: SamplerMode,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub version: u32,
    /// Id of the text-image model, `None` when text alignment was skipped.
    pub text_metric: Option<String>,
    pub style_metric: String,
    pub total: usize,
    pub failed: usize,
    pub modes: Vec<ModeSummary>,
    pub failures: Vec<Failure>,
}

fn prompt_slug(p: &str) -> String {
    let s: String = p
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    s.chars().take(40).collect()
}

/// Generate the grid, score it and write everything under `out`.
/// Individual failures are recorded and the run carries on.
pub fn run_eval<B: Backbone + Clone>(
    spec: &EvalRunSpec,
    backbone: &B,
    metrics: &Metrics,
    out: &Path,
) -> Result<EvalSummary> {
    spec.validate()?;
    let files = spec.style_files()?;
    let mut base = spec.generation.clone();
    base.seed = Some(spec.seed_base);
    let base = base.resolve();

    std::fs::create_dir_all(out.join("styles"))?;
    let mut styles = Vec::new();
    for f in &files {
        let id = style_image_id(f, &image::open(f)?.to_rgb8());
        let ext = f.extension().and_then(|e| e.to_str()).unwrap_or("png").to_ascii_lowercase();
        let rel = PathBuf::from("styles").join(format!("{id}.{ext}"));
        std::fs::copy(f, out.join(&rel))?;
        styles.push((f.clone(), id, rel));
    }

    // One cache per style, shared by every mode that needs it.
    let probe = base.sampler_config(backbone)?;
    let needs_cache = spec.modes.iter().any(|m| m.needs_cache(&probe.weights));
    let caches: Vec<Option<Arc<StyleFeatureCache>>> = if needs_cache {
        let made = par::map_slice(&styles, |(f, _, _)| {
            let b = backbone.clone();
            extract_cache(&b, f, &base, &probe.selection).map(Arc::new)
        });
        made.into_iter().map(|r| r.map(Some)).collect::<Result<_>>()?
    } else {
        vec![None; styles.len()]
    };

    let mut cells = Vec::new();
    for &mode in &spec.modes {
        for (si, (_, style_id, rel)) in styles.iter().enumerate() {
            for (pi, prompt) in spec.prompts.iter().enumerate() {
                for k in 0..spec.images_per_prompt {
                    let seed = spec.seed_base + (pi * spec.images_per_prompt + k) as u64;
                    cells.push((si, EvalItem {
                        style_id: style_id.clone(),
                        style_file: rel.clone(),
                        prompt: prompt.clone(),
                        seed,
                        mode,
                        image: None,
                        gen_ms: None,
                        error: None,
                    }));
                }
            }
        }
    }

    let items: Vec<EvalItem> = par::map_slice(&cells, |(si, item)| {
        let mut item = item.clone();
        let rel = PathBuf::from("images")
            .join(item.mode.as_str())
            .join(&item.style_id)
            .join(format!("{}-{}.png", prompt_slug(&item.prompt), item.seed));
        let b = backbone.clone();
        let started = Instant::now();
        let result = (|| -> Result<()> {
            let mut s = base.clone();
            s.mode = item.mode;
            s.seed = item.seed;
            let mut config = s.sampler_config(&b)?;
            config.record_timings = true;
            let g = run_generation(&b, &item.prompt, &s, config, caches[*si].as_ref())?;
            write_generation(&out.join(&rel), &g)
        })();
        match result {
            Ok(()) => {
                item.gen_ms = Some(started.elapsed().as_secs_f64() * 1e3);
                item.image = Some(rel);
            }
            Err(e) => item.error = Some(e.to_string()),
        }
        item
    });
    std::fs::write(out.join("items.json"), serde_json::to_string_pretty(&items)? + "\n")?;
    score_and_write(&items, metrics, out)
}

/// Recompute `scores.csv` and `summary.json` from a finished run's stored
/// images.
pub fn rescore(out: &Path, metrics: &Metrics) -> Result<EvalSummary> {
    let items: Vec<EvalItem> = serde_json::from_str(&std::fs::read_to_string(out.join("items.json"))?)?;
    score_and_write(&items, metrics, out)
}

fn score_and_write(items: &[EvalItem], metrics: &Metrics, out: &Path) -> Result<EvalSummary> {
    let mut style_emb: BTreeMap<&Path, Result<Vec<f64>>> = BTreeMap::new();
    let mut text_emb: BTreeMap<&str, Result<Vec<f64>>> = BTreeMap::new();
    for it in items.iter().filter(|it| it.image.is_some()) {
        style_emb
            .entry(it.style_file.as_path())
            .or_insert_with(|| metrics.style.embed_image(&out.join(&it.style_file)));
        if let Some(clip) = &metrics.clip {
            text_emb.entry(it.prompt.as_str()).or_insert_with(|| clip.embed_text(&it.prompt));
        }
    }
    let fail = |e: &EvalError| e.to_string();

    let scored: Vec<std::result::Result<(MetricValue, MetricValue), String>> = par::map_slice(items, |it| {
        if let Some(e) = &it.error {
            return Err(e.clone());
        }
        let img = out.join(it.image.as_ref().expect("generated item has an image"));
        let style = match &style_emb[it.style_file.as_path()] {
            Ok(s) => s,
            Err(e) => return Err(fail(e)),
        };
        let style_score = metrics
            .style
            .embed_image(&img)
            .and_then(|e| cosine(&e, style))
            .map_err(|e| fail(&e))?;
        let text_score = match &metrics.clip {
            None => MetricValue::Skipped,
            Some(clip) => {
                let t = text_emb[it.prompt.as_str()].as_ref().map_err(fail)?;
                MetricValue::Score(clip.embed_image(&img).and_then(|e| cosine(&e, t)).map_err(|e| fail(&e))?)
            }
        };
        Ok((text_score, MetricValue::Score(style_score)))
    });

    let mut writer = csv::Writer::from_path(out.join("scores.csv"))?;
    let mut failures = Vec::new();
    let mut per_mode: HashMap<SamplerMode, (usize, Vec<f64>, Vec<f64>)> = HashMap::new();
    let mut order = Vec::new();
    for (it, s) in items.iter().zip(&scored) {
        if !per_mode.contains_key(&it.mode) {
            order.push(it.mode);
        }
        let entry = per_mode.entry(it.mode).or_default();
        entry.0 += 1;
        match s {
            Ok((text, style)) => {
                writer.serialize(ScoreRow {
                    style_id: it.style_id.clone(),
                    prompt: it.prompt.clone(),
                    seed: it.seed,
                    mode: it.mode,
                    text_alignment: text.to_string(),
                    style_alignment: style.to_string(),
                    gen_ms: it.gen_ms.map(|m| format!("{m:.1}")).unwrap_or_default(),
                })?;
                entry.1.extend(text.score());
                entry.2.extend(style.score());
            }
            Err(error) => failures.push(Failure {
                style_id: it.style_id.clone(),
                prompt: it.prompt.clone(),
                seed: it.seed,
                mode: it.mode,
                error: error.clone(),
            }),
        }
    }
    writer.flush()?;

    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let modes = order
        .into_iter()
        .map(|m| {
            let (n, text, style) = &per_mode[&m];
            ModeSummary {
                mode: m,
                items: *n,
                scored: style.len(),
                text_alignment_mean: mean(text),
                style_alignment_mean: mean(style),
            }
        })
        .collect();
    let summary = EvalSummary {
        version: SUMMARY_VERSION,
        text_metric: metrics.text_metric_id(),
        style_metric: metrics.style.id(),
        total: items.len(),
        failed: failures.len(),
        modes,
        failures,
    };
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}
