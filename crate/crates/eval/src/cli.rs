//! `spg` command line. Every generation flag can also be set in a TOML file
//! passed with `--config`; keys are the long flag names in snake_case.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use spg_core::attention::{ExtractionMode, StyleFeatureCache};
use spg_core::backbone::Backbone;
use spg_core::sampler::SamplerMode;

use crate::ablate::{run_ablation, Sweep};
use crate::config::{FileConfig, Settings};
use crate::error::{EvalError, Result};
use crate::eval::{rescore, run_eval, EvalRunSpec, EvalSummary};
use crate::generate::{extract_cache, run_generation, write_generation};
use crate::metrics::Metrics;
use crate::weights::{fetch, load_backbone, SYNTHETIC_WEIGHTS_SEED};

#[derive(Debug, Parser)]
#[command(name = "spg", version, about = "Style-prompting guidance: extract style features, generate, ablate, evaluate")]
pub struct Cli {
    /// TOML file with defaults for any flag (snake_case keys). Flags on the
    /// command line win over the file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Weights directory [env: SPG_WEIGHTS_DIR] [default: ~/.cache/spg/weights]
    #[arg(long, global = true, value_name = "DIR")]
    pub weights_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Install backbone weights into the weights directory.
    FetchWeights(FetchArgs),
    /// Record style attention features from a style image.
    Extract(ExtractArgs),
    /// Generate one image.
    Generate(GenerateArgs),
    /// Sweep one parameter and generate one image per value.
    Ablate(AblateArgs),
    /// Run an evaluation grid and score it.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    /// Backbone profile: sdxl or sd15 [default: sdxl]
    #[arg(long)]
    pub backbone: Option<String>,
    /// Copy (and validate) an existing weights file instead of generating
    /// synthetic weights.
    #[arg(long, value_name = "FILE")]
    pub from: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// Backbone profile: sdxl or sd15 [default: sdxl]
    #[arg(long)]
    pub backbone: Option<String>,
    /// Self-attention layers to inject: `all`, `lastN`, or ids like
    /// `65-70` or `1,3,10-12` [default: last6]
    #[arg(long)]
    pub layers: Option<String>,
    /// DDIM sampling steps [default: 50]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output width in pixels [default: 256]
    #[arg(long)]
    pub width: Option<u32>,
    /// Output height in pixels [default: 256]
    #[arg(long)]
    pub height: Option<u32>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Style image.
    #[arg(long, value_name = "IMAGE")]
    pub style: Option<PathBuf>,
    /// Seed of the forward-noising draw [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// How the style latent is noised: forward_noise or ddim_inversion
    /// [default: forward_noise]
    #[arg(long, value_parser = parse_extraction)]
    pub extraction: Option<ExtractionMode>,
    /// Feature cache to write [default: style_features.safetensors]
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SampleArgs {
    /// Style image; features are extracted on the fly.
    #[arg(long, value_name = "IMAGE", conflicts_with = "features")]
    pub style: Option<PathBuf>,
    /// Feature cache from `extract`. Its layers, steps and size are used.
    #[arg(long, value_name = "FILE")]
    pub features: Option<PathBuf>,
    /// Text prompt.
    #[arg(long)]
    pub prompt: Option<String>,
    /// Prompt guidance weight [default: 7.0]
    #[arg(long, allow_negative_numbers = true)]
    pub lambda_cfg: Option<f64>,
    /// Style guidance weight; 0 gives plain classifier-free guidance
    /// [default: 3.0]
    #[arg(long, allow_negative_numbers = true)]
    pub lambda_spg: Option<f64>,
    /// spg_cfg, spg_only, cfg_only, kv_injection_baseline or
    /// kv_injection_baseline_adain [default: spg_cfg]
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<SamplerMode>,
    /// Initial-noise seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// AdaIN of the initial latent to the style statistics: on or off
    /// [default: on]
    #[arg(long, value_parser = parse_on_off)]
    pub adain: Option<bool>,
    /// How style features are extracted with --style: forward_noise or
    /// ddim_inversion [default: forward_noise]
    #[arg(long, value_parser = parse_extraction)]
    pub extraction: Option<ExtractionMode>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub sample: SampleArgs,
    /// Output PNG; metadata goes to <out>.json and per-step timings to
    /// <out>.timings.json [default: spg_out.png]
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub sample: SampleArgs,
    /// `lambda_spg=3..15` (step 3; `a..b:step` for another), `lambda_cfg=...`,
    /// `layers=all|last6`, or `adain=on|off`.
    #[arg(long, required = true)]
    pub sweep: String,
    /// Output directory [default: ablation]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Evaluation spec (TOML).
    #[arg(long, value_name = "FILE")]
    pub spec: PathBuf,
    /// Output directory; overrides the spec [default: eval_out]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Recompute scores from the images already in the output directory.
    #[arg(long)]
    pub rescore: bool,
}

fn parse_mode(s: &str) -> std::result::Result<SamplerMode, String> {
    s.parse().map_err(|e: spg_core::SpgError| e.to_string())
}

fn parse_on_off(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(format!("expected on or off, got `{s}`")),
    }
}

fn parse_extraction(s: &str) -> std::result::Result<ExtractionMode, String> {
    match s {
        "forward_noise" => Ok(ExtractionMode::ForwardNoise),
        "ddim_inversion" => Ok(ExtractionMode::DdimInversion),
        _ => Err(format!("expected forward_noise or ddim_inversion, got `{s}`")),
    }
}

impl ModelArgs {
    fn apply(&self, c: &mut FileConfig) {
        c.backbone = self.backbone.clone();
        c.layers = self.layers.clone();
        c.steps = self.steps;
        c.width = self.width;
        c.height = self.height;
    }
}

impl SampleArgs {
    fn apply(&self, c: &mut FileConfig) {
        c.style = self.style.clone();
        c.features = self.features.clone();
        c.prompt = self.prompt.clone();
        c.lambda_cfg = self.lambda_cfg;
        c.lambda_spg = self.lambda_spg;
        c.mode = self.mode;
        c.seed = self.seed;
        c.adain = self.adain;
        c.extraction = self.extraction;
    }
}

impl Cli {
    fn file_config(&self) -> Result<FileConfig> {
        match &self.config {
            Some(p) => FileConfig::load(p),
            None => Ok(FileConfig::default()),
        }
    }

    /// Config file overlaid with the flags given on the command line.
    pub fn merged(&self) -> Result<FileConfig> {
        let mut flags = FileConfig {
            weights_dir: self.weights_dir.clone(),
            ..Default::default()
        };
        match &self.command {
            Command::FetchWeights(a) => flags.backbone = a.backbone.clone(),
            Command::Extract(a) => {
                a.model.apply(&mut flags);
                flags.style = a.style.clone();
                flags.seed = a.seed;
                flags.extraction = a.extraction;
                flags.out = a.out.clone();
            }
            Command::Generate(a) => {
                a.model.apply(&mut flags);
                a.sample.apply(&mut flags);
                flags.out = a.out.clone();
            }
            Command::Ablate(a) => {
                a.model.apply(&mut flags);
                a.sample.apply(&mut flags);
                flags.out = a.out.clone();
            }
            Command::Eval(a) => flags.out = a.out.clone(),
        }
        Ok(self.file_config()?.overlay(flags))
    }
}

/// Run a parsed command line, writing progress to `log`.
pub fn run(cli: &Cli, log: &mut dyn Write) -> Result<()> {
    let merged = cli.merged()?;
    match &cli.command {
        Command::FetchWeights(a) => {
            let s = merged.resolve();
            let path = fetch(&s.weights_dir, &s.backbone, a.from.as_deref(), SYNTHETIC_WEIGHTS_SEED)?;
            writeln!(log, "wrote {}", path.display())?;
        }
        Command::Extract(_) => {
            let s = merged.resolve();
            let style = s.style.clone().ok_or_else(|| EvalError::usage("extract needs --style"))?;
            let backbone = load_backbone(&s.weights_dir, &s.backbone)?;
            let selection = s.selection(&backbone)?;
            let cache = extract_cache(&backbone, &style, &s, &selection)?;
            let out = s.out.clone().unwrap_or_else(|| "style_features.safetensors".into());
            cache.save(&out)?;
            writeln!(
                log,
                "wrote {} ({} steps, layers {})",
                out.display(),
                cache.steps(),
                cache.manifest().layer_ids
            )?;
        }
        Command::Generate(_) => {
            let (s, cache, backbone) = prepare_sampling(merged)?;
            let prompt = s.prompt.clone().ok_or_else(|| EvalError::usage("generate needs --prompt"))?;
            let mut config = s.sampler_config(&backbone)?;
            config.record_timings = true;
            let g = run_generation(&backbone, &prompt, &s, config, cache.as_ref())?;
            let out = s.out.clone().unwrap_or_else(|| "spg_out.png".into());
            write_generation(&out, &g)?;
            writeln!(log, "wrote {}", out.display())?;
        }
        Command::Ablate(a) => {
            if merged.features.is_some() {
                return Err(EvalError::usage("ablate extracts features itself; pass --style instead of --features"));
            }
            let sweep: Sweep = a.sweep.parse()?;
            let s = merged.resolve();
            let prompt = s.prompt.clone().ok_or_else(|| EvalError::usage("ablate needs --prompt"))?;
            let backbone = load_backbone(&s.weights_dir, &s.backbone)?;
            let out = s.out.clone().unwrap_or_else(|| "ablation".into());
            let written = run_ablation(&backbone, &s, &sweep, &prompt, s.style.as_deref(), &out)?;
            for p in written {
                writeln!(log, "wrote {}", p.display())?;
            }
        }
        Command::Eval(a) => {
            let mut spec = EvalRunSpec::load(&a.spec)?;
            // The config file and global flags fill what the spec leaves out.
            let mut shared = merged.clone();
            shared.out = None;
            spec.generation = shared.overlay(spec.generation);
            let out = a
                .out
                .clone()
                .or_else(|| spec.out.clone())
                .unwrap_or_else(|| "eval_out".into());
            let metrics = Metrics::from_env();
            let summary = if a.rescore {
                rescore(&out, &metrics)?
            } else {
                let s = spec.generation.clone().resolve();
                let backbone = load_backbone(&s.weights_dir, &s.backbone)?;
                std::fs::create_dir_all(&out)?;
                run_eval(&spec, &backbone, &metrics, &out)?
            };
            report(&summary, &out, log)?;
            if summary.failed > 0 {
                return Err(EvalError::PartialFailure {
                    failed: summary.failed,
                    total: summary.total,
                });
            }
        }
    }
    Ok(())
}

fn report(s: &EvalSummary, out: &Path, log: &mut dyn Write) -> Result<()> {
    let show = |v: Option<f64>| v.map_or("skipped".to_string(), |x| format!("{x:.4}"));
    writeln!(log, "style metric: {}", s.style_metric)?;
    writeln!(log, "text metric: {}", s.text_metric.as_deref().unwrap_or("skipped (set SPG_CLIP_CMD)"))?;
    for m in &s.modes {
        writeln!(
            log,
            "{:<28} n={:<4} text={:<8} style={}",
            m.mode.as_str(),
            m.scored,
            show(m.text_alignment_mean),
            show(m.style_alignment_mean)
        )?;
    }
    writeln!(log, "wrote {}", out.join("scores.csv").display())?;
    Ok(())
}

/// Resolve settings for `generate`, loading or extracting the style cache.
/// With `--features` the cache decides layers, steps and size; explicit
/// values that disagree are a usage error.
fn prepare_sampling(merged: FileConfig) -> Result<(Settings, Option<Arc<StyleFeatureCache>>, spg_core::backbone::LatentDenoiser)> {
    let explicit = merged.clone();
    let mut s = merged.resolve();
    let backbone = load_backbone(&s.weights_dir, &s.backbone)?;
    if let Some(path) = s.features.clone() {
        let cache = StyleFeatureCache::load(&path)?;
        let m = cache.manifest();
        let down = backbone.latent_spec().downsample as u32;
        let [_, h, w] = m.latent_shape;
        let adopted = (m.layer_ids.to_string(), m.timesteps.len(), w as u32 * down, h as u32 * down);
        if let Some(l) = &explicit.layers {
            if s.selection(&backbone)? != m.layer_ids {
                return Err(EvalError::usage(format!("--layers {l} disagrees with the feature cache ({})", adopted.0)));
            }
        }
        let clash = |name: &str, given: Option<u64>, cached: u64| match given {
            Some(g) if g != cached => Err(EvalError::usage(format!("--{name} {g} disagrees with the feature cache ({cached})"))),
            _ => Ok(()),
        };
        clash("steps", explicit.steps.map(|v| v as u64), adopted.1 as u64)?;
        clash("width", explicit.width.map(u64::from), adopted.2 as u64)?;
        clash("height", explicit.height.map(u64::from), adopted.3 as u64)?;
        (s.layers, s.steps, s.width, s.height) = adopted;
        return Ok((s, Some(Arc::new(cache)), backbone));
    }
    let config = s.sampler_config(&backbone)?;
    let cache = match (&s.style, config.mode.needs_cache(&config.weights)) {
        (Some(style), true) => Some(Arc::new(extract_cache(&backbone, style, &s, &config.selection)?)),
        (None, true) => {
            return Err(EvalError::usage(format!(
                "mode {} with lambda_spg {} needs --style or --features",
                config.mode, s.lambda_spg
            )))
        }
        (_, false) => None,
    };
    s.features = None;
    Ok((s, cache, backbone))
}
