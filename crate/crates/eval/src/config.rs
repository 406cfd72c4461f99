//! Config file mirroring the command-line flags. Flags win over the file,
//! the file wins over built-in defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use spg_core::attention::{ExtractionMode, LayerSelection};
use spg_core::backbone::Backbone;
use spg_core::guidance::{GuidanceWeights, DEFAULT_ADAIN_EPS_FLOOR, DEFAULT_LAMBDA_CFG, DEFAULT_LAMBDA_SPG};
use spg_core::sampler::{SamplerConfig, SamplerMode};
use spg_core::schedule::{ScheduleSpec, DEFAULT_DDIM_STEPS};

use crate::error::{EvalError, Result};
use crate::weights::weights_dir;

pub const DEFAULT_BACKBONE: &str = "sdxl";
pub const DEFAULT_LAYERS: &str = "last6";
/// Default square output size. Small so the synthetic-weight backbone
/// runs quickly on a CPU.
pub const DEFAULT_RESOLUTION: u32 = 256;

/// Every key is optional. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub backbone: Option<String>,
    pub weights_dir: Option<PathBuf>,
    pub layers: Option<String>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub lambda_cfg: Option<f64>,
    pub lambda_spg: Option<f64>,
    pub mode: Option<SamplerMode>,
    pub adain: Option<bool>,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub extraction: Option<ExtractionMode>,
    pub style: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub prompt: Option<String>,
    pub out: Option<PathBuf>,
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($f:ident),*) => {
        FileConfig { $($f: $top.$f.or($base.$f)),* }
    };
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }

    /// `top` wins wherever it has a value.
    pub fn overlay(self, top: FileConfig) -> FileConfig {
        let base = self;
        overlay!(
            base, top, backbone, weights_dir, layers, steps, seed, lambda_cfg, lambda_spg, mode, adain, width,
            height, extraction, style, features, prompt, out
        )
    }

    pub fn resolve(self) -> Settings {
        Settings {
            backbone: self.backbone.unwrap_or_else(|| DEFAULT_BACKBONE.into()),
            weights_dir: weights_dir(self.weights_dir.as_deref()),
            layers: self.layers.unwrap_or_else(|| DEFAULT_LAYERS.into()),
            steps: self.steps.unwrap_or(DEFAULT_DDIM_STEPS),
            seed: self.seed.unwrap_or(0),
            lambda_cfg: self.lambda_cfg.unwrap_or(DEFAULT_LAMBDA_CFG),
            lambda_spg: self.lambda_spg.unwrap_or(DEFAULT_LAMBDA_SPG),
            mode: self.mode.unwrap_or_default(),
            adain: self.adain.unwrap_or(true),
            width: self.width.unwrap_or(DEFAULT_RESOLUTION),
            height: self.height.unwrap_or(DEFAULT_RESOLUTION),
            extraction: self.extraction.unwrap_or_default(),
            style: self.style,
            features: self.features,
            prompt: self.prompt,
            out: self.out,
        }
    }
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub backbone: String,
    pub weights_dir: PathBuf,
    pub layers: String,
    pub steps: usize,
    pub seed: u64,
    pub lambda_cfg: f64,
    pub lambda_spg: f64,
    pub mode: SamplerMode,
    pub adain: bool,
    pub width: u32,
    pub height: u32,
    pub extraction: ExtractionMode,
    pub style: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub prompt: Option<String>,
    pub out: Option<PathBuf>,
}

impl Settings {
    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec::default().with_steps(self.steps)
    }

    /// `all`, `lastN`, or explicit ids, resolved against the backbone's
    /// self-attention layers.
    pub fn selection<B: Backbone + ?Sized>(&self, backbone: &B) -> Result<LayerSelection> {
        let map = backbone.layer_map();
        let spec = self.layers.trim();
        if spec.eq_ignore_ascii_case("all") {
            return Ok(map.all_self_attention()?);
        }
        if let Some(n) = spec.strip_prefix("last") {
            let n: usize = n
                .parse()
                .map_err(|_| EvalError::usage(format!("bad layer spec `{spec}`")))?;
            return Ok(map.last_self_attention(n)?);
        }
        Ok(LayerSelection::parse(spec, map.len() as u32)?)
    }

    pub fn sampler_config<B: Backbone + ?Sized>(&self, backbone: &B) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            weights: GuidanceWeights::new(self.lambda_cfg, self.lambda_spg)?,
            selection: self.selection(backbone)?,
            schedule: self.schedule_spec().build()?,
            seed: self.seed,
            mode: self.mode,
            adain_enabled: self.adain,
            adain_eps_floor: DEFAULT_ADAIN_EPS_FLOOR,
            record_timings: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let s = FileConfig::default().resolve();
        assert_eq!((s.lambda_cfg, s.lambda_spg, s.steps), (7.0, 3.0, 50));
        assert_eq!(s.layers, "last6");
        assert_eq!(s.mode, SamplerMode::SpgCfg);
        assert!(s.adain);
    }

    #[test]
    fn overlay_prefers_top() {
        let file: FileConfig = toml::from_str("lambda_spg = 9.0\nsteps = 20\nmode = \"cfg_only\"").unwrap();
        let flags = FileConfig {
            steps: Some(10),
            ..Default::default()
        };
        let s = file.overlay(flags).resolve();
        assert_eq!((s.lambda_spg, s.steps, s.mode), (9.0, 10, SamplerMode::CfgOnly));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<FileConfig>("lambda = 1.0").is_err());
    }
}
