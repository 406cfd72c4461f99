//! Alignment metrics. Scores are raw cosines in [-1, 1], not scaled by 100.
//!
//! Embedding models run out of process: `SPG_CLIP_CMD` and `SPG_DINO_CMD`
//! each name a program (plus leading args) that is called as
//! `<cmd> image <path>` or `<cmd> text <prompt>` and prints a JSON array of
//! floats. Without `SPG_DINO_CMD` style alignment falls back to a colour and
//! texture histogram proxy, always reported under its own id. Without
//! `SPG_CLIP_CMD` text alignment is reported as skipped.

use std::fmt;
use std::path::Path;
use std::process::Command;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use spg_core::SpgError;

use crate::error::Result;

pub const CLIP_CMD_ENV: &str = "SPG_CLIP_CMD";
pub const DINO_CMD_ENV: &str = "SPG_DINO_CMD";
pub const PROXY_STYLE_ID: &str = "proxy-colour-texture-v1";

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(SpgError::InvalidInput(format!("embedding lengths {} and {} differ or are empty", a.len(), b.len())).into());
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(SpgError::InvalidInput("zero embedding".into()).into());
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// A score, or an explicit marker that the metric could not run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricValue {
    Score(f64),
    Skipped,
}

impl MetricValue {
    pub fn score(self) -> Option<f64> {
        match self {
            MetricValue::Score(s) => Some(s),
            MetricValue::Skipped => None,
        }
    }
}

impl fmt::Display for MetricValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricValue::Score(s) => write!(f, "{s:.6}"),
            MetricValue::Skipped => f.write_str("skipped"),
        }
    }
}

impl FromStr for MetricValue {
    type Err = SpgError;
    fn from_str(s: &str) -> std::result::Result<Self, SpgError> {
        if s == "skipped" {
            return Ok(MetricValue::Skipped);
        }
        s.parse()
            .map(MetricValue::Score)
            .map_err(|_| SpgError::InvalidInput(format!("bad metric value `{s}`")))
    }
}

pub trait ImageEmbedder: Send + Sync {
    fn id(&self) -> String;
    fn embed_image(&self, path: &Path) -> Result<Vec<f64>>;
}

pub trait TextEmbedder: Send + Sync {
    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>>;
}

/// External embedding program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandEmbedder {
    program: String,
    args: Vec<String>,
}

impl CommandEmbedder {
    /// Whitespace-split command line. `None` if empty.
    pub fn parse(cmd: &str) -> Option<Self> {
        let mut parts = cmd.split_whitespace().map(str::to_string);
        let program = parts.next()?;
        Some(CommandEmbedder {
            program,
            args: parts.collect(),
        })
    }

    pub fn from_env(var: &str) -> Option<Self> {
        std::env::var(var).ok().and_then(|c| Self::parse(&c))
    }

    fn run(&self, kind: &str, arg: &str) -> Result<Vec<f64>> {
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(kind)
            .arg(arg)
            .output()
            .map_err(|e| SpgError::Capability(format!("cannot run embedder `{}`: {e}", self.program)))?;
        if !out.status.success() {
            return Err(SpgError::Capability(format!(
                "embedder `{}` failed: {}",
                self.program,
                String::from_utf8_lossy(&out.stderr).trim()
            ))
            .into());
        }
        Ok(serde_json::from_slice(&out.stdout)?)
    }
}

impl ImageEmbedder for CommandEmbedder {
    fn id(&self) -> String {
        std::iter::once(self.program.as_str())
            .chain(self.args.iter().map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn embed_image(&self, path: &Path) -> Result<Vec<f64>> {
        self.run("image", &path.to_string_lossy())
    }
}

impl TextEmbedder for CommandEmbedder {
    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>> {
        self.run("text", prompt)
    }
}

/// Joint RGB histogram (4 bins per channel) followed by a histogram of
/// luminance gradient magnitudes. Cheap and deterministic; a stand-in, not
/// a learned style embedding.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProxyStyleEmbedder;

const GRAD_BINS: usize = 8;

impl ProxyStyleEmbedder {
    pub fn embed(&self, img: &RgbImage) -> Vec<f64> {
        let mut colour = vec![0.0; 64];
        for p in img.pixels() {
            let [r, g, b] = p.0.map(|c| (c >> 6) as usize);
            colour[r * 16 + g * 4 + b] += 1.0;
        }
        let (w, h) = img.dimensions();
        let luma = |x: u32, y: u32| {
            let [r, g, b] = img.get_pixel(x, y).0.map(f64::from);
            0.299 * r + 0.587 * g + 0.114 * b
        };
        let mut grad = vec![0.0; GRAD_BINS];
        for y in 0..h.saturating_sub(1) {
            for x in 0..w.saturating_sub(1) {
                let gx = luma(x + 1, y) - luma(x, y);
                let gy = luma(x, y + 1) - luma(x, y);
                let m = (gx * gx + gy * gy).sqrt();
                // Log-spaced bins from 0 to ~360.
                let bin = ((1.0 + m).ln() / 6.0 * GRAD_BINS as f64) as usize;
                grad[bin.min(GRAD_BINS - 1)] += 1.0;
            }
        }
        let norm = |v: &mut Vec<f64>| {
            let s: f64 = v.iter().sum();
            if s > 0.0 {
                v.iter_mut().for_each(|x| *x /= s);
            }
        };
        norm(&mut colour);
        norm(&mut grad);
        colour.extend(grad);
        colour
    }
}

impl ImageEmbedder for ProxyStyleEmbedder {
    fn id(&self) -> String {
        PROXY_STYLE_ID.into()
    }

    fn embed_image(&self, path: &Path) -> Result<Vec<f64>> {
        Ok(self.embed(&image::open(path)?.to_rgb8()))
    }
}

/// The metric models for one evaluation.
pub struct Metrics {
    pub clip: Option<CommandEmbedder>,
    pub style: Box<dyn ImageEmbedder>,
}

impl Metrics {
    pub fn from_env() -> Self {
        let style: Box<dyn ImageEmbedder> = match CommandEmbedder::from_env(DINO_CMD_ENV) {
            Some(d) => Box::new(d),
            None => Box::new(ProxyStyleEmbedder),
        };
        Metrics {
            clip: CommandEmbedder::from_env(CLIP_CMD_ENV),
            style,
        }
    }

    pub fn text_metric_id(&self) -> Option<String> {
        self.clip.as_ref().map(|c| c.id())
    }

    /// Cosine of image and prompt embeddings, skipped without a text model.
    pub fn text_alignment(&self, image: &Path, prompt: &str) -> Result<MetricValue> {
        match &self.clip {
            None => Ok(MetricValue::Skipped),
            Some(c) => Ok(MetricValue::Score(cosine(&c.embed_image(image)?, &c.embed_text(prompt)?)?)),
        }
    }

    pub fn style_alignment(&self, image: &Path, style: &Path) -> Result<MetricValue> {
        Ok(MetricValue::Score(cosine(
            &self.style.embed_image(image)?,
            &self.style.embed_image(style)?,
        )?))
    }
}
