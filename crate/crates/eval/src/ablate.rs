//! One-parameter sweeps: `lambda_spg=3..15`, `layers=all|last6`,
//! `adain=on|off`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use spg_core::attention::StyleFeatureCache;
use spg_core::backbone::Backbone;
use spg_core::par;

use crate::config::Settings;
use crate::error::{EvalError, Result};
use crate::generate::{extract_cache, run_generation, write_generation};

/// Step of `a..b` ranges when none is given.
pub const DEFAULT_RANGE_STEP: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    LambdaCfg(Vec<f64>),
    LambdaSpg(Vec<f64>),
    /// Layer specs, as accepted by `--layers`.
    Layers(Vec<String>),
    Adain(Vec<bool>),
}

/// `a..b` (inclusive, step 3), `a..b:step`, or a `,`/`|` separated list.
fn parse_numbers(v: &str) -> Result<Vec<f64>> {
    let num = |s: &str| -> Result<f64> {
        let x: f64 = s
            .trim()
            .parse()
            .map_err(|_| EvalError::usage(format!("bad number `{s}` in sweep")))?;
        if x.is_finite() {
            Ok(x)
        } else {
            Err(EvalError::usage(format!("non-finite `{s}` in sweep")))
        }
    };
    if let Some((a, rest)) = v.split_once("..") {
        let (b, step) = match rest.split_once(':') {
            Some((b, s)) => (num(b)?, num(s)?),
            None => (num(rest)?, DEFAULT_RANGE_STEP),
        };
        let a = num(a)?;
        if step <= 0.0 || b < a {
            return Err(EvalError::usage(format!("empty or reversed range `{v}`")));
        }
        let n = ((b - a) / step + 1e-9).floor() as usize;
        return Ok((0..=n).map(|i| a + step * i as f64).collect());
    }
    v.split([',', '|']).map(num).collect()
}

impl FromStr for Sweep {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| EvalError::usage(format!("sweep `{s}` is not key=values")))?;
        let value = value.trim();
        if value.is_empty() {
            return Err(EvalError::usage(format!("sweep `{s}` has no values")));
        }
        match key.trim() {
            "lambda_cfg" => Ok(Sweep::LambdaCfg(parse_numbers(value)?)),
            "lambda_spg" => Ok(Sweep::LambdaSpg(parse_numbers(value)?)),
            // Layer specs may contain commas, so only `|` separates them.
            "layers" => Ok(Sweep::Layers(value.split('|').map(|l| l.trim().to_string()).collect())),
            "adain" => value
                .split([',', '|'])
                .map(|v| match v.trim() {
                    "on" | "true" => Ok(true),
                    "off" | "false" => Ok(false),
                    other => Err(EvalError::usage(format!("adain takes on|off, got `{other}`"))),
                })
                .collect::<Result<_>>()
                .map(Sweep::Adain),
            other => Err(EvalError::usage(format!(
                "unknown sweep key `{other}` (lambda_cfg, lambda_spg, layers, adain)"
            ))),
        }
    }
}

/// One point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub settings: Settings,
}

impl Sweep {
    pub fn variants(&self, base: &Settings) -> Vec<Variant> {
        let with = |label: String, f: &dyn Fn(&mut Settings)| {
            let mut settings = base.clone();
            f(&mut settings);
            Variant { label, settings }
        };
        match self {
            Sweep::LambdaCfg(v) => v.iter().map(|&x| with(format!("lambda_cfg={x}"), &|s| s.lambda_cfg = x)).collect(),
            Sweep::LambdaSpg(v) => v.iter().map(|&x| with(format!("lambda_spg={x}"), &|s| s.lambda_spg = x)).collect(),
            Sweep::Layers(v) => v
                .iter()
                .map(|l| with(format!("layers={l}"), &|s| s.layers = l.clone()))
                .collect(),
            Sweep::Adain(v) => v
                .iter()
                .map(|&on| with(format!("adain={}", if on { "on" } else { "off" }), &|s| s.adain = on))
                .collect(),
        }
    }
}

/// File-name-safe form of a variant label.
pub fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_' | '=') { c } else { '_' })
        .collect()
}

/// Generate one image (plus metadata and timings sidecars) per variant into
/// `out`. Style features are extracted once per distinct layer selection.
pub fn run_ablation<B: Backbone + Clone>(
    backbone: &B,
    base: &Settings,
    sweep: &Sweep,
    prompt: &str,
    style: Option<&Path>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let variants = sweep.variants(base);
    let mut caches: BTreeMap<String, Option<Arc<StyleFeatureCache>>> = BTreeMap::new();
    let mut jobs = Vec::new();
    for v in &variants {
        let mut config = v.settings.sampler_config(backbone)?;
        config.record_timings = true;
        let needs = config.mode.needs_cache(&config.weights);
        let key = config.selection.to_string();
        let cache = match (needs, style) {
            (false, _) => None,
            (true, None) => {
                return Err(EvalError::usage(format!(
                    "variant `{}` needs a style image (--style)",
                    v.label
                )))
            }
            (true, Some(path)) => match caches.get(&key) {
                Some(c) => c.clone(),
                None => {
                    let c = Some(Arc::new(extract_cache(backbone, path, &v.settings, &config.selection)?));
                    caches.insert(key, c.clone());
                    c
                }
            },
        };
        jobs.push((v, config, cache, out.join(format!("{}.png", slug(&v.label)))));
    }
    let results = par::map_slice(&jobs, |(v, config, cache, png)| -> Result<PathBuf> {
        let b = backbone.clone();
        let g = run_generation(&b, prompt, &v.settings, config.clone(), cache.as_ref())?;
        write_generation(png, &g)?;
        Ok(png.clone())
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_numbers("3..15").unwrap(), vec![3.0, 6.0, 9.0, 12.0, 15.0]);
        assert_eq!(parse_numbers("0..1:0.5").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_numbers("3..14").unwrap(), vec![3.0, 6.0, 9.0, 12.0]);
        assert_eq!(parse_numbers("1,2|5").unwrap(), vec![1.0, 2.0, 5.0]);
        assert!(parse_numbers("5..3").is_err());
        assert!(parse_numbers("1..4:0").is_err());
    }
}
