//! Backbone-independent guidance arithmetic.
//!
//! All combinations operate on ε-predictions. The unconditional prediction
//! is the shared anchor for both the prompt direction (classifier-free
//! guidance) and the style direction (style-prompting guidance).

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpgError};
use crate::par;
use crate::tensor::{ensure_same_shape, Latent};

pub const DEFAULT_LAMBDA_CFG: f64 = 7.0;
pub const DEFAULT_LAMBDA_SPG: f64 = 3.0;
pub const DEFAULT_ADAIN_EPS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceWeights {
    lambda_cfg: f64,
    lambda_spg: f64,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        GuidanceWeights {
            lambda_cfg: DEFAULT_LAMBDA_CFG,
            lambda_spg: DEFAULT_LAMBDA_SPG,
        }
    }
}

impl GuidanceWeights {
    pub fn new(lambda_cfg: f64, lambda_spg: f64) -> Result<Self> {
        for (name, v) in [("lambda_cfg", lambda_cfg), ("lambda_spg", lambda_spg)] {
            if !v.is_finite() || v < 0.0 {
                return Err(SpgError::invalid(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(GuidanceWeights {
            lambda_cfg,
            lambda_spg,
        })
    }

    pub fn lambda_cfg(&self) -> f64 {
        self.lambda_cfg
    }

    pub fn lambda_spg(&self) -> f64 {
        self.lambda_spg
    }
}

/// The branch predictions available at one sampling step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTriple {
    pub eps_cond: Option<Latent>,
    pub eps_uncond: Latent,
    pub eps_style: Option<Latent>,
}

impl NoiseTriple {
    pub fn new(eps_cond: Option<Latent>, eps_uncond: Latent, eps_style: Option<Latent>) -> Result<Self> {
        if let Some(c) = &eps_cond {
            ensure_same_shape(c, &eps_uncond, "eps_cond vs eps_uncond")?;
        }
        if let Some(s) = &eps_style {
            ensure_same_shape(s, &eps_uncond, "eps_style vs eps_uncond")?;
        }
        Ok(NoiseTriple {
            eps_cond,
            eps_uncond,
            eps_style,
        })
    }

    pub fn full(eps_cond: Latent, eps_uncond: Latent, eps_style: Latent) -> Result<Self> {
        Self::new(Some(eps_cond), eps_uncond, Some(eps_style))
    }

    pub fn cfg(eps_cond: Latent, eps_uncond: Latent) -> Result<Self> {
        Self::new(Some(eps_cond), eps_uncond, None)
    }

    pub fn spg(eps_uncond: Latent, eps_style: Latent) -> Result<Self> {
        Self::new(None, eps_uncond, Some(eps_style))
    }

    fn cond(&self) -> Result<&Latent> {
        let c = self
            .eps_cond
            .as_ref()
            .ok_or(SpgError::MissingBranch("eps_cond"))?;
        ensure_same_shape(c, &self.eps_uncond, "eps_cond vs eps_uncond")?;
        Ok(c)
    }

    fn style(&self) -> Result<&Latent> {
        let s = self
            .eps_style
            .as_ref()
            .ok_or(SpgError::MissingBranch("eps_style"))?;
        ensure_same_shape(s, &self.eps_uncond, "eps_style vs eps_uncond")?;
        Ok(s)
    }
}

/// `eps_uncond + lambda_cfg * (eps_cond - eps_uncond)`
pub fn combine_cfg(triple: &NoiseTriple, weights: &GuidanceWeights) -> Result<Latent> {
    let cond = triple.cond()?;
    let l = weights.lambda_cfg;
    // Endpoints exactly, without the rounding of u + (c - u).
    if l == 0.0 {
        return Ok(triple.eps_uncond.clone());
    }
    if l == 1.0 {
        return Ok(cond.clone());
    }
    Ok(par::zip2_map(&triple.eps_uncond, cond, move |u, c| u + l * (c - u)))
}

/// `eps_uncond + lambda_spg * (eps_style - eps_uncond)`
pub fn combine_spg(triple: &NoiseTriple, weights: &GuidanceWeights) -> Result<Latent> {
    let style = triple.style()?;
    let l = weights.lambda_spg;
    if l == 0.0 {
        return Ok(triple.eps_uncond.clone());
    }
    if l == 1.0 {
        return Ok(style.clone());
    }
    Ok(par::zip2_map(&triple.eps_uncond, style, move |u, s| u + l * (s - u)))
}

/// Both guidance directions added to the shared unconditional anchor.
///
/// A zero weight drops its term entirely, which makes the reductions to
/// [`combine_cfg`] and [`combine_spg`] exact down to signed zeros.
pub fn combine_joint(triple: &NoiseTriple, weights: &GuidanceWeights) -> Result<Latent> {
    let cond = triple.cond()?;
    let style = triple.style()?;
    if weights.lambda_spg == 0.0 {
        return combine_cfg(triple, weights);
    }
    if weights.lambda_cfg == 0.0 {
        return combine_spg(triple, weights);
    }
    let (lc, ls) = (weights.lambda_cfg, weights.lambda_spg);
    Ok(par::zip3_map(&triple.eps_uncond, cond, style, move |u, c, s| {
        u + lc * (c - u) + ls * (s - u)
    }))
}

/// Per-channel statistics over all spatial positions (population std).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl ChannelStats {
    pub fn of(z: &Latent) -> Self {
        let n = (z.len_of(Axis(1)) * z.len_of(Axis(2))) as f64;
        let mut mean = Array1::zeros(z.len_of(Axis(0)));
        let mut std = Array1::zeros(z.len_of(Axis(0)));
        for (c, ch) in z.axis_iter(Axis(0)).enumerate() {
            let m = ch.sum() / n;
            let var = ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[c] = m;
            std[c] = var.sqrt();
        }
        ChannelStats { mean, std }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Align `target`'s per-channel mean and std with `style`'s.
///
/// Spatial sizes may differ; only the channel counts must agree. Channels
/// of `target` whose std falls below `eps_floor` are divided by the floor,
/// so a constant channel maps onto the style mean.
pub fn adain(target: &Latent, style: &Latent, eps_floor: f64) -> Result<Latent> {
    if target.len_of(Axis(0)) != style.len_of(Axis(0)) {
        return Err(SpgError::invalid(format!(
            "adain: channel mismatch {} vs {}",
            target.len_of(Axis(0)),
            style.len_of(Axis(0))
        )));
    }
    if !(eps_floor > 0.0 && eps_floor.is_finite()) {
        return Err(SpgError::invalid(format!(
            "adain: eps_floor must be positive, got {eps_floor}"
        )));
    }
    if !target.iter().chain(style.iter()).all(|v| v.is_finite()) {
        return Err(SpgError::Numeric("adain: non-finite input".into()));
    }
    let t = ChannelStats::of(target);
    let s = ChannelStats::of(style);
    let mut out = target.clone();
    let channels: Vec<usize> = (0..t.channels()).collect();
    let rows = par::map_slice(&channels, |&c| {
        let scale = s.std[c] / t.std[c].max(eps_floor);
        let (mt, ms) = (t.mean[c], s.mean[c]);
        target
            .index_axis(Axis(0), c)
            .mapv(|v| (v - mt) * scale + ms)
    });
    for (c, row) in rows.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), c).assign(&row);
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(SpgError::Numeric("adain: non-finite output".into()));
    }
    Ok(out)
}
