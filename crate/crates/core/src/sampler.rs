//! Deterministic DDIM sampling under guidance.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{apply_hooks, AttentionHookPlan, LayerSelection, StyleFeatureCache};
use crate::backbone::{Backbone, Conditioning, ExtraConditioning};
use crate::error::{Result, SpgError};
use crate::guidance::{
    adain, combine_cfg, combine_joint, combine_spg, GuidanceWeights, NoiseTriple, DEFAULT_ADAIN_EPS_FLOOR,
};
use crate::par;
use crate::schedule::{ddim_step, DiffusionSchedule, ScheduleSpec};
use crate::tensor::{all_finite, gaussian_latent, hash_latent, hex, l2_norm, Latent, LatentShape};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Prompt guidance plus style guidance, both anchored on the
    /// unconditional prediction.
    #[default]
    SpgCfg,
    SpgOnly,
    CfgOnly,
    /// Baseline: style K/V injected into both the prompt and the
    /// unconditional branch, then plain classifier-free guidance. No AdaIN.
    KvInjectionBaseline,
    /// The injection baseline with AdaIN on.
    KvInjectionBaselineAdain,
}

impl SamplerMode {
    pub const ALL: [SamplerMode; 5] = [
        SamplerMode::SpgCfg,
        SamplerMode::SpgOnly,
        SamplerMode::CfgOnly,
        SamplerMode::KvInjectionBaseline,
        SamplerMode::KvInjectionBaselineAdain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SamplerMode::SpgCfg => "spg_cfg",
            SamplerMode::SpgOnly => "spg_only",
            SamplerMode::CfgOnly => "cfg_only",
            SamplerMode::KvInjectionBaseline => "kv_injection_baseline",
            SamplerMode::KvInjectionBaselineAdain => "kv_injection_baseline_adain",
        }
    }

    /// Whether a feature cache is needed at the given weights.
    pub fn needs_cache(self, weights: &GuidanceWeights) -> bool {
        match self {
            SamplerMode::SpgCfg | SamplerMode::SpgOnly => weights.lambda_spg() != 0.0,
            SamplerMode::CfgOnly => false,
            SamplerMode::KvInjectionBaseline | SamplerMode::KvInjectionBaselineAdain => true,
        }
    }

    fn adain(self, configured: bool) -> bool {
        match self {
            SamplerMode::KvInjectionBaseline => false,
            SamplerMode::KvInjectionBaselineAdain => true,
            _ => configured,
        }
    }
}

impl fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplerMode {
    type Err = SpgError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| SpgError::invalid(format!("unknown sampler mode `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub weights: GuidanceWeights,
    pub selection: LayerSelection,
    pub schedule: DiffusionSchedule,
    pub seed: u64,
    pub mode: SamplerMode,
    /// Match the latent's channel statistics to the noised style latent
    /// before each step. Only has an effect when a cache is supplied.
    pub adain_enabled: bool,
    pub adain_eps_floor: f64,
    /// Per-step wall-clock time in the report. Off by default so that
    /// reports from identical inputs compare equal.
    pub record_timings: bool,
}

impl SamplerConfig {
    /// Default weights, 50 steps and the backbone's default layers.
    pub fn defaults_for<B: Backbone + ?Sized>(backbone: &B, default_layers: usize) -> Result<Self> {
        Ok(SamplerConfig {
            weights: GuidanceWeights::default(),
            selection: backbone.layer_map().last_self_attention(default_layers)?,
            schedule: ScheduleSpec::default().build()?,
            seed: 0,
            mode: SamplerMode::default(),
            adain_enabled: true,
            adain_eps_floor: DEFAULT_ADAIN_EPS_FLOOR,
            record_timings: false,
        })
    }
}

/// Latent being denoised and the index of the next step.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Latent,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    /// `||eps_cond - eps_uncond||` when the prompt branch ran.
    pub cfg_norm: Option<f64>,
    /// `||eps_style - eps_uncond||` when the style branch ran.
    pub spg_norm: Option<f64>,
    pub combined_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: SamplerMode,
    pub seed: u64,
    pub lambda_cfg: f64,
    pub lambda_spg: f64,
    pub layers: String,
    pub adain: bool,
    pub schedule_id: String,
    pub backbone_id: String,
    pub cache_digest: Option<String>,
    pub final_latent_sha256: String,
    pub steps: Vec<StepRecord>,
}

impl RunReport {
    pub fn total_ms(&self) -> Option<f64> {
        self.steps.iter().map(|s| s.wall_ms).sum()
    }

    /// Copy without timings, for comparing runs.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        for s in &mut r.steps {
            s.wall_ms = None;
        }
        r
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub latent: Latent,
    pub report: RunReport,
}

fn check_cache<B: Backbone + ?Sized>(
    cache: &StyleFeatureCache,
    backbone: &B,
    config: &SamplerConfig,
    shape: LatentShape,
) -> Result<()> {
    let m = cache.manifest();
    cache.check_schedule(&config.schedule)?;
    if m.backbone_id != backbone.id() {
        return Err(SpgError::Configuration(format!(
            "feature cache recorded on `{}`, sampling with `{}`",
            m.backbone_id,
            backbone.id()
        )));
    }
    if m.layer_map_digest != backbone.layer_map().digest() {
        return Err(SpgError::Configuration("feature cache layer map differs from backbone".into()));
    }
    if m.layer_ids != config.selection {
        return Err(SpgError::Configuration(format!(
            "feature cache holds layers {}, sampler selects {}",
            m.layer_ids, config.selection
        )));
    }
    if cache.latent_shape() != shape {
        return Err(SpgError::Configuration(format!(
            "feature cache latent {:?} vs sampling latent {shape:?}",
            cache.latent_shape()
        )));
    }
    cache.check_complete()
}

fn finite(z: Latent, step: usize, t: usize, what: &'static str) -> Result<Latent> {
    if all_finite(&z) {
        Ok(z)
    } else {
        Err(SpgError::Divergence { step, timestep: t, what })
    }
}

fn diff_norm(a: &Latent, b: &Latent) -> f64 {
    l2_norm(&(a - b))
}

/// Sample from the seeded Gaussian start latent.
pub fn sample<B: Backbone + ?Sized>(
    backbone: &B,
    prompt: &str,
    cache: Option<&Arc<StyleFeatureCache>>,
    latent_shape: LatentShape,
    config: &SamplerConfig,
) -> Result<SampleOutput> {
    sample_with_extra(backbone, prompt, cache, latent_shape, config, None)
}

/// [`sample`] with plugin conditioning. Structural hints reach every
/// branch; image-prompt tokens only the prompt branch.
pub fn sample_with_extra<B: Backbone + ?Sized>(
    backbone: &B,
    prompt: &str,
    cache: Option<&Arc<StyleFeatureCache>>,
    latent_shape: LatentShape,
    config: &SamplerConfig,
    extra: Option<&ExtraConditioning>,
) -> Result<SampleOutput> {
    backbone.latent_spec().check_latent(latent_shape)?;
    let state = LatentState {
        z: gaussian_latent(latent_shape, config.seed),
        step: 0,
    };
    run_from(backbone, prompt, cache, state, config, extra)
}

/// Continue sampling from `state` to the end of the schedule.
pub fn run_from<B: Backbone + ?Sized>(
    backbone: &B,
    prompt: &str,
    cache: Option<&Arc<StyleFeatureCache>>,
    state: LatentState,
    config: &SamplerConfig,
    extra: Option<&ExtraConditioning>,
) -> Result<SampleOutput> {
    let shape = state.z.dim();
    backbone.latent_spec().check_latent(shape)?;
    let map = backbone.layer_map();
    config.selection.check_bounds(map.len() as u32)?;
    map.check_hookable(&config.selection)?;
    if config.adain_eps_floor.is_nan() || config.adain_eps_floor <= 0.0 {
        return Err(SpgError::invalid("adain_eps_floor must be positive"));
    }
    if let Some(extra) = extra {
        backbone.capabilities().check_slot(extra.kind())?;
    }
    let mode = config.mode;
    let weights = config.weights;
    if mode.needs_cache(&weights) && cache.is_none() {
        return Err(SpgError::Configuration(format!("mode {mode} needs a style feature cache")));
    }
    if let Some(c) = cache {
        check_cache(c, backbone, config, shape)?;
    }
    let use_adain = cache.is_some() && mode.adain(config.adain_enabled);

    let cond = backbone.encode_text(prompt)?;
    let uncond: Conditioning = backbone.encode_text("")?;
    let extra_uncond = extra.filter(|e| e.applies_to_unconditional());

    let schedule = &config.schedule;
    let mut z = state.z;
    let mut records = Vec::with_capacity(schedule.ddim_steps().saturating_sub(state.step));

    for step in state.step..schedule.ddim_steps() {
        let started = config.record_timings.then(Instant::now);
        let t = schedule.timestep(step)?;

        if use_adain {
            let reference = cache.expect("checked").style_reference(step, schedule)?;
            z = finite(adain(&z, &reference, config.adain_eps_floor)?, step, t, "AdaIN latent")?;
        }

        let replace = || {
            AttentionHookPlan::replace(config.selection.clone(), Arc::clone(cache.expect("checked")), step)
        };
        let baseline = matches!(mode, SamplerMode::KvInjectionBaseline | SamplerMode::KvInjectionBaselineAdain);
        // The baseline injects style K/V into both of its branches.
        let eps_uncond = if baseline {
            let mut h = apply_hooks(replace(), backbone)?;
            h.predict_noise(&z, t, &uncond, extra_uncond)?
        } else {
            backbone.predict_noise(&z, t, &uncond, None, extra_uncond)?
        };
        let eps_uncond = finite(eps_uncond, step, t, "eps_uncond")?;

        let (want_cond, want_style) = match mode {
            SamplerMode::CfgOnly => (true, false),
            SamplerMode::SpgOnly => (false, weights.lambda_spg() != 0.0),
            SamplerMode::SpgCfg => (
                weights.lambda_cfg() != 0.0 || weights.lambda_spg() == 0.0,
                weights.lambda_spg() != 0.0,
            ),
            _ => (true, false),
        };
        let eps_cond = if !want_cond {
            None
        } else if baseline {
            let mut h = apply_hooks(replace(), backbone)?;
            Some(finite(h.predict_noise(&z, t, &cond, extra)?, step, t, "eps_cond")?)
        } else {
            Some(finite(backbone.predict_noise(&z, t, &cond, None, extra)?, step, t, "eps_cond")?)
        };
        let eps_style = if want_style {
            let mut h = apply_hooks(replace(), backbone)?;
            Some(finite(h.predict_noise(&z, t, &uncond, extra_uncond)?, step, t, "eps_style")?)
        } else {
            None
        };
        let cfg_norm = eps_cond.as_ref().map(|c| diff_norm(c, &eps_uncond));
        let spg_norm = eps_style.as_ref().map(|s| diff_norm(s, &eps_uncond));

        let triple = NoiseTriple::new(eps_cond, eps_uncond, eps_style)?;
        let eps_hat = match (triple.eps_cond.is_some(), triple.eps_style.is_some()) {
            (true, true) => combine_joint(&triple, &weights)?,
            (true, false) => combine_cfg(&triple, &weights)?,
            (false, true) => combine_spg(&triple, &weights)?,
            // spg_only at zero style weight
            (false, false) => triple.eps_uncond,
        };
        let eps_hat = finite(eps_hat, step, t, "guided noise")?;
        z = finite(ddim_step(&z, &eps_hat, step, schedule)?, step, t, "latent")?;
        records.push(StepRecord {
            step,
            t,
            cfg_norm,
            spg_norm,
            combined_norm: l2_norm(&eps_hat),
            wall_ms: started.map(|s| s.elapsed().as_secs_f64() * 1e3),
        });
    }

    let report = RunReport {
        mode,
        seed: config.seed,
        lambda_cfg: weights.lambda_cfg(),
        lambda_spg: weights.lambda_spg(),
        layers: config.selection.to_string(),
        adain: use_adain,
        schedule_id: schedule.id(),
        backbone_id: backbone.id().to_string(),
        cache_digest: cache.map(|c| c.digest()).transpose()?,
        final_latent_sha256: hex(&hash_latent(&z)),
        steps: records,
    };
    Ok(SampleOutput { latent: z, report })
}

/// One run per seed, in seed order. Each worker gets its own clone of the
/// backbone so hook plans never collide.
pub fn sample_seeds<B: Backbone + Clone>(
    backbone: &B,
    prompt: &str,
    cache: Option<&Arc<StyleFeatureCache>>,
    latent_shape: LatentShape,
    config: &SamplerConfig,
    seeds: &[u64],
) -> Result<Vec<SampleOutput>> {
    par::map_slice(seeds, |&seed| {
        let worker = backbone.clone();
        let config = SamplerConfig { seed, ..config.clone() };
        sample(&worker, prompt, cache, latent_shape, &config)
    })
    .into_iter()
    .collect()
}

/// Single-threaded twin of [`sample_seeds`].
pub fn sample_seeds_sequential<B: Backbone + ?Sized>(
    backbone: &B,
    prompt: &str,
    cache: Option<&Arc<StyleFeatureCache>>,
    latent_shape: LatentShape,
    config: &SamplerConfig,
    seeds: &[u64],
) -> Result<Vec<SampleOutput>> {
    seeds
        .iter()
        .map(|&seed| {
            let config = SamplerConfig { seed, ..config.clone() };
            sample(backbone, prompt, cache, latent_shape, &config)
        })
        .collect()
}
