//! Noise-prediction backbones behind one interface.
//!
//! [`LatentDenoiser`] is the latent-diffusion adapter (SDXL-class and
//! SD1.5-class layer layouts, image codec, text encoder, extra conditioning
//! slots). The Gaussian oracle in [`crate::oracle`] implements the same
//! trait.

pub mod codec;
mod denoiser;
mod layers;
pub mod text;

use image::RgbImage;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::attention::{apply_hooks, AttentionHookPlan, AttentionInterceptor, HookSlot, NoHooks};
use crate::error::{Result, SpgError};
use crate::tensor::{Latent, LatentShape};

pub use denoiser::{DenoiserProfile, LatentDenoiser, StageSpec, DENOISER_FORMAT};
pub use layers::{AttentionKind, LayerDescriptor, LayerMap, LayerNumbering};

/// Prompt embedding handed to every forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub prompt: String,
    pub embedding: Array1<f32>,
}

impl Conditioning {
    pub fn is_unconditional(&self) -> bool {
        self.prompt.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotKind {
    /// Spatial residual added to the hidden states (ControlNet-style).
    StructuralResidual,
    /// Extra conditioning tokens (IP-Adapter-style image prompt).
    ImagePromptTokens,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExtraPayload {
    Residual(Latent),
    Tokens(Array2<f32>),
}

/// Plugin conditioning passed through the sampler untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtraConditioning {
    kind: SlotKind,
    payload: ExtraPayload,
}

impl ExtraConditioning {
    pub fn structural_residual(hint: Latent) -> Self {
        ExtraConditioning {
            kind: SlotKind::StructuralResidual,
            payload: ExtraPayload::Residual(hint),
        }
    }

    pub fn image_prompt_tokens(tokens: Array2<f32>) -> Self {
        ExtraConditioning {
            kind: SlotKind::ImagePromptTokens,
            payload: ExtraPayload::Tokens(tokens),
        }
    }

    pub fn kind(&self) -> SlotKind {
        self.kind
    }

    pub fn payload(&self) -> &ExtraPayload {
        &self.payload
    }

    /// Whether the unconditional branches see this payload too. Structural
    /// hints apply everywhere; image prompts replace the text prompt and so
    /// only condition the prompt branch.
    pub fn applies_to_unconditional(&self) -> bool {
        self.kind == SlotKind::StructuralResidual
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub text_encoding: bool,
    pub image_codec: bool,
    pub slots: Vec<SlotKind>,
}

impl Capabilities {
    pub fn check_slot(&self, kind: SlotKind) -> Result<()> {
        if self.slots.contains(&kind) {
            Ok(())
        } else {
            Err(SpgError::Capability(format!("backbone has no `{kind:?}` conditioning slot")))
        }
    }
}

/// Latent geometry of a backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub channels: usize,
    /// Pixels per latent cell along each axis.
    pub downsample: usize,
    /// Latent height and width must be multiples of this.
    pub latent_multiple: usize,
}

impl LatentSpec {
    pub fn latent_shape(&self, width: u32, height: u32) -> Result<LatentShape> {
        let m = (self.downsample * self.latent_multiple) as u32;
        if width == 0 || height == 0 || !width.is_multiple_of(m) || !height.is_multiple_of(m) {
            return Err(SpgError::invalid(format!(
                "resolution {width}x{height} unsupported: sides must be positive multiples of {m}"
            )));
        }
        Ok((
            self.channels,
            height as usize / self.downsample,
            width as usize / self.downsample,
        ))
    }

    pub fn check_latent(&self, shape: LatentShape) -> Result<()> {
        let (c, h, w) = shape;
        if c != self.channels || h == 0 || w == 0 || h % self.latent_multiple != 0 || w % self.latent_multiple != 0 {
            return Err(SpgError::invalid(format!(
                "latent shape {shape:?} incompatible with backbone ({} channels, spatial multiple of {})",
                self.channels, self.latent_multiple
            )));
        }
        Ok(())
    }
}

pub trait Backbone: Send + Sync {
    fn id(&self) -> &str;
    fn latent_spec(&self) -> &LatentSpec;
    fn layer_map(&self) -> &LayerMap;
    fn capabilities(&self) -> &Capabilities;
    fn hook_slot(&self) -> &HookSlot;

    /// One denoiser pass. Every hookable self-attention layer reports its
    /// K/V operands to `hooks` before attending.
    fn forward(
        &self,
        z_t: &Latent,
        t: usize,
        cond: &Conditioning,
        extra: Option<&ExtraConditioning>,
        hooks: &mut dyn AttentionInterceptor,
    ) -> Result<Latent>;

    fn encode_text(&self, prompt: &str) -> Result<Conditioning>;

    fn encode_image(&self, _image: &RgbImage) -> Result<Latent> {
        Err(SpgError::Capability(format!("backbone `{}` has no image codec", self.id())))
    }

    fn decode_latent(&self, _z: &Latent) -> Result<RgbImage> {
        Err(SpgError::Capability(format!("backbone `{}` has no image codec", self.id())))
    }

    /// ε-prediction, optionally under a hook plan.
    fn predict_noise(
        &self,
        z_t: &Latent,
        t: usize,
        cond: &Conditioning,
        hooks: Option<&AttentionHookPlan>,
        extra: Option<&ExtraConditioning>,
    ) -> Result<Latent> {
        match hooks {
            Some(plan) => apply_hooks(plan.clone(), self)?.predict_noise(z_t, t, cond, extra),
            None => {
                if let Some(extra) = extra {
                    self.capabilities().check_slot(extra.kind())?;
                }
                self.forward(z_t, t, cond, extra, &mut NoHooks)
            }
        }
    }
}
