//! Latent transformer denoiser with UNet-style attention layouts.
//!
//! Tokens are latent cells. Each stage average-pools the hidden states to
//! its resolution, runs its self-attention layers there, and adds the
//! upsampled change back, so the layer layout and per-layer token counts
//! follow the UNet the profile is named after. Weights live in a single
//! tensor archive; [`LatentDenoiser::synthetic`] materializes a seeded
//! reference set.

use std::path::Path;
use std::sync::Arc;

use image::RgbImage;
use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{AttentionKind, LayerMap, LayerNumbering};
use super::{codec, text, Backbone, Capabilities, Conditioning, ExtraConditioning, ExtraPayload, LatentSpec, SlotKind};
use crate::archive::{Archive, F32Tensor};
use crate::attention::{AttentionInterceptor, HookSlot, LayerId};
use crate::error::{Result, SpgError};
use crate::schedule::ScheduleSpec;
use crate::tensor::{hex, Latent};

pub const DENOISER_FORMAT: &str = "spg-denoiser/1";

const RESIDUAL_SCALE: f32 = 0.2;
const CONTROL_SCALE: f32 = 0.5;
const OUTPUT_SCALE: f64 = 0.5;

/// One resolution stage: `attentions` transformer stacks of `depth` blocks,
/// each block holding one self- and one cross-attention layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub block: String,
    pub divisor: usize,
    pub attentions: usize,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserProfile {
    pub name: String,
    pub channels: usize,
    pub downsample: usize,
    pub hidden: usize,
    pub text_dim: usize,
    pub stages: Vec<StageSpec>,
    pub default_layer_count: usize,
    pub schedule: ScheduleSpec,
}

fn stage(block: &str, divisor: usize, attentions: usize, depth: usize) -> StageSpec {
    StageSpec {
        block: block.to_string(),
        divisor,
        attentions,
        depth,
    }
}

impl DenoiserProfile {
    /// SDXL-class layout: 70 self-attention layers, the last six in
    /// `up_blocks.1`.
    pub fn sdxl() -> Self {
        DenoiserProfile {
            name: "sdxl".into(),
            channels: 4,
            downsample: 8,
            hidden: 32,
            text_dim: 64,
            stages: vec![
                stage("down_blocks.1", 2, 2, 2),
                stage("down_blocks.2", 4, 2, 10),
                stage("mid_block", 4, 1, 10),
                stage("up_blocks.0", 4, 3, 10),
                stage("up_blocks.1", 2, 3, 2),
            ],
            default_layer_count: 6,
            schedule: ScheduleSpec::default(),
        }
    }

    /// SD1.5-class layout: 16 self-attention layers.
    pub fn sd15() -> Self {
        DenoiserProfile {
            name: "sd15".into(),
            channels: 4,
            downsample: 8,
            hidden: 32,
            text_dim: 64,
            stages: vec![
                stage("down_blocks.0", 1, 2, 1),
                stage("down_blocks.1", 2, 2, 1),
                stage("down_blocks.2", 4, 2, 1),
                stage("mid_block", 8, 1, 1),
                stage("up_blocks.1", 8, 3, 1),
                stage("up_blocks.2", 4, 3, 1),
                stage("up_blocks.3", 2, 3, 1),
            ],
            default_layer_count: 6,
            schedule: ScheduleSpec::default(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "sdxl" => Ok(Self::sdxl()),
            "sd15" => Ok(Self::sd15()),
            other => Err(SpgError::Configuration(format!(
                "unknown backbone profile `{other}` (expected sdxl or sd15)"
            ))),
        }
    }

    /// All attention layers in execution order.
    pub fn attention_layers(&self) -> Vec<(String, AttentionKind, usize)> {
        let mut out = Vec::new();
        for st in &self.stages {
            for a in 0..st.attentions {
                for b in 0..st.depth {
                    let base = format!("{}.attentions.{a}.transformer_blocks.{b}", st.block);
                    out.push((format!("{base}.attn1"), AttentionKind::SelfAttention, st.divisor));
                    out.push((format!("{base}.attn2"), AttentionKind::CrossAttention, st.divisor));
                }
            }
        }
        out
    }

    pub fn self_attention_count(&self) -> usize {
        self.stages.iter().map(|s| s.attentions * s.depth).sum()
    }

    fn max_divisor(&self) -> usize {
        self.stages.iter().map(|s| s.divisor).max().unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerWeights {
    wq: Array2<f32>,
    wk: Array2<f32>,
    wv: Array2<f32>,
    wo: Array2<f32>,
    cross: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
struct Weights {
    in_proj: Array2<f32>,
    t_proj: Array2<f32>,
    text_proj: Array2<f32>,
    ctrl_proj: Array2<f32>,
    ip_proj: Array2<f32>,
    out_proj: Array2<f32>,
    layers: Vec<LayerWeights>,
}

impl Weights {
    fn named(&self) -> Vec<(String, &Array2<f32>)> {
        let mut v = vec![
            ("in_proj".to_string(), &self.in_proj),
            ("t_proj".to_string(), &self.t_proj),
            ("text_proj".to_string(), &self.text_proj),
            ("ctrl_proj".to_string(), &self.ctrl_proj),
            ("ip_proj".to_string(), &self.ip_proj),
            ("out_proj".to_string(), &self.out_proj),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            v.push((format!("layers.{i}.wq"), &l.wq));
            v.push((format!("layers.{i}.wk"), &l.wk));
            v.push((format!("layers.{i}.wv"), &l.wv));
            v.push((format!("layers.{i}.wo"), &l.wo));
            v.push((format!("layers.{i}.cross"), &l.cross));
        }
        v
    }

    fn synthetic(p: &DenoiserProfile, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |rows: usize, cols: usize| -> Array2<f32> {
            let scale = 1.0 / (rows as f32).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || {
                let v: f32 = StandardNormal.sample(&mut rng);
                v * scale
            })
        };
        let (c, d, e) = (p.channels, p.hidden, p.text_dim);
        let in_proj = mat(c, d);
        let t_proj = mat(d, d);
        let text_proj = mat(e, d);
        let ctrl_proj = mat(c, d);
        let ip_proj = mat(e, d);
        let out_proj = mat(d, c);
        let layers = (0..p.self_attention_count())
            .map(|_| LayerWeights {
                wq: mat(d, d),
                wk: mat(d, d),
                wv: mat(d, d),
                wo: mat(d, d),
                cross: mat(e, d),
            })
            .collect();
        Weights {
            in_proj,
            t_proj,
            text_proj,
            ctrl_proj,
            ip_proj,
            out_proj,
            layers,
        }
    }

    fn from_archive(p: &DenoiserProfile, a: &Archive) -> Result<Self> {
        let (c, d, e) = (p.channels, p.hidden, p.text_dim);
        let get = |name: &str, rows: usize, cols: usize| -> Result<Array2<f32>> {
            let t = a.tensor(name)?;
            if t.shape != [rows, cols] {
                return Err(SpgError::Format(format!(
                    "weight `{name}` has shape {:?}, expected [{rows}, {cols}]",
                    t.shape
                )));
            }
            Array2::from_shape_vec((rows, cols), t.data.clone()).map_err(|e| SpgError::Format(e.to_string()))
        };
        let layers = (0..p.self_attention_count())
            .map(|i| {
                Ok(LayerWeights {
                    wq: get(&format!("layers.{i}.wq"), d, d)?,
                    wk: get(&format!("layers.{i}.wk"), d, d)?,
                    wv: get(&format!("layers.{i}.wv"), d, d)?,
                    wo: get(&format!("layers.{i}.wo"), d, d)?,
                    cross: get(&format!("layers.{i}.cross"), e, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Weights {
            in_proj: get("in_proj", c, d)?,
            t_proj: get("t_proj", d, d)?,
            text_proj: get("text_proj", e, d)?,
            ctrl_proj: get("ctrl_proj", c, d)?,
            ip_proj: get("ip_proj", e, d)?,
            out_proj: get("out_proj", d, c)?,
            layers,
        })
    }

    fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, w) in self.named() {
            h.update(name.as_bytes());
            for v in w.iter() {
                h.update(v.to_le_bytes());
            }
        }
        let d: [u8; 32] = h.finalize().into();
        hex(&d)
    }
}

/// Latent-diffusion backbone with hookable self-attention, patch codec,
/// prompt encoder and ControlNet/IP-Adapter-style conditioning slots.
#[derive(Debug, Clone)]
pub struct LatentDenoiser {
    id: String,
    profile: DenoiserProfile,
    weights: Arc<Weights>,
    weights_digest: String,
    layer_map: LayerMap,
    /// Published id of the i-th self-attention layer.
    hook_ids: Vec<LayerId>,
    spec: LatentSpec,
    caps: Capabilities,
    alpha_bar: Vec<f64>,
    hooks: HookSlot,
}

impl LatentDenoiser {
    fn assemble(profile: DenoiserProfile, weights: Weights, numbering: LayerNumbering) -> Self {
        let weights_digest = weights.digest();
        let layer_map = LayerMap::new(numbering, profile.attention_layers());
        let hook_ids = layer_map.self_attention_ids().collect();
        let spec = LatentSpec {
            channels: profile.channels,
            downsample: profile.downsample,
            latent_multiple: profile.max_divisor(),
        };
        let alpha_bar = profile.schedule.beta_schedule.alpha_bar(profile.schedule.train_steps);
        LatentDenoiser {
            id: format!("{}@{}", profile.name, &weights_digest[..12]),
            profile,
            weights: Arc::new(weights),
            weights_digest,
            layer_map,
            hook_ids,
            spec,
            caps: Capabilities {
                text_encoding: true,
                image_codec: true,
                slots: vec![SlotKind::StructuralResidual, SlotKind::ImagePromptTokens],
            },
            alpha_bar,
            hooks: HookSlot::default(),
        }
    }

    /// Seeded reference weights for `profile`.
    pub fn synthetic(profile: DenoiserProfile, seed: u64) -> Self {
        let w = Weights::synthetic(&profile, seed);
        Self::assemble(profile, w, LayerNumbering::default())
    }

    pub fn with_numbering(self, numbering: LayerNumbering) -> Self {
        let LatentDenoiser { profile, weights, .. } = self;
        let w = Arc::try_unwrap(weights).unwrap_or_else(|a| (*a).clone());
        Self::assemble(profile, w, numbering)
    }

    pub fn profile(&self) -> &DenoiserProfile {
        &self.profile
    }

    pub fn weights_digest(&self) -> &str {
        &self.weights_digest
    }

    /// Default hook selection: the profile's trailing self-attention layers.
    pub fn default_selection(&self) -> Result<crate::attention::LayerSelection> {
        self.layer_map.last_self_attention(self.profile.default_layer_count)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::default();
        a.metadata.insert("format".into(), DENOISER_FORMAT.into());
        a.metadata
            .insert("profile".into(), serde_json::to_string(&self.profile)?);
        for (name, w) in self.weights.named() {
            a.tensors.insert(
                name,
                F32Tensor::new(w.shape().to_vec(), w.iter().copied().collect())?,
            );
        }
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let format = a.meta("format")?;
        if format != DENOISER_FORMAT {
            return Err(SpgError::Format(format!("unsupported weights format `{format}`")));
        }
        let profile: DenoiserProfile = serde_json::from_str(a.meta("profile")?)?;
        let w = Weights::from_archive(&profile, a)?;
        Ok(Self::assemble(profile, w, LayerNumbering::default()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    fn timestep_embedding(&self, t: usize) -> Array1<f32> {
        let d = self.profile.hidden;
        let half = d / 2;
        let mut e = Array1::zeros(d);
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            e[i] = arg.sin() as f32;
            e[i + half] = arg.cos() as f32;
        }
        e.dot(&self.weights.t_proj)
    }
}

fn layer_norm(x: &Array2<f32>) -> Array2<f32> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.len() as f32;
        let m = row.sum() / n;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        row.mapv_inplace(|v| (v - m) * inv);
    }
    out
}

/// `softmax(q k^T / sqrt(d)) v`, row-wise stable softmax.
pub(crate) fn attention(q: &Array2<f32>, k: &Array2<f32>, v: &Array2<f32>) -> Array2<f32> {
    let scale = 1.0 / (q.ncols() as f32).sqrt();
    let mut scores = q.dot(&k.t()) * scale;
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let max = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|s| (s - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|s| s / sum);
    }
    scores.dot(v)
}

/// Average-pool row-major `(h*w, d)` tokens by `f` along both axes.
fn pool(x: &Array2<f32>, h: usize, w: usize, f: usize) -> Array2<f32> {
    if f == 1 {
        return x.clone();
    }
    let (hs, ws) = (h / f, w / f);
    let d = x.ncols();
    let mut out = Array2::zeros((hs * ws, d));
    let inv = 1.0 / (f * f) as f32;
    for y in 0..h {
        for xx in 0..w {
            let dst = (y / f) * ws + xx / f;
            let mut row = out.row_mut(dst);
            row.scaled_add(inv, &x.row(y * w + xx));
        }
    }
    out
}

/// Nearest-neighbour upsample of pooled tokens added into `x`.
fn add_upsampled(x: &mut Array2<f32>, delta: &Array2<f32>, h: usize, w: usize, f: usize) {
    let ws = w / f;
    for y in 0..h {
        for xx in 0..w {
            let src = (y / f) * ws + xx / f;
            let mut row = x.row_mut(y * w + xx);
            row += &delta.row(src);
        }
    }
}

fn latent_tokens(z: &Latent) -> Array2<f32> {
    let (c, h, w) = z.dim();
    let mut out = Array2::zeros((h * w, c));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[y * w + x, ch]] = z[[ch, y, x]] as f32;
            }
        }
    }
    out
}

impl Backbone for LatentDenoiser {
    fn id(&self) -> &str {
        &self.id
    }

    fn latent_spec(&self) -> &LatentSpec {
        &self.spec
    }

    fn layer_map(&self) -> &LayerMap {
        &self.layer_map
    }

    fn capabilities(&self) -> &Capabilities {
        &self.caps
    }

    fn hook_slot(&self) -> &HookSlot {
        &self.hooks
    }

    fn forward(
        &self,
        z_t: &Latent,
        t: usize,
        cond: &Conditioning,
        extra: Option<&ExtraConditioning>,
        hooks: &mut dyn AttentionInterceptor,
    ) -> Result<Latent> {
        self.spec.check_latent(z_t.dim())?;
        let a = *self.alpha_bar.get(t).ok_or_else(|| {
            SpgError::invalid(format!("timestep {t} outside [0, {})", self.alpha_bar.len()))
        })?;
        let p = &self.profile;
        let wts = &*self.weights;
        if cond.embedding.len() != p.text_dim {
            return Err(SpgError::invalid(format!(
                "conditioning width {} != {}",
                cond.embedding.len(),
                p.text_dim
            )));
        }
        let (_, h, w) = z_t.dim();

        let mut x = latent_tokens(z_t).dot(&wts.in_proj);
        let temb = self.timestep_embedding(t);
        let temb = temb + &cond.embedding.dot(&wts.text_proj);
        x += &temb;

        let mut ctx = cond.embedding.clone();
        match extra.map(ExtraConditioning::payload) {
            Some(ExtraPayload::Residual(hint)) => {
                if hint.dim() != z_t.dim() {
                    return Err(SpgError::invalid(format!(
                        "structural hint shape {:?} != latent {:?}",
                        hint.dim(),
                        z_t.dim()
                    )));
                }
                x.scaled_add(CONTROL_SCALE, &latent_tokens(hint).dot(&wts.ctrl_proj));
            }
            Some(ExtraPayload::Tokens(tokens)) => {
                if tokens.ncols() != p.text_dim || tokens.nrows() == 0 {
                    return Err(SpgError::invalid(format!(
                        "image prompt tokens must be (n, {}), got {:?}",
                        p.text_dim,
                        tokens.dim()
                    )));
                }
                let pooled = tokens.mean_axis(Axis(0)).expect("non-empty");
                x += &pooled.dot(&wts.ip_proj);
                ctx += &pooled;
            }
            None => {}
        }

        let mut layer_idx = 0;
        for st in &p.stages {
            let f = st.divisor;
            let mut hs = pool(&x, h, w, f);
            let start = hs.clone();
            for _ in 0..st.attentions * st.depth {
                let lw = &wts.layers[layer_idx];
                let n = layer_norm(&hs);
                let q = n.dot(&lw.wq);
                let mut k = n.dot(&lw.wk);
                let mut v = n.dot(&lw.wv);
                hooks.on_self_attention(self.hook_ids[layer_idx], &mut k, &mut v)?;
                let att = attention(&q, &k, &v);
                hs.scaled_add(RESIDUAL_SCALE, &att.dot(&lw.wo));
                let cross = ctx.dot(&lw.cross).mapv(f32::tanh) * RESIDUAL_SCALE;
                hs += &cross;
                layer_idx += 1;
            }
            add_upsampled(&mut x, &(hs - start), h, w, f);
        }

        let e = x.dot(&wts.out_proj);
        let sn = (1.0 - a).sqrt();
        let mut eps = z_t.mapv(|v| sn * v);
        let c = p.channels;
        for ch in 0..c {
            let mut plane = eps.slice_mut(s![ch, .., ..]);
            for y in 0..h {
                for xx in 0..w {
                    plane[[y, xx]] += OUTPUT_SCALE * (e[[y * w + xx, ch]] as f64).tanh();
                }
            }
        }
        if !eps.iter().all(|v| v.is_finite()) {
            return Err(SpgError::Numeric("denoiser produced non-finite output".into()));
        }
        Ok(eps)
    }

    fn encode_text(&self, prompt: &str) -> Result<Conditioning> {
        Ok(text::encode(prompt, self.profile.text_dim))
    }

    fn encode_image(&self, image: &RgbImage) -> Result<Latent> {
        self.spec.latent_shape(image.width(), image.height())?;
        codec::encode(image, self.spec.downsample)
    }

    fn decode_latent(&self, z: &Latent) -> Result<RgbImage> {
        self.spec.check_latent(z.dim())?;
        codec::decode(z, self.spec.downsample)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionHookPlan, OperandProbe};
    use crate::tensor::gaussian_latent;

    fn small() -> LatentDenoiser {
        LatentDenoiser::synthetic(DenoiserProfile::sdxl(), 7)
    }

    #[test]
    fn profile_layer_counts() {
        let sdxl = small();
        assert_eq!(sdxl.layer_map().len(), 70);
        assert_eq!(sdxl.default_selection().unwrap().ids(), &[65, 66, 67, 68, 69, 70]);
        assert!(sdxl.layer_map().get(65).unwrap().name.starts_with("up_blocks.1"));
        let sd15 = LatentDenoiser::synthetic(DenoiserProfile::sd15(), 7);
        assert_eq!(sd15.layer_map().len(), 16);
        assert_eq!(sd15.default_selection().unwrap().ids(), &[11, 12, 13, 14, 15, 16]);
    }

    #[test]
    fn latent_shape_for_1024() {
        let b = small();
        assert_eq!(b.latent_spec().latent_shape(1024, 1024).unwrap(), (4, 128, 128));
        assert!(b.latent_spec().latent_shape(1000, 1024).is_err());
    }

    #[test]
    fn deterministic_forward() {
        let b = small();
        let z = gaussian_latent((4, 8, 8), 1);
        let c = b.encode_text("a red guitar").unwrap();
        let e1 = b.predict_noise(&z, 500, &c, None, None).unwrap();
        let e2 = b.predict_noise(&z, 500, &c, None, None).unwrap();
        assert_eq!(e1, e2);
        let u = b.encode_text("").unwrap();
        assert_ne!(e1, b.predict_noise(&z, 500, &u, None, None).unwrap());
    }

    #[test]
    fn passthrough_equals_no_hooks() {
        let b = small();
        let z = gaussian_latent((4, 8, 8), 2);
        let c = b.encode_text("").unwrap();
        let plan = AttentionHookPlan::passthrough(b.default_selection().unwrap());
        assert_eq!(
            b.predict_noise(&z, 300, &c, Some(&plan), None).unwrap(),
            b.predict_noise(&z, 300, &c, None, None).unwrap()
        );
    }

    #[test]
    fn reports_every_self_attention_layer_in_order() {
        let b = small();
        let z = gaussian_latent((4, 8, 8), 3);
        let mut probe = OperandProbe::default();
        b.forward(&z, 10, &b.encode_text("").unwrap(), None, &mut probe).unwrap();
        let ids: Vec<_> = probe.records.iter().map(|r| r.layer).collect();
        assert_eq!(ids, (1..=70).collect::<Vec<_>>());
    }

    #[test]
    fn weights_archive_round_trip() {
        let b = small();
        let back = LatentDenoiser::from_archive(&Archive::from_bytes(&b.to_archive().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.id(), b.id());
        assert_eq!(back.layer_map().digest(), b.layer_map().digest());
    }

    #[test]
    fn extra_slots() {
        let b = small();
        let z = gaussian_latent((4, 8, 8), 4);
        let c = b.encode_text("deer").unwrap();
        let plain = b.predict_noise(&z, 400, &c, None, None).unwrap();
        let hint = ExtraConditioning::structural_residual(gaussian_latent((4, 8, 8), 5));
        assert_ne!(plain, b.predict_noise(&z, 400, &c, None, Some(&hint)).unwrap());
        let bad = ExtraConditioning::structural_residual(gaussian_latent((4, 4, 4), 5));
        assert!(b.predict_noise(&z, 400, &c, None, Some(&bad)).is_err());
        let ip = ExtraConditioning::image_prompt_tokens(Array2::ones((3, 64)));
        assert_ne!(plain, b.predict_noise(&z, 400, &c, None, Some(&ip)).unwrap());
    }

    #[test]
    fn all_attention_numbering_shifts_ids() {
        let b = small().with_numbering(LayerNumbering::AllAttention);
        assert_eq!(b.layer_map().len(), 140);
        let sel = b.default_selection().unwrap();
        assert_eq!(sel.ids(), &[129, 131, 133, 135, 137, 139]);
    }
}
