use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ExtractionMode, LayerId, LayerSelection};
use crate::archive::{Archive, F32Tensor};
use crate::error::{Result, SpgError};
use crate::schedule::{forward_noise, DiffusionSchedule};
use crate::tensor::{gaussian_latent, hex, latent_to_f32, AttnTensor, Latent, LatentShape};

pub const CACHE_FORMAT_VERSION: u32 = 1;

const MANIFEST_KEY: &str = "manifest";
const STYLE_LATENT_KEY: &str = "style/latent";

/// One recorded pair of attention operands.
#[derive(Debug, Clone, PartialEq)]
pub struct KvPair {
    pub k: AttnTensor,
    pub v: AttnTensor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub format_version: u32,
    pub schedule_id: String,
    pub backbone_id: String,
    pub layer_map_digest: String,
    pub layer_ids: LayerSelection,
    /// Train timesteps of the sampling steps, in sampling order.
    pub timesteps: Vec<usize>,
    /// `[channels, height, width]` of the style latent.
    pub latent_shape: [usize; 3],
    pub seed: u64,
    pub extraction: ExtractionMode,
    pub style_image_id: String,
}

/// Style K/V features for every (sampling step, selected layer).
///
/// Built once by extraction and never mutated afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleFeatureCache {
    manifest: CacheManifest,
    entries: BTreeMap<(usize, LayerId), KvPair>,
    /// Clean style latent, already rounded to `f32` precision.
    style_latent: Latent,
    /// Per-step style latents for inversion extraction, where the noisy
    /// trajectory has no closed form.
    trajectory: Option<Vec<Latent>>,
}

fn entry_key(step: usize, layer: LayerId, part: char) -> String {
    format!("t{step}/layer{layer}/{part}")
}

fn latent_key(step: usize) -> String {
    format!("t{step}/latent")
}

impl StyleFeatureCache {
    pub(crate) fn from_parts(
        manifest: CacheManifest,
        entries: BTreeMap<(usize, LayerId), KvPair>,
        style_latent: Latent,
        trajectory: Option<Vec<Latent>>,
    ) -> Result<Self> {
        let cache = StyleFeatureCache {
            manifest,
            entries,
            style_latent,
            trajectory,
        };
        cache.check_complete()?;
        cache.check_shapes()?;
        Ok(cache)
    }

    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.manifest.timesteps.len()
    }

    pub fn style_latent(&self) -> &Latent {
        &self.style_latent
    }

    pub fn latent_shape(&self) -> LatentShape {
        let [c, h, w] = self.manifest.latent_shape;
        (c, h, w)
    }

    pub fn get(&self, step: usize, layer: LayerId) -> Result<&KvPair> {
        self.entries
            .get(&(step, layer))
            .ok_or(SpgError::CacheMiss { step, layer })
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(usize, LayerId), &KvPair)> {
        self.entries.iter()
    }

    /// A copy of this cache lacking one entry. Sampling with it must fail.
    pub fn without_entry(&self, step: usize, layer: LayerId) -> Self {
        let mut c = self.clone();
        c.entries.remove(&(step, layer));
        c
    }

    /// Every (step, selected layer) present exactly once, nothing else.
    pub fn check_complete(&self) -> Result<()> {
        for step in 0..self.steps() {
            for &layer in self.manifest.layer_ids.ids() {
                self.get(step, layer)?;
            }
        }
        let expected = self.steps() * self.manifest.layer_ids.len();
        if self.entries.len() != expected {
            return Err(SpgError::Format(format!(
                "cache holds {} entries, manifest implies {expected}",
                self.entries.len()
            )));
        }
        Ok(())
    }

    fn check_shapes(&self) -> Result<()> {
        let mut per_layer: BTreeMap<LayerId, (&[usize], &[usize])> = BTreeMap::new();
        for ((step, layer), kv) in &self.entries {
            let shapes = (kv.k.shape(), kv.v.shape());
            match per_layer.get(layer) {
                Some(&first) if first != shapes => {
                    return Err(SpgError::Format(format!(
                        "layer {layer} operand shapes change at step {step}"
                    )))
                }
                Some(_) => {}
                None => {
                    per_layer.insert(*layer, shapes);
                }
            }
        }
        if self.style_latent.dim() != self.latent_shape() {
            return Err(SpgError::Format("style latent shape disagrees with manifest".into()));
        }
        if let Some(traj) = &self.trajectory {
            if traj.len() != self.steps() || traj.iter().any(|z| z.dim() != self.latent_shape()) {
                return Err(SpgError::Format("style trajectory malformed".into()));
            }
        }
        Ok(())
    }

    /// Whether this cache was extracted under `schedule`.
    pub fn check_schedule(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if self.manifest.schedule_id != schedule.id() {
            return Err(SpgError::Configuration(format!(
                "feature cache bound to schedule {}, sampler uses {}",
                self.manifest.schedule_id,
                schedule.id()
            )));
        }
        Ok(())
    }

    /// The style latent at the noise level of sampling step `step`.
    ///
    /// Forward-noise caches recompute it from the clean latent and the
    /// extraction seed, so it is the same trajectory the features came from.
    pub fn style_reference(&self, step: usize, schedule: &DiffusionSchedule) -> Result<Latent> {
        if let Some(traj) = &self.trajectory {
            return traj
                .get(step)
                .cloned()
                .ok_or_else(|| SpgError::invalid(format!("no style latent for step {step}")));
        }
        let noise = gaussian_latent(self.latent_shape(), self.manifest.seed);
        forward_noise(&self.style_latent, schedule.timestep(step)?, &noise, schedule)
    }

    fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::default();
        a.metadata
            .insert(MANIFEST_KEY.into(), serde_json::to_string(&self.manifest)?);
        for ((step, layer), kv) in &self.entries {
            for (part, t) in [('K', &kv.k), ('V', &kv.v)] {
                a.tensors.insert(
                    entry_key(*step, *layer, part),
                    F32Tensor::new(t.shape().to_vec(), t.iter().copied().collect())?,
                );
            }
        }
        let shape = self.style_latent.shape().to_vec();
        a.tensors.insert(
            STYLE_LATENT_KEY.into(),
            F32Tensor::new(shape.clone(), latent_to_f32(&self.style_latent))?,
        );
        if let Some(traj) = &self.trajectory {
            for (step, z) in traj.iter().enumerate() {
                a.tensors
                    .insert(latent_key(step), F32Tensor::new(shape.clone(), latent_to_f32(z))?);
            }
        }
        Ok(a)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_archive()?.to_bytes()
    }

    /// Parse an archive. Completeness is not required here; a missing
    /// entry surfaces as a cache miss when sampling reaches it.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let a = Archive::from_bytes(buf)?;
        let manifest: CacheManifest = serde_json::from_str(a.meta(MANIFEST_KEY)?)?;
        if manifest.format_version != CACHE_FORMAT_VERSION {
            return Err(SpgError::Format(format!(
                "unsupported cache format version {}",
                manifest.format_version
            )));
        }
        let to_latent = |t: &F32Tensor| -> Result<Latent> {
            match t.shape.as_slice() {
                &[c, h, w] => Ok(Latent::from_shape_vec((c, h, w), t.data.iter().map(|&v| v as f64).collect())
                    .map_err(|e| SpgError::Format(e.to_string()))?),
                other => Err(SpgError::Format(format!("latent tensor has shape {other:?}"))),
            }
        };
        let to_attn = |t: &F32Tensor| -> Result<AttnTensor> {
            match t.shape.as_slice() {
                &[r, c] => Array2::from_shape_vec((r, c), t.data.clone()).map_err(|e| SpgError::Format(e.to_string())),
                other => Err(SpgError::Format(format!("attention tensor has shape {other:?}"))),
            }
        };
        let style_latent = to_latent(a.tensor(STYLE_LATENT_KEY)?)?;
        let mut entries = BTreeMap::new();
        let mut trajectory = BTreeMap::new();
        for name in a.tensors.keys() {
            if name == STYLE_LATENT_KEY {
                continue;
            }
            let bad = || SpgError::Format(format!("unexpected tensor `{name}`"));
            let rest = name.strip_prefix('t').ok_or_else(bad)?;
            let (step, rest) = rest.split_once('/').ok_or_else(bad)?;
            let step: usize = step.parse().map_err(|_| bad())?;
            if rest == "latent" {
                trajectory.insert(step, to_latent(&a.tensors[name])?);
                continue;
            }
            let (layer, part) = rest.strip_prefix("layer").and_then(|r| r.split_once('/')).ok_or_else(bad)?;
            let layer: LayerId = layer.parse().map_err(|_| bad())?;
            if part == "V" {
                continue;
            }
            if part != "K" {
                return Err(bad());
            }
            let k = to_attn(&a.tensors[name])?;
            let v = to_attn(a.tensor(&entry_key(step, layer, 'V'))?)?;
            entries.insert((step, layer), KvPair { k, v });
        }
        let trajectory = match manifest.extraction {
            ExtractionMode::ForwardNoise => None,
            ExtractionMode::DdimInversion => Some(trajectory.into_values().collect()),
        };
        let cache = StyleFeatureCache {
            manifest,
            entries,
            style_latent,
            trajectory,
        };
        cache.check_shapes()?;
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized cache, hex encoded.
    pub fn digest(&self) -> Result<String> {
        let d: [u8; 32] = Sha256::digest(self.to_bytes()?).into();
        Ok(hex(&d))
    }
}
