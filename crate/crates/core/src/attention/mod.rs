//! Self-attention K/V recording and replacement.
//!
//! Backbones expose every hookable self-attention layer to an
//! [`AttentionInterceptor`] right after the K/V projections. A hook plan
//! either records those operands, swaps them for cached ones, or leaves
//! them alone.

mod cache;
mod extract;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Conditioning, ExtraConditioning};
use crate::error::{Result, SpgError};
use crate::tensor::{hash_attn, AttnTensor, Latent};

pub use cache::{CacheManifest, KvPair, StyleFeatureCache, CACHE_FORMAT_VERSION};
pub use extract::{extract_style_features, extract_style_features_with, ExtractOptions, ExtractionMode};

/// 1-based index of a self-attention layer in backbone execution order.
pub type LayerId = u32;

/// Ordered, duplicate-free set of self-attention layer ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<LayerId>", into = "Vec<LayerId>")]
pub struct LayerSelection {
    ids: Vec<LayerId>,
}

impl LayerSelection {
    pub fn new(ids: impl IntoIterator<Item = LayerId>) -> Result<Self> {
        let mut ids: Vec<LayerId> = ids.into_iter().collect();
        ids.sort_unstable();
        let before = ids.len();
        ids.dedup();
        if ids.len() != before {
            return Err(SpgError::invalid("layer selection contains duplicates"));
        }
        if ids.is_empty() {
            return Err(SpgError::invalid("layer selection is empty"));
        }
        if ids[0] == 0 {
            return Err(SpgError::invalid("layer ids are 1-based"));
        }
        Ok(LayerSelection { ids })
    }

    /// The last `n` of `total` layers.
    pub fn last(n: u32, total: u32) -> Result<Self> {
        if n == 0 || n > total {
            return Err(SpgError::invalid(format!("cannot select last {n} of {total} layers")));
        }
        Self::new(total - n + 1..=total)
    }

    pub fn all(total: u32) -> Result<Self> {
        Self::new(1..=total)
    }

    /// Parses `all`, `last<N>`, or comma-separated ids and inclusive ranges
    /// such as `65-70` or `1,3,10-12`.
    pub fn parse(s: &str, total: u32) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Self::all(total);
        }
        if let Some(n) = s.strip_prefix("last") {
            let n: u32 = n
                .parse()
                .map_err(|_| SpgError::invalid(format!("bad layer spec `{s}`")))?;
            return Self::last(n, total);
        }
        let mut ids = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            let bad = || SpgError::invalid(format!("bad layer spec `{part}`"));
            match part.split_once('-') {
                Some((a, b)) => {
                    let (a, b): (LayerId, LayerId) =
                        (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                    if a > b {
                        return Err(bad());
                    }
                    ids.extend(a..=b);
                }
                None => ids.push(part.parse().map_err(|_| bad())?),
            }
        }
        let sel = Self::new(ids)?;
        sel.check_bounds(total)?;
        Ok(sel)
    }

    pub fn check_bounds(&self, total: u32) -> Result<()> {
        match self.ids.last() {
            Some(&max) if max > total => Err(SpgError::Configuration(format!(
                "layer {max} outside 1..={total}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn ids(&self) -> &[LayerId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: LayerId) -> bool {
        self.ids.binary_search(&id).is_ok()
    }
}

impl TryFrom<Vec<LayerId>> for LayerSelection {
    type Error = SpgError;
    fn try_from(v: Vec<LayerId>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LayerSelection> for Vec<LayerId> {
    fn from(s: LayerSelection) -> Self {
        s.ids
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Compress runs: 1-4,7
        let mut first = true;
        let mut i = 0;
        while i < self.ids.len() {
            let start = self.ids[i];
            let mut end = start;
            while i + 1 < self.ids.len() && self.ids[i + 1] == end + 1 {
                i += 1;
                end += 1;
            }
            if !first {
                write!(f, ",")?;
            }
            first = false;
            if start == end {
                write!(f, "{start}")?;
            } else {
                write!(f, "{start}-{end}")?;
            }
            i += 1;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookMode {
    Record,
    Replace,
    Passthrough,
}

/// What a hooked forward pass should do at each selected layer.
#[derive(Debug, Clone)]
pub struct AttentionHookPlan {
    pub mode: HookMode,
    pub selection: LayerSelection,
    pub cache: Option<Arc<StyleFeatureCache>>,
    /// Sampling step index into the schedule the cache was extracted with.
    pub step: usize,
}

impl AttentionHookPlan {
    pub fn passthrough(selection: LayerSelection) -> Self {
        AttentionHookPlan {
            mode: HookMode::Passthrough,
            selection,
            cache: None,
            step: 0,
        }
    }

    pub fn record(selection: LayerSelection, step: usize) -> Self {
        AttentionHookPlan {
            mode: HookMode::Record,
            selection,
            cache: None,
            step,
        }
    }

    pub fn replace(selection: LayerSelection, cache: Arc<StyleFeatureCache>, step: usize) -> Self {
        AttentionHookPlan {
            mode: HookMode::Replace,
            selection,
            cache: Some(cache),
            step,
        }
    }

    /// Replace mode needs a cache entry for this step at every selected layer.
    pub fn validate(&self) -> Result<()> {
        if self.mode != HookMode::Replace {
            return Ok(());
        }
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| SpgError::Configuration("replace hooks need a feature cache".into()))?;
        for &layer in self.selection.ids() {
            cache.get(self.step, layer)?;
        }
        Ok(())
    }
}

/// Receives the K/V operands of every hookable self-attention layer.
pub trait AttentionInterceptor {
    /// `k` and `v` hold the locally projected operands; an interceptor may
    /// overwrite them to change what the attention computes.
    fn on_self_attention(&mut self, layer: LayerId, k: &mut AttnTensor, v: &mut AttnTensor) -> Result<()>;
}

/// No hooks at all.
pub struct NoHooks;

impl AttentionInterceptor for NoHooks {
    fn on_self_attention(&mut self, _: LayerId, _: &mut AttnTensor, _: &mut AttnTensor) -> Result<()> {
        Ok(())
    }
}

/// Hashes of the operands a layer actually attended with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperandRecord {
    pub layer: LayerId,
    pub k_hash: [u8; 32],
    pub v_hash: [u8; 32],
}

/// Guards against two hook plans being active on one backbone instance.
#[derive(Debug, Default)]
pub struct HookSlot {
    active: AtomicBool,
}

impl HookSlot {
    fn acquire(&self, backbone_id: &str) -> Result<()> {
        self.active
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .map(|_| ())
            .map_err(|_| SpgError::HookConflict(backbone_id.to_string()))
    }

    fn release(&self) {
        self.active.store(false, Ordering::Release);
    }

    pub fn is_active(&self) -> bool {
        self.active.load(Ordering::Acquire)
    }
}

impl Clone for HookSlot {
    fn clone(&self) -> Self {
        HookSlot::default()
    }
}

struct PlanExecutor<'p> {
    plan: &'p AttentionHookPlan,
    recorded: &'p mut BTreeMap<LayerId, KvPair>,
    probe: Option<&'p mut Vec<OperandRecord>>,
}

impl AttentionInterceptor for PlanExecutor<'_> {
    fn on_self_attention(&mut self, layer: LayerId, k: &mut AttnTensor, v: &mut AttnTensor) -> Result<()> {
        if self.plan.selection.contains(layer) {
            match self.plan.mode {
                HookMode::Passthrough => {}
                HookMode::Record => {
                    self.recorded.insert(
                        layer,
                        KvPair {
                            k: k.clone(),
                            v: v.clone(),
                        },
                    );
                }
                HookMode::Replace => {
                    let cache = self.plan.cache.as_ref().ok_or_else(|| {
                        SpgError::Configuration("replace hooks need a feature cache".into())
                    })?;
                    let entry = cache.get(self.plan.step, layer)?;
                    if entry.k.ncols() != k.ncols() || entry.v.ncols() != v.ncols() {
                        return Err(SpgError::invalid(format!(
                            "cached operands at layer {layer} have width {}/{}, backbone expects {}/{}",
                            entry.k.ncols(),
                            entry.v.ncols(),
                            k.ncols(),
                            v.ncols()
                        )));
                    }
                    k.clone_from(&entry.k);
                    v.clone_from(&entry.v);
                }
            }
        }
        if let Some(probe) = self.probe.as_deref_mut() {
            probe.push(OperandRecord {
                layer,
                k_hash: hash_attn(k),
                v_hash: hash_attn(v),
            });
        }
        Ok(())
    }
}

/// An active hook plan on one backbone. Dropping it deactivates the hooks.
pub struct HookHandle<'b, B: Backbone + ?Sized> {
    backbone: &'b B,
    plan: AttentionHookPlan,
    recorded: BTreeMap<LayerId, KvPair>,
    probe: Option<Vec<OperandRecord>>,
}

/// Activate `plan` on `backbone`.
pub fn apply_hooks<'b, B: Backbone + ?Sized>(plan: AttentionHookPlan, backbone: &'b B) -> Result<HookHandle<'b, B>> {
    plan.selection
        .check_bounds(backbone.layer_map().len() as u32)?;
    backbone.layer_map().check_hookable(&plan.selection)?;
    plan.validate()?;
    backbone.hook_slot().acquire(backbone.id())?;
    Ok(HookHandle {
        backbone,
        plan,
        recorded: BTreeMap::new(),
        probe: None,
    })
}

impl<B: Backbone + ?Sized> HookHandle<'_, B> {
    pub fn plan(&self) -> &AttentionHookPlan {
        &self.plan
    }

    /// Record operand hashes at every layer during subsequent passes.
    pub fn with_probe(mut self) -> Self {
        self.probe = Some(Vec::new());
        self
    }

    pub fn predict_noise(
        &mut self,
        z_t: &Latent,
        t: usize,
        cond: &Conditioning,
        extra: Option<&ExtraConditioning>,
    ) -> Result<Latent> {
        if let Some(extra) = extra {
            self.backbone.capabilities().check_slot(extra.kind())?;
        }
        let mut exec = PlanExecutor {
            plan: &self.plan,
            recorded: &mut self.recorded,
            probe: self.probe.as_mut(),
        };
        self.backbone.forward(z_t, t, cond, extra, &mut exec)
    }

    pub fn take_recorded(&mut self) -> BTreeMap<LayerId, KvPair> {
        std::mem::take(&mut self.recorded)
    }

    pub fn take_probe(&mut self) -> Vec<OperandRecord> {
        self.probe.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

impl<B: Backbone + ?Sized> Drop for HookHandle<'_, B> {
    fn drop(&mut self) {
        self.backbone.hook_slot().release();
    }
}

/// Interceptor that only hashes operands, for comparing un-hooked passes.
#[derive(Default)]
pub struct OperandProbe {
    pub records: Vec<OperandRecord>,
}

impl AttentionInterceptor for OperandProbe {
    fn on_self_attention(&mut self, layer: LayerId, k: &mut AttnTensor, v: &mut AttnTensor) -> Result<()> {
        self.records.push(OperandRecord {
            layer,
            k_hash: hash_attn(k),
            v_hash: hash_attn(v),
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_parse_forms() {
        assert_eq!(LayerSelection::parse("last6", 70).unwrap().ids(), &[65, 66, 67, 68, 69, 70]);
        assert_eq!(LayerSelection::parse("65-70", 70).unwrap(), LayerSelection::last(6, 70).unwrap());
        assert_eq!(LayerSelection::parse("all", 70).unwrap().len(), 70);
        assert_eq!(LayerSelection::parse("3, 1,10-12", 70).unwrap().ids(), &[1, 3, 10, 11, 12]);
        assert!(LayerSelection::parse("71", 70).is_err());
        assert!(LayerSelection::parse("0-3", 70).is_err());
        assert!(LayerSelection::parse("5-3", 70).is_err());
        assert!(LayerSelection::parse("x", 70).is_err());
    }

    #[test]
    fn selection_rejects_duplicates() {
        assert!(LayerSelection::new([3, 3]).is_err());
        assert!(LayerSelection::parse("1-3,2", 10).is_err());
    }

    #[test]
    fn selection_display_round_trips() {
        let s = LayerSelection::new([1, 2, 3, 7, 9, 10]).unwrap();
        assert_eq!(s.to_string(), "1-3,7,9-10");
        assert_eq!(LayerSelection::parse(&s.to_string(), 10).unwrap(), s);
    }

    #[test]
    fn selection_serde() {
        let s = LayerSelection::last(6, 70).unwrap();
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, "[65,66,67,68,69,70]");
        let back: LayerSelection = serde_json::from_str(&j).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<LayerSelection>("[2,2]").is_err());
    }
}
