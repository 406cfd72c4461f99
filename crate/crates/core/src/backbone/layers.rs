use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{LayerId, LayerSelection};
use crate::error::{Result, SpgError};
use crate::tensor::hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    SelfAttention,
    CrossAttention,
}

/// How published layer ids count attention layers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerNumbering {
    /// Ids count self-attention layers only, so an SDXL-class UNet has
    /// ids 1..=70.
    #[default]
    SelfAttentionOnly,
    /// Ids count every attention layer (self and cross, interleaved);
    /// only the self-attention ids are hookable.
    AllAttention,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub id: LayerId,
    pub name: String,
    pub kind: AttentionKind,
    /// Latent-to-token downsampling factor at this layer.
    pub divisor: usize,
}

/// Published id → hook point map of a backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMap {
    numbering: LayerNumbering,
    layers: Vec<LayerDescriptor>,
}

impl LayerMap {
    /// `layers` are listed in execution order; ids are assigned densely
    /// from 1 according to `numbering`.
    pub fn new(numbering: LayerNumbering, layers: Vec<(String, AttentionKind, usize)>) -> Self {
        let layers = layers
            .into_iter()
            .filter(|(_, kind, _)| {
                numbering == LayerNumbering::AllAttention || *kind == AttentionKind::SelfAttention
            })
            .enumerate()
            .map(|(i, (name, kind, divisor))| LayerDescriptor {
                id: i as LayerId + 1,
                name,
                kind,
                divisor,
            })
            .collect();
        LayerMap { numbering, layers }
    }

    pub fn numbering(&self) -> LayerNumbering {
        self.numbering
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[LayerDescriptor] {
        &self.layers
    }

    pub fn get(&self, id: LayerId) -> Option<&LayerDescriptor> {
        self.layers.get((id as usize).checked_sub(1)?)
    }

    pub fn self_attention_ids(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.layers
            .iter()
            .filter(|d| d.kind == AttentionKind::SelfAttention)
            .map(|d| d.id)
    }

    pub fn self_attention_count(&self) -> usize {
        self.self_attention_ids().count()
    }

    /// The last `n` self-attention layers, whatever the numbering.
    pub fn last_self_attention(&self, n: usize) -> Result<LayerSelection> {
        let ids: Vec<LayerId> = self.self_attention_ids().collect();
        if n == 0 || n > ids.len() {
            return Err(SpgError::invalid(format!(
                "cannot select last {n} of {} self-attention layers",
                ids.len()
            )));
        }
        LayerSelection::new(ids[ids.len() - n..].iter().copied())
    }

    pub fn all_self_attention(&self) -> Result<LayerSelection> {
        LayerSelection::new(self.self_attention_ids())
    }

    pub fn check_hookable(&self, selection: &LayerSelection) -> Result<()> {
        for &id in selection.ids() {
            match self.get(id) {
                Some(d) if d.kind == AttentionKind::SelfAttention => {}
                Some(d) => {
                    return Err(SpgError::Configuration(format!(
                        "layer {id} (`{}`) is cross-attention, not hookable",
                        d.name
                    )))
                }
                None => {
                    return Err(SpgError::Configuration(format!(
                        "layer {id} outside 1..={}",
                        self.layers.len()
                    )))
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 over the numbering and every descriptor.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("layer map serializes"));
        let d: [u8; 32] = h.finalize().into();
        hex(&d)
    }
}
