//! Single-file tensor archives: named little-endian `f32` tensors with
//! explicit shapes plus a string metadata map (safetensors layout).
//!
//! The metadata map is written as one JSON-encoded entry so the header
//! bytes do not depend on hash-map iteration order.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{Result, SpgError};

const META_KEY: &str = "spg";

#[derive(Debug, Clone, PartialEq)]
pub struct F32Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl F32Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(SpgError::Format(format!(
                "shape {shape:?} does not match {} elements",
                data.len()
            )));
        }
        Ok(F32Tensor { shape, data })
    }
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct Archive {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, F32Tensor>,
}

impl Archive {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let raw = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.clone(), raw, t.shape.clone())
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(name, raw, shape)| Ok((name.as_str(), TensorView::new(Dtype::F32, shape.clone(), raw)?)))
            .collect::<Result<Vec<_>>>()?;
        let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&self.metadata)?)]);
        Ok(safetensors::serialize(views, Some(meta))?)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(buf)?;
        let metadata = match header.metadata().as_ref().and_then(|m| m.get(META_KEY)) {
            Some(json) => serde_json::from_str(json)?,
            None => BTreeMap::new(),
        };
        let st = SafeTensors::deserialize(buf)?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(SpgError::Format(format!(
                    "tensor `{name}` has dtype {:?}, expected F32",
                    view.dtype()
                )));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, F32Tensor::new(view.shape().to_vec(), data)?);
        }
        Ok(Archive { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Result<&F32Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| SpgError::Format(format!("archive lacks tensor `{name}`")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| SpgError::Format(format!("archive lacks metadata `{key}`")))
    }
}
