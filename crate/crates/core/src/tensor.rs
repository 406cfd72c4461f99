//! Tensor aliases and small numeric helpers shared across the crate.
//!
//! Latents are `(channels, height, width)` arrays in `f64`. Attention
//! operands (the K/V tensors that get recorded and replaced) are
//! `(tokens, dim)` arrays in `f32`, which is also their on-disk precision.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Result, SpgError};

pub type Latent = Array3<f64>;
pub type AttnTensor = Array2<f32>;

/// Shape of a latent as `(channels, height, width)`.
pub type LatentShape = (usize, usize, usize);

pub fn shape_of(z: &Latent) -> LatentShape {
    z.dim()
}

pub fn ensure_same_shape(a: &Latent, b: &Latent, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(SpgError::invalid(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

pub fn all_finite(z: &Latent) -> bool {
    z.iter().all(|v| v.is_finite())
}

pub fn l2_norm(z: &Latent) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Deterministic standard-normal tensor drawn from a ChaCha8 stream.
pub fn gaussian_latent(shape: LatentShape, seed: u64) -> Latent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Latent::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

/// Round every element through `f32`, so the values survive an `f32`
/// archive without change.
pub fn quantize_f32(z: &Latent) -> Latent {
    z.mapv(|v| v as f32 as f64)
}

pub fn latent_to_f32(z: &Latent) -> Vec<f32> {
    z.iter().map(|&v| v as f32).collect()
}

/// SHA-256 over the shape and little-endian bytes of an attention operand.
pub fn hash_attn(t: &AttnTensor) -> [u8; 32] {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.iter() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

pub fn hash_latent(z: &Latent) -> [u8; 32] {
    let mut h = Sha256::new();
    for d in z.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in z.iter() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
