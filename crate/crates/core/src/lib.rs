//! Style-prompting guidance for latent diffusion.
//!
//! A style branch is the unconditional prediction with selected
//! self-attention K/V swapped for features recorded from a style image. Its
//! difference from the unconditional prediction is added as a second
//! guidance direction next to classifier-free guidance.
//!
//! ```
//! use spg_core::guidance::{combine_joint, GuidanceWeights, NoiseTriple};
//! use spg_core::tensor::Latent;
//!
//! let e = |v: f64| Latent::from_elem((1, 1, 1), v);
//! let triple = NoiseTriple::full(e(1.0), e(0.5), e(2.0)).unwrap();
//! let w = GuidanceWeights::new(7.0, 3.0).unwrap();
//! assert_eq!(combine_joint(&triple, &w).unwrap()[[0, 0, 0]], 8.5);
//! ```

pub mod archive;
pub mod attention;
pub mod backbone;
pub mod error;
pub mod guidance;
pub mod oracle;
pub mod par;
pub mod pipeline;
pub mod sampler;
pub mod schedule;
pub mod tensor;

pub use error::{Result, SpgError};
