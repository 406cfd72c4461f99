//! Bag-of-words prompt encoder with hash-seeded word vectors.

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::Conditioning;

pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn word_vector(word: &str, dim: usize) -> Array1<f32> {
    let digest = Sha256::digest(format!("spg-text:{word}").as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    Array1::from_shape_simple_fn(dim, || StandardNormal.sample(&mut rng))
}

/// The empty prompt maps to the zero vector; anything else to the
/// normalized sum of its word vectors.
pub fn encode(prompt: &str, dim: usize) -> Conditioning {
    let words = tokenize(prompt);
    let mut e = Array1::<f32>::zeros(dim);
    for w in &words {
        e += &word_vector(w, dim);
    }
    if !words.is_empty() {
        e /= (words.len() as f32).sqrt();
    }
    Conditioning {
        prompt: prompt.to_string(),
        embedding: e,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_prompt_is_zero() {
        let c = encode("", 16);
        assert!(c.is_unconditional());
        assert!(c.embedding.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_and_case_insensitive() {
        assert_eq!(encode("A red Guitar", 16).embedding, encode("a red guitar", 16).embedding);
        assert_ne!(encode("guitar", 16).embedding, encode("deer", 16).embedding);
    }
}
