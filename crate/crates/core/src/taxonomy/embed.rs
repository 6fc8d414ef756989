use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::Scalar;

/// Frozen label embedder.
///
/// Hashes `(seed, name)` into a generator seed, draws `embed_dim` standard
/// normals and normalizes to unit length. A pure function: the same inputs
/// always give the same vector.
pub fn embed_label<T: Scalar>(name: &str, embed_dim: usize, seed: u64) -> Vec<T> {
    assert!(!name.is_empty(), "label name must be nonempty");
    assert!(embed_dim > 0, "embedding dimension must be positive");
    let mut hasher = Sha256::new();
    hasher.update(b"label-embedding");
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(key);
    let raw: Vec<f64> = (0..embed_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    raw.into_iter().map(|v| T::c(v / norm)).collect()
}
