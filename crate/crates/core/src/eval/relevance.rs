use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::scalar::{dot, norm};
use crate::taxonomy::PairedDataset;
use crate::Scalar;

/// Maps concept names and visual features into one comparison space.
pub trait EmbeddingProvider<T> {
    fn concept(&self, name: &str) -> Option<Vec<T>>;
    fn visual(&self, feature: &[T]) -> Vec<T>;
}

/// Concepts embed as their generator prototype (descendant mean above the
/// subordinate level); features embed as themselves.
#[derive(Clone, Copy, Debug)]
pub struct PrototypeProvider<'a, T> {
    dataset: &'a PairedDataset<T>,
}

impl<'a, T: Scalar> PrototypeProvider<'a, T> {
    pub fn new(dataset: &'a PairedDataset<T>) -> Self {
        PrototypeProvider { dataset }
    }
}

impl<T: Scalar> EmbeddingProvider<T> for PrototypeProvider<'_, T> {
    fn concept(&self, name: &str) -> Option<Vec<T>> {
        self.dataset.taxonomy.find(name).map(|id| self.dataset.concept_prototype(id))
    }

    fn visual(&self, feature: &[T]) -> Vec<T> {
        feature.to_vec()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelevanceConfig {
    pub w: f64,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        RelevanceConfig { w: 1.0 }
    }
}

impl RelevanceConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.w.is_finite() && self.w >= 0.0 {
            Ok(())
        } else {
            Err(EvalError::Config(format!("relevance weight must be finite and nonnegative, got {}", self.w)))
        }
    }
}

/// `w · max(cos(c, v), 0)` in the provider's space.
pub fn relevance_score<T: Scalar, P: EmbeddingProvider<T> + ?Sized>(
    concept: &str,
    feature: &[T],
    provider: &P,
    config: &RelevanceConfig,
) -> Result<T, EvalError> {
    config.validate()?;
    let c = provider.concept(concept).ok_or_else(|| EvalError::UnknownConcept(concept.to_owned()))?;
    let v = provider.visual(feature);
    if c.len() != v.len() {
        return Err(EvalError::Config(format!("embedding sizes differ: {} vs {}", c.len(), v.len())));
    }
    let denom = norm(&c) * norm(&v);
    if !(denom > T::zero()) {
        return Err(EvalError::ZeroVector);
    }
    let cos = (dot(&c, &v) / denom).min(T::one());
    Ok(T::c(config.w) * cos.max(T::zero()))
}
