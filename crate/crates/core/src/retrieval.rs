//! Exhaustive nearest-neighbour lookups: Euclidean over stored visual
//! features, cosine over label embeddings.

use std::cmp::Ordering;

use thiserror::Error;

use crate::scalar::{dot, norm, squared_distance};
use crate::taxonomy::{Level, PairedDataset};
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("index is empty")]
    Empty,
    #[error("no vocabulary entries at level {0}")]
    EmptyLevel(Level),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("duplicate entry {0}")]
    Duplicate(String),
    #[error("query is zero")]
    ZeroQuery,
    #[error("embedding for {0} is not unit norm")]
    NotUnit(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureIndex<T> {
    entries: Vec<(Vec<T>, usize)>,
    dim: usize,
}

impl<T: Scalar> FeatureIndex<T> {
    pub fn new(entries: Vec<(Vec<T>, usize)>) -> Result<Self, RetrievalError> {
        let dim = entries.first().map(|e| e.0.len()).ok_or(RetrievalError::Empty)?;
        let mut ids: Vec<usize> = entries.iter().map(|e| e.1).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(RetrievalError::Duplicate(w[0].to_string()));
        }
        for (v, _) in &entries {
            if v.len() != dim {
                return Err(RetrievalError::Dimension { expected: dim, got: v.len() });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(RetrievalError::NonFinite("feature"));
            }
        }
        Ok(FeatureIndex { entries, dim })
    }

    /// Visual features of a dataset keyed by example position.
    pub fn from_dataset(dataset: &PairedDataset<T>) -> Result<Self, RetrievalError> {
        Self::new(dataset.examples.iter().enumerate().map(|(i, e)| (e.visual.clone(), i)).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(Vec<T>, usize)] {
        &self.entries
    }

    /// Closest entry by Euclidean distance; ties go to the smaller id.
    pub fn nearest_feature(&self, query: &[T]) -> Result<(usize, T), RetrievalError> {
        if query.len() != self.dim {
            return Err(RetrievalError::Dimension { expected: self.dim, got: query.len() });
        }
        if query.iter().any(|x| !x.is_finite()) {
            return Err(RetrievalError::NonFinite("query"));
        }
        let (id, d2) = self
            .entries
            .iter()
            .map(|(v, id)| (*id, squared_distance(v, query)))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)))
            .ok_or(RetrievalError::Empty)?;
        Ok((id, d2.sqrt()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VocabularyEntry<T> {
    pub name: String,
    pub embedding: Vec<T>,
    pub level: Level,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelVocabulary<T> {
    entries: Vec<VocabularyEntry<T>>,
}

impl<T: Scalar> LabelVocabulary<T> {
    pub fn new(entries: Vec<VocabularyEntry<T>>) -> Result<Self, RetrievalError> {
        for (i, e) in entries.iter().enumerate() {
            if e.embedding.iter().any(|x| !x.is_finite()) {
                return Err(RetrievalError::NonFinite("embedding"));
            }
            if (norm(&e.embedding).to_f64_lossy() - 1.0).abs() > 1e-6 {
                return Err(RetrievalError::NotUnit(e.name.clone()));
            }
            if entries[..i].iter().any(|o| o.level == e.level && o.name == e.name) {
                return Err(RetrievalError::Duplicate(e.name.clone()));
            }
        }
        Ok(LabelVocabulary { entries })
    }

    /// Every concept of the dataset's taxonomy with its frozen label embedding.
    pub fn from_dataset(dataset: &PairedDataset<T>) -> Result<Self, RetrievalError> {
        let tax = &dataset.taxonomy;
        Self::new(
            tax.ids()
                .map(|id| VocabularyEntry {
                    name: tax.name(id).to_owned(),
                    embedding: dataset.label_embedding(id),
                    level: tax.level(id),
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[VocabularyEntry<T>] {
        &self.entries
    }

    pub fn at_level(&self, level: Level) -> impl Iterator<Item = &VocabularyEntry<T>> {
        self.entries.iter().filter(move |e| e.level == level)
    }

    /// Highest-cosine entry at `level`; ties go to the lexicographically smallest name.
    pub fn nearest_label(&self, query: &[T], level: Level) -> Result<(&str, T), RetrievalError> {
        if query.iter().any(|x| !x.is_finite()) {
            return Err(RetrievalError::NonFinite("query"));
        }
        let qn = norm(query);
        if qn == T::zero() {
            return Err(RetrievalError::ZeroQuery);
        }
        let mut best: Option<(&VocabularyEntry<T>, T)> = None;
        for e in self.at_level(level) {
            if e.embedding.len() != query.len() {
                return Err(RetrievalError::Dimension { expected: e.embedding.len(), got: query.len() });
            }
            let cos = dot(&e.embedding, query) / qn;
            best = match best {
                Some((b, bc)) if bc > cos || (bc == cos && b.name <= e.name) => Some((b, bc)),
                _ => Some((e, cos)),
            };
        }
        best.map(|(e, c)| (e.name.as_str(), c)).ok_or(RetrievalError::EmptyLevel(level))
    }
}
