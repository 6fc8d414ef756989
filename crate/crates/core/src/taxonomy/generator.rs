//! Synthetic paired data.
//!
//! Visual features stand in for pretrained CNN feature maps. Each concept
//! node owns a random component vector and a subordinate prototype is the
//! sum of the components along its label chain, so subordinates under the
//! same basic concept share most of their geometry.

use std::collections::BTreeMap;
use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{embed_label, Level, NodeId, PerLevel, Taxonomy};
use crate::seed::{derive_seed, named_rng};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub samples_per_subordinate: usize,
    pub noise_scale: f64,
    pub separation_scale: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            feature_dim: 64,
            embed_dim: 32,
            samples_per_subordinate: 20,
            noise_scale: 0.25,
            separation_scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeneratorConfigError {
    #[error("feature_dim must be at least 2, got {0}")]
    FeatureDim(usize),
    #[error("embed_dim must be at least 2, got {0}")]
    EmbedDim(usize),
    #[error("samples_per_subordinate must be at least 1")]
    Samples,
    #[error("noise_scale must be finite and nonnegative, got {0}")]
    Noise(f64),
    #[error("separation_scale must be finite and positive, got {0}")]
    Separation(f64),
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GeneratorConfigError> {
        if self.feature_dim < 2 {
            return Err(GeneratorConfigError::FeatureDim(self.feature_dim));
        }
        if self.embed_dim < 2 {
            return Err(GeneratorConfigError::EmbedDim(self.embed_dim));
        }
        if self.samples_per_subordinate < 1 {
            return Err(GeneratorConfigError::Samples);
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(GeneratorConfigError::Noise(self.noise_scale));
        }
        if !(self.separation_scale.is_finite() && self.separation_scale > 0.0) {
            return Err(GeneratorConfigError::Separation(self.separation_scale));
        }
        Ok(())
    }

    /// Seed handed to the label embedder.
    pub fn label_seed(&self) -> u64 {
        derive_seed(self.seed, "label-embedding")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PairedExample<T> {
    pub visual: Vec<T>,
    pub labels: PerLevel<NodeId>,
    pub label_embeddings: PerLevel<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PairedDataset<T> {
    pub taxonomy: Taxonomy,
    pub examples: Vec<PairedExample<T>>,
    pub generator_config: GeneratorConfig,
    /// Noise-free centroid of every subordinate concept.
    pub prototypes: BTreeMap<NodeId, Vec<T>>,
}

fn component(config: &GeneratorConfig, name: &str) -> Vec<f64> {
    let mut rng = named_rng(config.seed, &format!("component/{name}"));
    (0..config.feature_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * config.separation_scale
        })
        .collect()
}

/// Builds the paired dataset. A pure function of `(taxonomy, config)`.
///
/// Panics if `config` fails validation; call [`GeneratorConfig::validate`]
/// first on untrusted input.
pub fn generate_dataset<T: Scalar>(taxonomy: &Taxonomy, config: &GeneratorConfig) -> PairedDataset<T> {
    config.validate().expect("invalid generator config");

    let components: Vec<Vec<f64>> = taxonomy
        .nodes()
        .iter()
        .map(|n| component(config, &n.name))
        .collect();
    let label_seed = config.label_seed();
    let embeddings: Vec<Vec<T>> = taxonomy
        .nodes()
        .iter()
        .map(|n| embed_label(&n.name, config.embed_dim, label_seed))
        .collect();

    let subordinates = taxonomy.at_level(Level::Subordinate);
    let mut prototypes = BTreeMap::new();
    let mut examples = Vec::with_capacity(subordinates.len() * config.samples_per_subordinate);
    for &u in &subordinates {
        let chain = taxonomy.chain(u);
        let proto: Vec<f64> = (0..config.feature_dim)
            .map(|i| Level::ALL.iter().map(|&l| components[chain[l].0][i]).sum())
            .collect();
        let mut rng = named_rng(config.seed, &format!("noise/{}", taxonomy.name(u)));
        for _ in 0..config.samples_per_subordinate {
            let visual = proto
                .iter()
                .map(|&p| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    T::c(p + config.noise_scale * e)
                })
                .collect();
            examples.push(PairedExample {
                visual,
                labels: chain.clone(),
                label_embeddings: PerLevel::from_fn(|l| embeddings[chain[l].0].clone()),
            });
        }
        prototypes.insert(u, proto.into_iter().map(T::c).collect());
    }

    PairedDataset {
        taxonomy: taxonomy.clone(),
        examples,
        generator_config: config.clone(),
        prototypes,
    }
}

impl<T: Scalar> PairedDataset<T> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Copy holding only the examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        PairedDataset {
            taxonomy: self.taxonomy.clone(),
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            generator_config: self.generator_config.clone(),
            prototypes: self.prototypes.clone(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.generator_config.feature_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.generator_config.embed_dim
    }

    /// Prototype of any concept: the subordinate prototype itself, or the
    /// mean of descendant subordinate prototypes for higher levels.
    pub fn concept_prototype(&self, id: NodeId) -> Vec<T> {
        let subs = self.taxonomy.subordinates_under(id);
        let mut acc = vec![T::zero(); self.feature_dim()];
        for u in &subs {
            for (a, &p) in acc.iter_mut().zip(&self.prototypes[u]) {
                *a += p;
            }
        }
        let n = T::c(subs.len() as f64);
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Frozen embedding of a concept's label.
    pub fn label_embedding(&self, id: NodeId) -> Vec<T> {
        embed_label(
            self.taxonomy.name(id),
            self.embed_dim(),
            self.generator_config.label_seed(),
        )
    }

    /// One CSV row per example: subordinate, basic, superordinate, f0..fN.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["subordinate".to_owned(), "basic".to_owned(), "superordinate".to_owned()];
        header.extend((0..self.feature_dim()).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for ex in &self.examples {
            let mut row = vec![
                self.taxonomy.name(ex.labels.subordinate).to_owned(),
                self.taxonomy.name(ex.labels.basic).to_owned(),
                self.taxonomy.name(ex.labels.superordinate).to_owned(),
            ];
            row.extend(ex.visual.iter().map(|v| format!("{:?}", v.to_f64_lossy())));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
