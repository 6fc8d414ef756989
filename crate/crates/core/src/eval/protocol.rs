use serde::{Deserialize, Serialize};

use super::classifier::HierClassifier;
use super::relevance::{relevance_score, PrototypeProvider, RelevanceConfig};
use super::report::{Metric, ReportRow, TestKind, TestReport};
use super::EvalError;
use crate::moe::{MixtureDraw, ModalityId, ModalityObservation, MmvaeModel};
use crate::retrieval::{FeatureIndex, LabelVocabulary};
use crate::seed::{derive_seed, rng_from_seed};
use crate::taxonomy::{Level, PairedDataset};
use crate::vae::standard_normal_vec;
use crate::Scalar;

/// How the latent is drawn when generating a missing modality.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentDraw {
    /// Reparameterized sample with seeded noise.
    #[default]
    Sample,
    /// Posterior mean (zero noise).
    Mean,
}

/// What the classifier sees in the understanding test.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualLookup {
    /// The stored training feature nearest to the generated one.
    #[default]
    NearestFeature,
    /// The decoder output itself.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub relevance: RelevanceConfig,
    pub levels: Vec<Level>,
    pub latent_draw: LatentDraw,
    pub lookup: VisualLookup,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            relevance: RelevanceConfig::default(),
            levels: vec![Level::Subordinate, Level::Basic],
            latent_draw: LatentDraw::Sample,
            lookup: VisualLookup::NearestFeature,
            seed: 0,
        }
    }
}

/// Source of generated modalities; the model in practice, oracles in tests.
pub trait CrossGenerator<T> {
    fn language_to_vision(&self, level: Level, embedding: &[T], seed: u64) -> Result<Vec<T>, EvalError>;
    fn vision_to_language(&self, visual: &[T], level: Level, seed: u64) -> Result<Vec<T>, EvalError>;
}

#[derive(Clone, Copy, Debug)]
pub struct ModelGenerator<'a, T> {
    model: &'a MmvaeModel<T>,
    draw: LatentDraw,
}

impl<'a, T: Scalar> ModelGenerator<'a, T> {
    pub fn new(model: &'a MmvaeModel<T>, draw: LatentDraw) -> Self {
        ModelGenerator { model, draw }
    }

    fn generate(&self, from: ModalityId, x: &[T], to: ModalityId, seed: u64) -> Result<Vec<T>, EvalError> {
        let eps = match self.draw {
            LatentDraw::Mean => vec![T::zero(); self.model.latent_dim()],
            LatentDraw::Sample => standard_normal_vec(&mut rng_from_seed(seed), self.model.latent_dim()),
        };
        let obs = ModalityObservation::new().with(from, x.to_vec());
        Ok(self.model.cross_generate(&obs, to, &MixtureDraw { expert: 0, eps })?)
    }
}

impl<T: Scalar> CrossGenerator<T> for ModelGenerator<'_, T> {
    fn language_to_vision(&self, level: Level, embedding: &[T], seed: u64) -> Result<Vec<T>, EvalError> {
        self.generate(ModalityId::Label(level), embedding, ModalityId::Visual, seed)
    }

    fn vision_to_language(&self, visual: &[T], level: Level, seed: u64) -> Result<Vec<T>, EvalError> {
        self.generate(ModalityId::Visual, visual, ModalityId::Label(level), seed)
    }
}

fn example_seed(root: u64, test: TestKind, level: Level, index: usize) -> u64 {
    derive_seed(root, &format!("{}/{level}/{index}", test.as_str()))
}

fn rows(level: Level, acc: (usize, usize), gt_acc: (usize, usize), rel: f64, gt_rel: f64, n: usize) -> Vec<ReportRow> {
    let n = n as f64;
    vec![
        ReportRow {
            level,
            metric: Metric::Accuracy,
            value: acc.0 as f64 / acc.1 as f64,
            baseline: gt_acc.0 as f64 / gt_acc.1 as f64,
        },
        ReportRow {
            level,
            metric: Metric::Relevance,
            value: rel / n,
            baseline: gt_rel / n,
        },
    ]
}

/// Language to vision: generate a feature from each held-out example's
/// label at `level`, classify it, and compare with the input concept.
///
/// The classifier's subordinate prediction is walked up the taxonomy to
/// `level`. Baselines are the same measurements on the real features.
pub fn language_understanding_test<T: Scalar, G: CrossGenerator<T> + ?Sized>(
    generator: &G,
    train: &PairedDataset<T>,
    test: &PairedDataset<T>,
    classifier: &HierClassifier<T>,
    level: Level,
    config: &EvalConfig,
) -> Result<Vec<ReportRow>, EvalError> {
    if test.is_empty() {
        return Err(EvalError::Config("empty test split".into()));
    }
    if classifier.feature_dim() != test.feature_dim() {
        return Err(EvalError::Config("classifier does not match the feature dimension".into()));
    }
    let tax = &test.taxonomy;
    let index = FeatureIndex::from_dataset(train)?;
    let provider = PrototypeProvider::new(test);
    let walk = |x: &[T]| -> Result<_, EvalError> {
        let sub = classifier.predict(x)?.subordinate;
        Ok(tax.ancestor_at(sub, level).expect("complete chain"))
    };
    let (mut hits, mut gt_hits) = (0, 0);
    let (mut rel, mut gt_rel) = (0.0, 0.0);
    for (i, ex) in test.examples.iter().enumerate() {
        let concept = ex.labels[level];
        let name = tax.name(concept);
        let generated = generator.language_to_vision(level, &ex.label_embeddings[level], example_seed(config.seed, TestKind::LanguageUnderstanding, level, i))?;
        let seen = match config.lookup {
            VisualLookup::NearestFeature => {
                let (id, _) = index.nearest_feature(&generated)?;
                train.examples[id].visual.clone()
            }
            VisualLookup::Raw => generated,
        };
        if walk(&seen)? == concept {
            hits += 1;
        }
        if walk(&ex.visual)? == concept {
            gt_hits += 1;
        }
        rel += relevance_score(name, &seen, &provider, &config.relevance)?.to_f64_lossy();
        gt_rel += relevance_score(name, &ex.visual, &provider, &config.relevance)?.to_f64_lossy();
    }
    let n = test.len();
    Ok(rows(level, (hits, n), (gt_hits, n), rel, gt_rel, n))
}

/// Vision to language: generate the `level` label embedding from each
/// held-out feature, resolve it to the nearest vocabulary word and compare
/// with the true label. Baselines use the true labels, so their accuracy is 1.
pub fn language_naming_test<T: Scalar, G: CrossGenerator<T> + ?Sized>(
    generator: &G,
    test: &PairedDataset<T>,
    vocab: &LabelVocabulary<T>,
    level: Level,
    config: &EvalConfig,
) -> Result<Vec<ReportRow>, EvalError> {
    if test.is_empty() {
        return Err(EvalError::Config("empty test split".into()));
    }
    let tax = &test.taxonomy;
    let provider = PrototypeProvider::new(test);
    let mut hits = 0;
    let (mut rel, mut gt_rel) = (0.0, 0.0);
    for (i, ex) in test.examples.iter().enumerate() {
        let truth = tax.name(ex.labels[level]);
        let generated = generator.vision_to_language(&ex.visual, level, example_seed(config.seed, TestKind::LanguageNaming, level, i))?;
        let (named, _) = vocab.nearest_label(&generated, level)?;
        if named == truth {
            hits += 1;
        }
        rel += relevance_score(named, &ex.visual, &provider, &config.relevance)?.to_f64_lossy();
        gt_rel += relevance_score(truth, &ex.visual, &provider, &config.relevance)?.to_f64_lossy();
    }
    let n = test.len();
    Ok(rows(level, (hits, n), (n, n), rel, gt_rel, n))
}

/// Both tests over every configured level.
pub fn run_protocol<T: Scalar, G: CrossGenerator<T> + ?Sized>(
    generator: &G,
    train: &PairedDataset<T>,
    test: &PairedDataset<T>,
    classifier: &HierClassifier<T>,
    config: &EvalConfig,
) -> Result<(TestReport, TestReport), EvalError> {
    config.relevance.validate()?;
    let vocab = LabelVocabulary::from_dataset(test)?;
    let mut understanding = Vec::new();
    let mut naming = Vec::new();
    for &level in &config.levels {
        understanding.extend(language_understanding_test(generator, train, test, classifier, level, config)?);
        naming.extend(language_naming_test(generator, test, &vocab, level, config)?);
    }
    Ok((
        TestReport { test: TestKind::LanguageUnderstanding, rows: understanding },
        TestReport { test: TestKind::LanguageNaming, rows: naming },
    ))
}
