use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::nn::{init_net, Activation, AdamConfig, AdamState, DenseNet, NetGradients, Tensor};
use crate::seed::{derive_seed, rng_from_seed};
use crate::taxonomy::{Level, NodeId, PairedDataset, PerLevel, Taxonomy};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: vec![64],
            steps: 1500,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// ReLU trunk with one softmax head per concept level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct HierClassifier<T> {
    trunk: DenseNet<T>,
    heads: PerLevel<DenseNet<T>>,
    /// Class order of each head.
    classes: PerLevel<Vec<NodeId>>,
}

impl<T: Scalar> HierClassifier<T> {
    pub fn init(taxonomy: &Taxonomy, feature_dim: usize, hidden: &[usize], seed: u64) -> Result<Self, EvalError> {
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(EvalError::Config("classifier needs positive hidden widths".into()));
        }
        let mut dims = vec![feature_dim];
        dims.extend_from_slice(hidden);
        let trunk = init_net(&dims, &vec![Activation::Relu; hidden.len()], derive_seed(seed, "trunk"))?;
        let width = *hidden.last().expect("nonempty");
        let classes = PerLevel::from_fn(|l| taxonomy.at_level(l));
        let heads = PerLevel::try_from_fn(|l| {
            init_net(&[width, classes[l].len()], &[Activation::Identity], derive_seed(seed, &format!("head/{l}")))
        })?;
        Ok(HierClassifier { trunk, heads, classes })
    }

    pub fn trunk(&self) -> &DenseNet<T> {
        &self.trunk
    }

    pub fn head(&self, level: Level) -> &DenseNet<T> {
        &self.heads[level]
    }

    pub fn classes(&self, level: Level) -> &[NodeId] {
        &self.classes[level]
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk.in_dim()
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count() + Level::ALL.iter().map(|&l| self.heads[l].param_count()).sum::<usize>()
    }

    /// Trunk, then the heads in [`Level::ALL`] order.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = self.trunk.to_flat();
        for l in Level::ALL {
            self.heads[l].append_flat(&mut out);
        }
        out
    }

    pub fn load_flat(&mut self, params: &[T]) -> Result<(), EvalError> {
        if params.len() != self.param_count() {
            return Err(EvalError::Config(format!("expected {} parameters, got {}", self.param_count(), params.len())));
        }
        let mut i = self.trunk.param_count();
        self.trunk.load_flat(&params[..i])?;
        for l in Level::ALL {
            let n = self.heads[l].param_count();
            self.heads[l].load_flat(&params[i..i + n])?;
            i += n;
        }
        Ok(())
    }

    pub fn logits(&self, x: &[T]) -> Result<PerLevel<Vec<T>>, EvalError> {
        let h = self.trunk.predict(&Tensor::vector(x.to_vec())?)?;
        Ok(PerLevel::try_from_fn(|l| self.heads[l].predict(&h).map(Tensor::into_data))?)
    }

    /// Argmax concept at each head; ties go to the first class.
    pub fn predict(&self, x: &[T]) -> Result<PerLevel<NodeId>, EvalError> {
        let logits = self.logits(x)?;
        Ok(PerLevel::from_fn(|l| self.classes[l][argmax(&logits[l])]))
    }

    /// Mean summed cross-entropy over the heads and its gradient in [`to_flat`](Self::to_flat) layout.
    pub fn loss_and_grad<R: AsRef<[T]>>(&self, xs: &[R], labels: &[PerLevel<NodeId>]) -> Result<(T, Vec<T>), EvalError> {
        let n = xs.len();
        if n == 0 || labels.len() != n {
            return Err(EvalError::Config("batch and labels must be nonempty and aligned".into()));
        }
        let inv_n = T::one() / T::c(n as f64);
        let input = Tensor::from_rows(xs)?;
        let (h, trunk_cache) = self.trunk.forward(&input)?;
        let mut loss = T::zero();
        let mut dh = vec![T::zero(); h.data().len()];
        let mut head_grads: Vec<NetGradients<T>> = Vec::with_capacity(3);
        for l in Level::ALL {
            let (logits, cache) = self.heads[l].forward(&h)?;
            let k = logits.cols();
            let mut d = Vec::with_capacity(n * k);
            for (b, row) in logits.iter_rows().enumerate() {
                let target = self.classes[l]
                    .iter()
                    .position(|&c| c == labels[b][l])
                    .ok_or_else(|| EvalError::Config("label not among classifier classes".into()))?;
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
                let log_z = max + sum.ln();
                loss += (log_z - row[target]) * inv_n;
                for (j, &v) in row.iter().enumerate() {
                    let p = (v - log_z).exp();
                    let y = if j == target { T::one() } else { T::zero() };
                    d.push((p - y) * inv_n);
                }
            }
            let g = self.heads[l].backward(&cache, &Tensor::matrix(n, k, d)?)?;
            for (a, &v) in dh.iter_mut().zip(g.input.data()) {
                *a += v;
            }
            head_grads.push(g);
        }
        let trunk_grad = self.trunk.backward(&trunk_cache, &Tensor::matrix(n, h.cols(), dh)?)?;
        let mut grad = trunk_grad.params_flat();
        for g in &head_grads {
            g.append_params_flat(&mut grad);
        }
        Ok((loss, grad))
    }

    /// Fraction of examples whose head output matches the true label, per level.
    pub fn accuracy(&self, dataset: &PairedDataset<T>) -> Result<PerLevel<f64>, EvalError> {
        let mut hits = PerLevel::from_fn(|_| 0usize);
        for ex in &dataset.examples {
            let p = self.predict(&ex.visual)?;
            for l in Level::ALL {
                if p[l] == ex.labels[l] {
                    hits[l] += 1;
                }
            }
        }
        let n = dataset.len().max(1) as f64;
        Ok(PerLevel::from_fn(|l| hits[l] as f64 / n))
    }
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-level accuracy of a freshly trained classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub train_accuracy: PerLevel<f64>,
    pub test_accuracy: Option<PerLevel<f64>>,
}

/// Cross-entropy training on visual features; deterministic per seed.
pub fn train_classifier<T: Scalar>(dataset: &PairedDataset<T>, config: &ClassifierConfig) -> Result<HierClassifier<T>, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::Config("empty classifier training set".into()));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(EvalError::Config("classifier batch_size and learning_rate must be positive".into()));
    }
    let mut clf = HierClassifier::init(&dataset.taxonomy, dataset.feature_dim(), &config.hidden, derive_seed(config.seed, "init"))?;
    let mut rng = rng_from_seed(derive_seed(config.seed, "batches"));
    let mut adam = AdamState::new(
        clf.param_count(),
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let batch = config.batch_size.min(dataset.len());
    let mut params = clf.to_flat();
    for _ in 0..config.steps {
        let idx = sample_indices(&mut rng, dataset.len(), batch);
        let xs: Vec<&[T]> = idx.iter().map(|i| dataset.examples[i].visual.as_slice()).collect();
        let labels: Vec<PerLevel<NodeId>> = idx.iter().map(|i| dataset.examples[i].labels.clone()).collect();
        let (_, grad) = clf.loss_and_grad(&xs, &labels)?;
        adam.step(&mut params, &grad)?;
        clf.load_flat(&params)?;
    }
    Ok(clf)
}

/// Trains and reports accuracy on the training set and an optional held-out set.
pub fn train_classifier_with_report<T: Scalar>(
    train: &PairedDataset<T>,
    test: Option<&PairedDataset<T>>,
    config: &ClassifierConfig,
) -> Result<(HierClassifier<T>, ClassifierReport), EvalError> {
    let clf = train_classifier(train, config)?;
    let report = ClassifierReport {
        train_accuracy: clf.accuracy(train)?,
        test_accuracy: test.map(|t| clf.accuracy(t)).transpose()?,
    };
    Ok((clf, report))
}
