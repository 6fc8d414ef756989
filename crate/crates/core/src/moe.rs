//! Mixture-of-experts multimodal VAE.
//!
//! One [`ModalityVae`] per modality (the visual features plus one label
//! embedding per configured concept level), all sharing a latent space. The
//! joint posterior is the uniform mixture of the per-modality posteriors:
//!
//! ```text
//! q(z | x_1..M) = Σ_m (1/M) q_m(z | x_m)
//! ```
//!
//! and training maximizes the stratified bound
//!
//! ```text
//! (1/M) Σ_m [ E_{z_m ~ q_m} log p(x_m | z_m) − KL(q_m ‖ N(0, I)) ]
//! ```
//!
//! With [`Objective::CrossReconstruction`] every expert's sample also
//! reconstructs the other modalities, which is what couples the latent
//! spaces strongly enough for cross-modal generation.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Activation, AdamConfig, AdamState, DenseNet, NetCheckpoint, NnError};
use crate::seed::{derive_seed, rng_from_seed, Rng};
use crate::taxonomy::{Level, PairedDataset, PairedExample};
use crate::vae::{
    elbo_single, kl_gradient, kl_standard_normal, reparam_backward, reparameterize, stack_samples, standard_normal_vec,
    GaussianPosterior, LatentSample, ModalityVae, VaeArchitecture, VaeError,
};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityId {
    Visual,
    Label(Level),
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModalityId::Visual => f.write_str("visual"),
            ModalityId::Label(level) => write!(f, "label:{level}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MoeError {
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error("modality {0} is required but missing")]
    MissingModality(ModalityId),
    #[error("modality {0} is not part of the model")]
    UnknownModality(ModalityId),
    #[error("target modality {0} is already observed")]
    TargetPresent(ModalityId),
    #[error("no modality is observed")]
    NothingPresent,
    #[error("expert index {index} out of range for {count} experts")]
    ExpertIndex { index: usize, count: usize },
    #[error("invalid model: {0}")]
    Model(String),
    #[error("invalid training config: {0}")]
    Config(String),
}

impl From<NnError> for MoeError {
    fn from(e: NnError) -> Self {
        MoeError::Vae(VaeError::Nn(e))
    }
}

/// Which reconstruction terms an expert's sample contributes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Expert `m` reconstructs modality `m` only.
    #[default]
    PerExpert,
    /// Expert `m` reconstructs every modality.
    CrossReconstruction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Latent samples per expert and example.
    pub samples: usize,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            samples: 1,
            objective: Objective::PerExpert,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MoeError> {
        if self.batch_size == 0 {
            return Err(MoeError::Config("batch_size must be positive".into()));
        }
        if self.samples == 0 {
            return Err(MoeError::Config("samples must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(MoeError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Architecture of the whole multimodal model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Concept levels that get their own language VAE.
    pub label_levels: Vec<Level>,
    pub visual_encoder_hidden: Vec<usize>,
    pub visual_decoder_hidden: Vec<usize>,
    pub language_encoder_hidden: Vec<usize>,
    pub language_decoder_hidden: Vec<usize>,
    pub hidden_activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl ModelConfig {
    /// Visual + subordinate + basic label VAEs, 16-dimensional latent.
    pub fn desk_scale() -> Self {
        ModelConfig {
            latent_dim: 16,
            label_levels: vec![Level::Subordinate, Level::Basic],
            visual_encoder_hidden: vec![64, 64],
            visual_decoder_hidden: vec![64, 64],
            language_encoder_hidden: vec![64, 64],
            language_decoder_hidden: vec![64, 64],
            hidden_activation: Activation::Tanh,
        }
    }

    /// 128-dimensional latent with the 256/512/1024 visual stacks.
    pub fn paper_scale() -> Self {
        ModelConfig {
            latent_dim: 128,
            label_levels: vec![Level::Subordinate, Level::Basic],
            visual_encoder_hidden: vec![256, 512, 1024],
            visual_decoder_hidden: vec![256, 512, 1024],
            language_encoder_hidden: vec![256, 256],
            language_decoder_hidden: vec![256, 256],
            hidden_activation: Activation::Relu,
        }
    }

    /// Adds a superordinate language VAE (four modalities).
    pub fn with_superordinate(mut self) -> Self {
        if !self.label_levels.contains(&Level::Superordinate) {
            self.label_levels.push(Level::Superordinate);
        }
        self
    }

    pub fn modality_ids(&self) -> Vec<ModalityId> {
        std::iter::once(ModalityId::Visual)
            .chain(self.label_levels.iter().map(|&l| ModalityId::Label(l)))
            .collect()
    }

    pub fn validate(&self) -> Result<(), MoeError> {
        if self.latent_dim == 0 {
            return Err(MoeError::Model("latent_dim must be positive".into()));
        }
        if self.label_levels.is_empty() {
            return Err(MoeError::Model("at least one label level is required".into()));
        }
        let mut seen = self.label_levels.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.label_levels.len() {
            return Err(MoeError::Model("label levels must be distinct".into()));
        }
        let hidden = [
            &self.visual_encoder_hidden,
            &self.visual_decoder_hidden,
            &self.language_encoder_hidden,
            &self.language_decoder_hidden,
        ];
        if hidden.iter().any(|h| h.contains(&0)) {
            return Err(MoeError::Model("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn architecture(&self, id: ModalityId, feature_dim: usize, embed_dim: usize) -> VaeArchitecture {
        let (observation_dim, enc, dec) = match id {
            ModalityId::Visual => (feature_dim, &self.visual_encoder_hidden, &self.visual_decoder_hidden),
            ModalityId::Label(_) => (embed_dim, &self.language_encoder_hidden, &self.language_decoder_hidden),
        };
        VaeArchitecture {
            observation_dim,
            latent_dim: self.latent_dim,
            encoder_hidden: enc.clone(),
            decoder_hidden: dec.clone(),
            hidden_activation: self.hidden_activation,
        }
    }
}

/// Per-modality observations; any subset may be present.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ModalityObservation<T> {
    values: BTreeMap<ModalityId, Vec<T>>,
}

impl<T: Scalar> ModalityObservation<T> {
    pub fn new() -> Self {
        ModalityObservation { values: BTreeMap::new() }
    }

    pub fn with(mut self, id: ModalityId, value: Vec<T>) -> Self {
        self.values.insert(id, value);
        self
    }

    pub fn insert(&mut self, id: ModalityId, value: Vec<T>) {
        self.values.insert(id, value);
    }

    pub fn get(&self, id: ModalityId) -> Option<&[T]> {
        self.values.get(&id).map(Vec::as_slice)
    }

    pub fn contains(&self, id: ModalityId) -> bool {
        self.values.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ModalityId> + '_ {
        self.values.keys().copied()
    }

    /// The requested modalities of a paired example.
    pub fn from_example(example: &PairedExample<T>, ids: &[ModalityId]) -> Self {
        let mut obs = Self::new();
        for &id in ids {
            obs.insert(id, modality_row(example, id).to_vec());
        }
        obs
    }
}

pub(crate) fn modality_row<T>(example: &PairedExample<T>, id: ModalityId) -> &[T] {
    match id {
        ModalityId::Visual => &example.visual,
        ModalityId::Label(level) => &example.label_embeddings[level],
    }
}

/// Which present expert to sample from and with what noise.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDraw<T> {
    /// Index among the *present* experts, in model order.
    pub expert: usize,
    pub eps: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Expert<T> {
    pub id: ModalityId,
    pub vae: ModalityVae<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MmvaeModel<T> {
    experts: Vec<Expert<T>>,
    latent_dim: usize,
    init_seed: Option<u64>,
}

impl<T: Scalar> MmvaeModel<T> {
    /// Assembles a model from experts sharing one latent dimension.
    ///
    /// A single expert is accepted so the mixture can be checked against
    /// the plain single-modality bound; [`ModelConfig`] always yields two or more.
    pub fn new(experts: Vec<Expert<T>>) -> Result<Self, MoeError> {
        let first = experts.first().ok_or_else(|| MoeError::Model("no experts".into()))?;
        let latent_dim = first.vae.latent_dim();
        for (i, e) in experts.iter().enumerate() {
            if e.vae.latent_dim() != latent_dim {
                return Err(MoeError::Model(format!(
                    "expert {} has latent dim {}, expected {latent_dim}",
                    e.id,
                    e.vae.latent_dim()
                )));
            }
            if experts[..i].iter().any(|o| o.id == e.id) {
                return Err(MoeError::Model(format!("duplicate modality {}", e.id)));
            }
        }
        Ok(MmvaeModel { experts, latent_dim, init_seed: None })
    }

    pub fn init(config: &ModelConfig, feature_dim: usize, embed_dim: usize, seed: u64) -> Result<Self, MoeError> {
        config.validate()?;
        let experts = config
            .modality_ids()
            .into_iter()
            .map(|id| {
                let arch = config.architecture(id, feature_dim, embed_dim);
                let vae = ModalityVae::init(&arch, derive_seed(seed, &id.to_string()))?;
                Ok(Expert { id, vae })
            })
            .collect::<Result<Vec<_>, MoeError>>()?;
        let mut model = Self::new(experts)?;
        model.init_seed = Some(seed);
        Ok(model)
    }

    pub fn experts(&self) -> &[Expert<T>] {
        &self.experts
    }

    #[cfg(test)]
    pub(crate) fn experts_mut(&mut self) -> &mut [Expert<T>] {
        &mut self.experts
    }

    pub fn modality_count(&self) -> usize {
        self.experts.len()
    }

    pub fn modality_ids(&self) -> Vec<ModalityId> {
        self.experts.iter().map(|e| e.id).collect()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn init_seed(&self) -> Option<u64> {
        self.init_seed
    }

    pub fn expert(&self, id: ModalityId) -> Option<&ModalityVae<T>> {
        self.experts.iter().find(|e| e.id == id).map(|e| &e.vae)
    }

    fn position(&self, id: ModalityId) -> Result<usize, MoeError> {
        self.experts.iter().position(|e| e.id == id).ok_or(MoeError::UnknownModality(id))
    }

    /// Uniform mixture weights, `1/M` each.
    pub fn mixture_weights(&self) -> Vec<T> {
        let m = T::c(self.experts.len() as f64);
        vec![T::one() / m; self.experts.len()]
    }

    /// Reorders experts; `order[i]` is the old index of the new `i`-th expert.
    pub fn permuted(&self, order: &[usize]) -> Result<Self, MoeError> {
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.experts.len()).collect::<Vec<_>>() {
            return Err(MoeError::Model("not a permutation".into()));
        }
        Ok(MmvaeModel {
            experts: order.iter().map(|&i| self.experts[i].clone()).collect(),
            latent_dim: self.latent_dim,
            init_seed: self.init_seed,
        })
    }

    pub fn param_count(&self) -> usize {
        self.experts.iter().map(|e| e.vae.param_count()).sum()
    }

    /// Expert parameters concatenated in model order.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for e in &self.experts {
            e.vae.append_flat(&mut out);
        }
        out
    }

    pub fn load_flat(&mut self, params: &[T]) -> Result<(), MoeError> {
        if params.len() != self.param_count() {
            return Err(MoeError::Model(format!("expected {} parameters, got {}", self.param_count(), params.len())));
        }
        let mut i = 0;
        for e in &mut self.experts {
            let n = e.vae.param_count();
            e.vae.load_flat(&params[i..i + n])?;
            i += n;
        }
        Ok(())
    }

    fn check_observation(&self, obs: &ModalityObservation<T>) -> Result<(), MoeError> {
        for id in obs.ids() {
            let vae = self.expert(id).ok_or(MoeError::UnknownModality(id))?;
            let got = obs.get(id).map(<[T]>::len).unwrap_or(0);
            crate::vae::check_dim("observation", vae.observation_dim(), got)?;
        }
        Ok(())
    }

    fn full_rows<'a>(&self, obs: &'a ModalityObservation<T>) -> Result<Vec<&'a [T]>, MoeError> {
        self.check_observation(obs)?;
        self.experts
            .iter()
            .map(|e| obs.get(e.id).ok_or(MoeError::MissingModality(e.id)))
            .collect()
    }

    /// Per-expert posteriors for a fully observed input, in model order.
    pub fn posteriors(&self, obs: &ModalityObservation<T>) -> Result<Vec<GaussianPosterior<T>>, MoeError> {
        let rows = self.full_rows(obs)?;
        self.experts
            .iter()
            .zip(rows)
            .map(|(e, x)| Ok(e.vae.encode(x)?))
            .collect()
    }

    /// `q(z | x_1..M)`: the mean of the expert densities at `z`.
    pub fn joint_posterior_density(&self, z: &[T], obs: &ModalityObservation<T>) -> Result<T, MoeError> {
        crate::vae::check_dim("latent", self.latent_dim, z.len())?;
        let posts = self.posteriors(obs)?;
        let weights = self.mixture_weights();
        Ok(posts.iter().zip(weights).map(|(p, w)| w * p.density(z)).sum())
    }

    /// `log q(z | x_1..M)` via log-sum-exp; usable where the density underflows.
    pub fn log_joint_posterior_density(&self, z: &[T], obs: &ModalityObservation<T>) -> Result<T, MoeError> {
        crate::vae::check_dim("latent", self.latent_dim, z.len())?;
        let logs: Vec<T> = self.posteriors(obs)?.iter().map(|p| p.log_density(z)).collect();
        let max = logs.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = logs.iter().map(|&l| (l - max).exp()).sum();
        Ok(max + sum.ln() - T::c(logs.len() as f64).ln())
    }

    /// Draws from expert `index` with the given noise.
    pub fn sample_expert(&self, obs: &ModalityObservation<T>, index: usize, eps: &[T]) -> Result<LatentSample<T>, MoeError> {
        let rows = self.full_rows(obs)?;
        let e = self.experts.get(index).ok_or(MoeError::ExpertIndex {
            index,
            count: self.experts.len(),
        })?;
        let post = e.vae.encode(rows[index])?;
        Ok(reparameterize(&post, eps)?)
    }

    /// One draw from the joint mixture: uniform expert, then reparameterized noise.
    pub fn sample_joint(&self, obs: &ModalityObservation<T>, rng: &mut Rng) -> Result<(LatentSample<T>, usize), MoeError> {
        self.full_rows(obs)?;
        let m = rng.random_range(0..self.experts.len());
        let eps = standard_normal_vec(rng, self.latent_dim);
        Ok((self.sample_expert(obs, m, &eps)?, m))
    }

    /// Multimodal bound with the per-expert reconstruction terms.
    pub fn multimodal_elbo(&self, obs: &ModalityObservation<T>, eps: &[Vec<Vec<T>>]) -> Result<T, MoeError> {
        self.multimodal_elbo_with(obs, eps, Objective::PerExpert)
    }

    /// `eps[m]` holds the `K` noise draws for expert `m`.
    pub fn multimodal_elbo_with(&self, obs: &ModalityObservation<T>, eps: &[Vec<Vec<T>>], objective: Objective) -> Result<T, MoeError> {
        let rows = self.full_rows(obs)?;
        if eps.len() != self.experts.len() {
            return Err(MoeError::Model(format!("{} noise sets for {} experts", eps.len(), self.experts.len())));
        }
        let mut total = T::zero();
        for (m, (expert, x)) in self.experts.iter().zip(&rows).enumerate() {
            let term = match objective {
                Objective::PerExpert => elbo_single(&expert.vae, x, &eps[m])?,
                Objective::CrossReconstruction => {
                    if eps[m].is_empty() {
                        return Err(VaeError::NoSamples.into());
                    }
                    let post = expert.vae.encode(x)?;
                    let mut recon = T::zero();
                    for (other, xn) in self.experts.iter().zip(&rows) {
                        let mut r = T::zero();
                        for e in &eps[m] {
                            let s = reparameterize(&post, e)?;
                            r += crate::vae::log_likelihood(&other.vae, xn, &s.z)?;
                        }
                        recon += r / T::c(eps[m].len() as f64);
                    }
                    recon - kl_standard_normal(&post)
                }
            };
            total += term;
        }
        Ok(total / T::c(self.experts.len() as f64))
    }

    /// Mean negative bound over a batch and its gradient in [`to_flat`](Self::to_flat) layout.
    ///
    /// `batch[b][m]` is example `b`'s observation of expert `m`;
    /// `eps[m][b]` are the `K` draws for that expert and example.
    pub fn negative_elbo_and_grad(&self, batch: &[Vec<&[T]>], eps: &[Vec<Vec<Vec<T>>>], objective: Objective) -> Result<(T, Vec<T>), MoeError> {
        let m_count = self.experts.len();
        let b_count = batch.len();
        if b_count == 0 || eps.len() != m_count {
            return Err(MoeError::Model("batch or noise shape mismatch".into()));
        }
        let k = eps[0].first().map(Vec::len).unwrap_or(0);
        if k == 0 || eps.iter().any(|per| per.len() != b_count || per.iter().any(|d| d.len() != k)) {
            return Err(VaeError::NoSamples.into());
        }
        let latent = self.latent_dim;
        let recon_weight = T::one() / T::c((b_count * k * m_count) as f64);
        let kl_weight = T::one() / T::c((b_count * m_count) as f64);

        let mut enc_grads: Vec<Vec<T>> = self.experts.iter().map(|e| vec![T::zero(); e.vae.encoder().param_count()]).collect();
        let mut dec_grads: Vec<Vec<T>> = self.experts.iter().map(|e| vec![T::zero(); e.vae.decoder().param_count()]).collect();
        let mut log_lik = T::zero();
        let mut kl_total = T::zero();

        for (m, expert) in self.experts.iter().enumerate() {
            let xs: Vec<&[T]> = batch.iter().map(|row| row[m]).collect();
            let enc = expert.vae.encode_batch(&xs)?;
            let (z, sample_rows) = stack_samples(&enc.posteriors, &eps[m])?;
            let mut dz = vec![T::zero(); z.data().len()];
            let targets: Vec<usize> = match objective {
                Objective::PerExpert => vec![m],
                Objective::CrossReconstruction => (0..m_count).collect(),
            };
            for n in targets {
                let rows: Vec<&[T]> = batch.iter().flat_map(|row| std::iter::repeat_n(row[n], k)).collect();
                let pass = self.experts[n].vae.reconstruction_pass(&z, &rows, recon_weight)?;
                log_lik += pass.log_likelihood;
                pass.decoder_grad.accumulate_into(&mut dec_grads[n]);
                for (d, &g) in dz.iter_mut().zip(pass.decoder_grad.input.data()) {
                    *d += g;
                }
            }
            let mut d_mean = Vec::with_capacity(b_count * latent);
            let mut d_lv = Vec::with_capacity(b_count * latent);
            for (b, post) in enc.posteriors.iter().enumerate() {
                kl_total += kl_weight * kl_standard_normal(post);
                let (km, klv) = kl_gradient(post);
                let (dm, dl) = reparam_backward(post, &sample_rows[b], &dz, latent);
                d_mean.extend(dm.iter().zip(&km).map(|(&a, &c)| a + kl_weight * c));
                d_lv.extend(dl.iter().zip(&klv).map(|(&a, &c)| a + kl_weight * c));
            }
            expert
                .vae
                .encoder_backward(&enc, &d_mean, &d_lv)?
                .accumulate_into(&mut enc_grads[m]);
        }

        let mut grad = Vec::with_capacity(self.param_count());
        for (e, d) in enc_grads.into_iter().zip(dec_grads) {
            grad.extend(e);
            grad.extend(d);
        }
        Ok((kl_total - log_lik, grad))
    }

    /// Generates `target` from whatever modalities are present.
    ///
    /// The posterior is the uniform mixture over present experts; `draw`
    /// picks the component and its noise, and the result is the target
    /// decoder's mean.
    pub fn cross_generate(&self, obs: &ModalityObservation<T>, target: ModalityId, draw: &MixtureDraw<T>) -> Result<Vec<T>, MoeError> {
        let target_pos = self.position(target)?;
        if obs.contains(target) {
            return Err(MoeError::TargetPresent(target));
        }
        self.check_observation(obs)?;
        let present: Vec<&Expert<T>> = self.experts.iter().filter(|e| obs.contains(e.id)).collect();
        if present.is_empty() {
            return Err(MoeError::NothingPresent);
        }
        let expert = present.get(draw.expert).ok_or(MoeError::ExpertIndex {
            index: draw.expert,
            count: present.len(),
        })?;
        let post = expert.vae.encode(obs.get(expert.id).expect("present"))?;
        let sample = reparameterize(&post, &draw.eps)?;
        Ok(self.experts[target_pos].vae.decode(&sample.z)?)
    }

    /// [`cross_generate`](Self::cross_generate) with a uniformly chosen present expert and fresh noise.
    pub fn cross_generate_sampled(&self, obs: &ModalityObservation<T>, target: ModalityId, rng: &mut Rng) -> Result<Vec<T>, MoeError> {
        let present = self.experts.iter().filter(|e| obs.contains(e.id)).count();
        if present == 0 {
            return Err(MoeError::NothingPresent);
        }
        let draw = MixtureDraw {
            expert: rng.random_range(0..present),
            eps: standard_normal_vec(rng, self.latent_dim),
        };
        self.cross_generate(obs, target, &draw)
    }

    fn check_dataset(&self, dataset: &PairedDataset<T>) -> Result<(), MoeError> {
        for e in &self.experts {
            let expected = match e.id {
                ModalityId::Visual => dataset.feature_dim(),
                ModalityId::Label(_) => dataset.embed_dim(),
            };
            crate::vae::check_dim("modality observation", e.vae.observation_dim(), expected)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, training: Option<TrainProvenance>) -> ModelCheckpoint<T> {
        let root = match self.init_seed {
            Some(s) => format!("init_seed={s}"),
            None => "init_seed=none".to_owned(),
        };
        ModelCheckpoint {
            format_version: ModelCheckpoint::<T>::VERSION,
            latent_dim: self.latent_dim,
            init_seed: self.init_seed,
            experts: self
                .experts
                .iter()
                .map(|e| {
                    let lineage = |part: &str| vec![root.clone(), format!("modality={}", e.id), part.to_owned()];
                    ExpertCheckpoint {
                        id: e.id,
                        encoder: e.vae.encoder().to_checkpoint(lineage("encoder")),
                        decoder: e.vae.decoder().to_checkpoint(lineage("decoder")),
                    }
                })
                .collect(),
            training,
        }
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint<T>) -> Result<Self, MoeError> {
        if ckpt.format_version != ModelCheckpoint::<T>::VERSION {
            return Err(NnError::CheckpointVersion(ckpt.format_version).into());
        }
        let experts = ckpt
            .experts
            .iter()
            .map(|e| {
                let vae = ModalityVae::new(DenseNet::from_checkpoint(&e.encoder)?, DenseNet::from_checkpoint(&e.decoder)?)?;
                Ok(Expert { id: e.id, vae })
            })
            .collect::<Result<Vec<_>, MoeError>>()?;
        let mut model = Self::new(experts)?;
        if model.latent_dim != ckpt.latent_dim {
            return Err(MoeError::Model("checkpoint latent_dim disagrees with its experts".into()));
        }
        model.init_seed = ckpt.init_seed;
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainProvenance {
    pub train_config: TrainConfig,
    pub steps_completed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ExpertCheckpoint<T> {
    pub id: ModalityId,
    pub encoder: NetCheckpoint<T>,
    pub decoder: NetCheckpoint<T>,
}

/// Serialized [`MmvaeModel`] bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ModelCheckpoint<T> {
    pub format_version: u32,
    pub latent_dim: usize,
    pub init_seed: Option<u64>,
    pub experts: Vec<ExpertCheckpoint<T>>,
    pub training: Option<TrainProvenance>,
}

impl<T> ModelCheckpoint<T> {
    pub const VERSION: u32 = 1;
}

/// Maximizes the multimodal bound with Adam over seeded minibatches.
///
/// Returns the trained model and the per-step mean negative bound
/// (evaluated before each update).
pub fn train<T: Scalar>(model: &MmvaeModel<T>, dataset: &PairedDataset<T>, config: &TrainConfig) -> Result<(MmvaeModel<T>, Vec<T>), MoeError> {
    config.validate()?;
    model.check_dataset(dataset)?;
    if dataset.is_empty() {
        return Err(MoeError::Config("empty training set".into()));
    }
    let mut trained = model.clone();
    if config.steps == 0 {
        return Ok((trained, Vec::new()));
    }
    let ids = model.modality_ids();
    let rows: Vec<Vec<&[T]>> = dataset
        .examples
        .iter()
        .map(|ex| ids.iter().map(|&id| modality_row(ex, id)).collect())
        .collect();
    let batch_size = config.batch_size.min(rows.len());
    let latent = model.latent_dim();
    let mut rng = rng_from_seed(config.seed);
    let mut adam = AdamState::new(
        model.param_count(),
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut params = trained.to_flat();
    let mut trace = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let batch: Vec<Vec<&[T]>> = sample_indices(&mut rng, rows.len(), batch_size)
            .iter()
            .map(|i| rows[i].clone())
            .collect();
        let eps: Vec<Vec<Vec<Vec<T>>>> = (0..ids.len())
            .map(|_| {
                (0..batch_size)
                    .map(|_| (0..config.samples).map(|_| standard_normal_vec(&mut rng, latent)).collect())
                    .collect()
            })
            .collect();
        let (loss, grad) = trained.negative_elbo_and_grad(&batch, &eps, config.objective)?;
        adam.step(&mut params, &grad)?;
        trained.load_flat(&params)?;
        trace.push(loss);
    }
    Ok((trained, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_diff_grad, init_net, relative_errors, DenseLayer};
    use crate::seed::named_rng;
    use crate::taxonomy::{builtin_taxonomy, generate_dataset, GeneratorConfig, TaxonomyVariant};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            latent_dim: 2,
            label_levels: vec![Level::Subordinate, Level::Basic],
            visual_encoder_hidden: vec![4],
            visual_decoder_hidden: vec![4],
            language_encoder_hidden: vec![3],
            language_decoder_hidden: vec![3],
            hidden_activation: Activation::Tanh,
        }
    }

    fn tiny_model(seed: u64) -> MmvaeModel<f64> {
        MmvaeModel::init(&tiny_config(), 5, 3, seed).unwrap()
    }

    fn random_obs(model: &MmvaeModel<f64>, rng: &mut Rng) -> ModalityObservation<f64> {
        let mut obs = ModalityObservation::new();
        for e in model.experts() {
            obs.insert(e.id, standard_normal_vec(rng, e.vae.observation_dim()));
        }
        obs
    }

    /// Expert with a fixed posterior, independent of its input.
    fn constant_expert(id: ModalityId, mean: &[f64], log_var: &[f64]) -> Expert<f64> {
        let l = mean.len();
        let mut bias = mean.to_vec();
        bias.extend_from_slice(log_var);
        let enc = DenseNet::from_layers(vec![DenseLayer::new(1, 2 * l, vec![0.0; 2 * l], bias, Activation::Identity).unwrap()]).unwrap();
        let dec = DenseNet::zeros(&[l, 1], &[Activation::Identity]).unwrap();
        Expert { id, vae: ModalityVae::new(enc, dec).unwrap() }
    }

    fn unit_obs(ids: &[ModalityId]) -> ModalityObservation<f64> {
        let mut obs = ModalityObservation::new();
        for &id in ids {
            obs.insert(id, vec![0.0]);
        }
        obs
    }

    const IDS: [ModalityId; 3] = [ModalityId::Visual, ModalityId::Label(Level::Subordinate), ModalityId::Label(Level::Basic)];

    #[test]
    fn weights_are_uniform() {
        for cfg in [tiny_config(), tiny_config().with_superordinate()] {
            let model: MmvaeModel<f64> = MmvaeModel::init(&cfg, 5, 3, 1).unwrap();
            let w = model.mixture_weights();
            let m = model.modality_count() as f64;
            assert!(w.iter().all(|&x| x == 1.0 / m));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { label_levels: vec![], ..tiny_config() }.validate().is_err());
        assert!(ModelConfig { label_levels: vec![Level::Basic, Level::Basic], ..tiny_config() }.validate().is_err());
        assert!(ModelConfig { latent_dim: 0, ..tiny_config() }.validate().is_err());
        assert_eq!(tiny_config().with_superordinate().modality_ids().len(), 4);
    }

    #[test]
    fn identical_experts_give_that_density() {
        let mean = [0.3, -0.2];
        let lv = [0.1, -0.4];
        let model = MmvaeModel::new(IDS.iter().map(|&id| constant_expert(id, &mean, &lv)).collect()).unwrap();
        let post = GaussianPosterior::new(mean.to_vec(), lv.to_vec()).unwrap();
        let z = [0.5, 0.1];
        let d = model.joint_posterior_density(&z, &unit_obs(&IDS)).unwrap();
        assert!((d - post.density(&z)).abs() <= 1e-15 * d);
    }

    #[test]
    fn far_component_contributes_nothing() {
        let ids = &IDS[..2];
        let near = constant_expert(ids[0], &[0.0], &[0.0]);
        let far = constant_expert(ids[1], &[100.0], &[0.0]);
        let model = MmvaeModel::new(vec![near, far]).unwrap();
        let peak = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let d = model.joint_posterior_density(&[0.0], &unit_obs(ids)).unwrap();
        assert!((d - 0.5 * peak).abs() < 1e-15);
    }

    #[test]
    fn density_requires_every_modality() {
        let model = tiny_model(1);
        let obs = ModalityObservation::new().with(ModalityId::Visual, vec![0.0; 5]);
        assert_eq!(
            model.joint_posterior_density(&[0.0, 0.0], &obs),
            Err(MoeError::MissingModality(ModalityId::Label(Level::Subordinate)))
        );
        let mut rng = named_rng(1, "x");
        assert!(model.sample_joint(&obs, &mut rng).is_err());
        assert!(model.multimodal_elbo(&obs, &vec![vec![vec![0.0, 0.0]]; 3]).is_err());
    }

    #[test]
    fn log_density_agrees_with_density() {
        let model = tiny_model(4);
        let mut rng = named_rng(4, "obs");
        let obs = random_obs(&model, &mut rng);
        let z = [0.2, -0.3];
        let d = model.joint_posterior_density(&z, &obs).unwrap();
        let ld = model.log_joint_posterior_density(&z, &obs).unwrap();
        assert!((d.ln() - ld).abs() < 1e-12);
    }

    #[test]
    fn near_deterministic_expert_sample() {
        let e = constant_expert(ModalityId::Visual, &[0.0, 0.0], &[-20.0, -20.0]);
        let o = constant_expert(ModalityId::Label(Level::Basic), &[1.0, 1.0], &[0.0, 0.0]);
        let model = MmvaeModel::new(vec![e, o]).unwrap();
        let ids = model.modality_ids();
        let s = model.sample_expert(&unit_obs(&ids), 0, &[2.0, -2.0]).unwrap();
        // the encoder clamps log-variance at -10
        let sigma = (-5.0f64).exp();
        assert_eq!(s.z, vec![2.0 * sigma, -2.0 * sigma]);
        let again = model.sample_expert(&unit_obs(&ids), 0, &[2.0, -2.0]).unwrap();
        assert_eq!(s, again);
        assert!(matches!(model.sample_expert(&unit_obs(&ids), 5, &[0.0, 0.0]), Err(MoeError::ExpertIndex { .. })));
    }

    #[test]
    fn single_expert_bound_is_elbo_single_bitwise() {
        let vae: ModalityVae<f64> = ModalityVae::init(&tiny_config().architecture(ModalityId::Visual, 5, 3), 9).unwrap();
        let model = MmvaeModel::new(vec![Expert { id: ModalityId::Visual, vae: vae.clone() }]).unwrap();
        let mut rng = named_rng(9, "eps");
        for _ in 0..5 {
            let x = standard_normal_vec(&mut rng, 5);
            let eps: Vec<Vec<f64>> = (0..3).map(|_| standard_normal_vec(&mut rng, 2)).collect();
            let obs = ModalityObservation::new().with(ModalityId::Visual, x.clone());
            let a = model.multimodal_elbo(&obs, &[eps.clone()]).unwrap();
            let b = elbo_single(&vae, &x, &eps).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
            let c = model.multimodal_elbo_with(&obs, &[eps.clone()], Objective::CrossReconstruction).unwrap();
            assert!((c - b).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_decoders_and_prior_posteriors() {
        // zero encoders give the prior; zero decoders reconstruct all-zero observations exactly
        let experts = IDS
            .iter()
            .zip([4usize, 3, 2])
            .map(|(&id, d)| {
                let enc = DenseNet::zeros(&[d, 4], &[Activation::Identity]).unwrap();
                let dec = DenseNet::zeros(&[2, d], &[Activation::Identity]).unwrap();
                Expert { id, vae: ModalityVae::new(enc, dec).unwrap() }
            })
            .collect();
        let model = MmvaeModel::new(experts).unwrap();
        let mut obs = ModalityObservation::new();
        for (&id, d) in IDS.iter().zip([4usize, 3, 2]) {
            obs.insert(id, vec![0.0; d]);
        }
        let eps = vec![vec![vec![0.7, -0.3]]; 3];
        let elbo = model.multimodal_elbo(&obs, &eps).unwrap();
        let log_2pi = (2.0 * std::f64::consts::PI).ln();
        let expected = -(4.0 + 3.0 + 2.0) / 2.0 * log_2pi / 3.0;
        assert!((elbo - expected).abs() < 1e-12);
    }

    #[test]
    fn batched_loss_matches_pointwise_bound() {
        let model = tiny_model(3);
        let mut rng = named_rng(3, "batch");
        let obs: Vec<ModalityObservation<f64>> = (0..3).map(|_| random_obs(&model, &mut rng)).collect();
        let ids = model.modality_ids();
        let batch: Vec<Vec<&[f64]>> = obs.iter().map(|o| ids.iter().map(|&id| o.get(id).unwrap()).collect()).collect();
        let eps: Vec<Vec<Vec<Vec<f64>>>> = (0..3)
            .map(|_| (0..3).map(|_| (0..2).map(|_| standard_normal_vec(&mut rng, 2)).collect()).collect())
            .collect();
        for objective in [Objective::PerExpert, Objective::CrossReconstruction] {
            let (loss, _) = model.negative_elbo_and_grad(&batch, &eps, objective).unwrap();
            let expected = -(0..3)
                .map(|b| {
                    let e: Vec<Vec<Vec<f64>>> = (0..3).map(|m| eps[m][b].clone()).collect();
                    model.multimodal_elbo_with(&obs[b], &e, objective).unwrap()
                })
                .sum::<f64>()
                / 3.0;
            assert!((loss - expected).abs() < 1e-12, "{objective:?}: {loss} vs {expected}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for objective in [Objective::PerExpert, Objective::CrossReconstruction] {
            for seed in 1u64..=10 {
                // small observations keep the loss, and so the difference roundoff, small
                let model: MmvaeModel<f64> = MmvaeModel::init(&tiny_config(), 3, 2, seed).unwrap();
                let mut rng = named_rng(seed, "fd");
                let obs: Vec<ModalityObservation<f64>> = (0..2).map(|_| random_obs(&model, &mut rng)).collect();
                let ids = model.modality_ids();
                let batch: Vec<Vec<&[f64]>> = obs.iter().map(|o| ids.iter().map(|&id| o.get(id).unwrap()).collect()).collect();
                let eps: Vec<Vec<Vec<Vec<f64>>>> = (0..3)
                    .map(|_| (0..2).map(|_| vec![standard_normal_vec(&mut rng, 2)]).collect())
                    .collect();
                let (_, analytic) = model.negative_elbo_and_grad(&batch, &eps, objective).unwrap();
                let numeric = finite_diff_grad(
                    |p| {
                        let mut m = model.clone();
                        m.load_flat(p).unwrap();
                        let (l, _) = m.negative_elbo_and_grad(&batch, &eps, objective).unwrap();
                        l
                    },
                    &model.to_flat(),
                    1e-5,
                );
                let s = relative_errors(&analytic, &numeric, 1e-8);
                assert!(s.max_relative < 1e-5, "{objective:?} seed {seed}: {s:?}");
            }
        }
    }

    #[test]
    fn permutation_leaves_density_and_mean_bound_unchanged() {
        let model = tiny_model(6);
        let mut rng = named_rng(6, "perm");
        let obs = random_obs(&model, &mut rng);
        let order = [2, 0, 1];
        let permuted = model.permuted(&order).unwrap();
        let z = [0.4, -0.9];
        let a = model.joint_posterior_density(&z, &obs).unwrap();
        let b = permuted.joint_posterior_density(&z, &obs).unwrap();
        assert!((a - b).abs() <= 1e-15 * a.abs());
        let eps: Vec<Vec<Vec<f64>>> = (0..3).map(|_| vec![standard_normal_vec(&mut rng, 2)]).collect();
        let eps_perm: Vec<Vec<Vec<f64>>> = order.iter().map(|&i| eps[i].clone()).collect();
        let ea = model.multimodal_elbo(&obs, &eps).unwrap();
        let eb = permuted.multimodal_elbo(&obs, &eps_perm).unwrap();
        assert!((ea - eb).abs() < 1e-12);
        assert!(model.permuted(&[0, 0, 1]).is_err());
    }

    #[test]
    fn cross_generate_single_present_is_encode_then_decode() {
        let model = tiny_model(7);
        let x = vec![0.3, -0.1, 0.8];
        let sub = ModalityId::Label(Level::Subordinate);
        let obs = ModalityObservation::new().with(sub, x.clone());
        let eps = vec![0.5, -1.5];
        let out = model.cross_generate(&obs, ModalityId::Visual, &MixtureDraw { expert: 0, eps: eps.clone() }).unwrap();
        let post = model.expert(sub).unwrap().encode(&x).unwrap();
        let z = reparameterize(&post, &eps).unwrap().z;
        assert_eq!(out, model.expert(ModalityId::Visual).unwrap().decode(&z).unwrap());
        let zero = model.cross_generate(&obs, ModalityId::Visual, &MixtureDraw { expert: 0, eps: vec![0.0, 0.0] }).unwrap();
        assert_eq!(zero, model.expert(ModalityId::Visual).unwrap().decode(&post.mean).unwrap());
    }

    #[test]
    fn cross_generate_errors() {
        let model = tiny_model(7);
        let draw = MixtureDraw { expert: 0, eps: vec![0.0, 0.0] };
        let obs = ModalityObservation::new().with(ModalityId::Visual, vec![0.0; 5]);
        assert_eq!(model.cross_generate(&obs, ModalityId::Visual, &draw), Err(MoeError::TargetPresent(ModalityId::Visual)));
        assert_eq!(
            model.cross_generate(&ModalityObservation::new(), ModalityId::Visual, &draw),
            Err(MoeError::NothingPresent)
        );
        let sup = ModalityId::Label(Level::Superordinate);
        assert_eq!(model.cross_generate(&obs, sup, &draw), Err(MoeError::UnknownModality(sup)));
        let bad = ModalityObservation::new().with(ModalityId::Visual, vec![0.0; 2]);
        assert!(model.cross_generate(&bad, ModalityId::Label(Level::Basic), &draw).is_err());
    }

    #[test]
    fn cross_generate_never_reads_target_encoder() {
        let model = tiny_model(8);
        let mut poisoned = model.clone();
        for e in poisoned.experts_mut() {
            if e.id == ModalityId::Visual {
                for layer in e.vae.encoder_mut().layers_mut() {
                    layer.weight_mut().iter_mut().for_each(|w| *w = f64::NAN);
                    layer.bias_mut().iter_mut().for_each(|b| *b = f64::NAN);
                }
            }
        }
        let obs = ModalityObservation::new()
            .with(ModalityId::Label(Level::Subordinate), vec![0.1, 0.2, 0.3])
            .with(ModalityId::Label(Level::Basic), vec![-0.3, 0.0, 0.4]);
        for expert in 0..2 {
            let draw = MixtureDraw { expert, eps: vec![0.3, 0.2] };
            let a = model.cross_generate(&obs, ModalityId::Visual, &draw).unwrap();
            let b = poisoned.cross_generate(&obs, ModalityId::Visual, &draw).unwrap();
            assert_eq!(a, b);
            assert!(b.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn training_edge_cases_and_determinism() {
        let data: PairedDataset<f64> = generate_dataset(
            &builtin_taxonomy(TaxonomyVariant::Base),
            &GeneratorConfig { feature_dim: 5, embed_dim: 3, samples_per_subordinate: 2, ..Default::default() },
        );
        let model = tiny_model(2);
        let zero = TrainConfig { steps: 0, ..Default::default() };
        let (same, trace) = train(&model, &data, &zero).unwrap();
        assert_eq!(same, model);
        assert!(trace.is_empty());

        let cfg = TrainConfig { steps: 25, batch_size: 8, seed: 5, objective: Objective::CrossReconstruction, ..Default::default() };
        let (a, ta) = train(&model, &data, &cfg).unwrap();
        let (b, tb) = train(&model, &data, &cfg).unwrap();
        assert_eq!(ta.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), tb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a, b);
        assert_eq!(ta.len(), 25);

        let wrong: MmvaeModel<f64> = MmvaeModel::init(&tiny_config(), 6, 3, 1).unwrap();
        assert!(train(&wrong, &data, &cfg).is_err());
        assert!(train(&model, &data, &TrainConfig { batch_size: 0, ..cfg }).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = tiny_model(11);
        let prov = TrainProvenance { train_config: TrainConfig::default(), steps_completed: 0 };
        let ckpt = model.to_checkpoint(Some(prov));
        let json = serde_json::to_string(&ckpt).unwrap();
        let back: ModelCheckpoint<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(MmvaeModel::from_checkpoint(&back).unwrap(), model);
        assert!(ckpt.experts[0].encoder.seed_lineage[0].starts_with("init_seed=11"));
    }

    #[test]
    fn rejects_mismatched_latents() {
        let a = constant_expert(ModalityId::Visual, &[0.0], &[0.0]);
        let b = constant_expert(ModalityId::Label(Level::Basic), &[0.0, 0.0], &[0.0, 0.0]);
        assert!(MmvaeModel::new(vec![a.clone(), b]).is_err());
        assert!(MmvaeModel::new(vec![a.clone(), a]).is_err());
        assert!(MmvaeModel::<f64>::new(vec![]).is_err());
        let _unused: DenseNet<f64> = init_net(&[1, 1], &[Activation::Identity], 0).unwrap();
    }
}
