//! Single-modality Gaussian VAE.
//!
//! The encoder emits `[μ ‖ log σ²]`; log-variances are clamped to
//! `[-10, 10]` before use. Observations are modelled with a unit-variance
//! Gaussian likelihood and the prior is standard normal.

use rand::seq::index::sample as sample_indices;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::moe::TrainConfig;
use crate::nn::{init_net, Activation, AdamConfig, AdamState, DenseNet, ForwardCache, NetGradients, NnError, Tensor};
use crate::seed::{derive_seed, rng_from_seed, Rng};
use crate::Scalar;

pub const LOG_VARIANCE_MIN: f64 = -10.0;
pub const LOG_VARIANCE_MAX: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VaeError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("posterior entries must be finite")]
    NonFinite,
    #[error("at least one latent sample is required")]
    NoSamples,
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<(), VaeError> {
    if expected == got {
        Ok(())
    } else {
        Err(VaeError::Dimension { what, expected, got })
    }
}

/// Diagonal Gaussian `q(z | x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GaussianPosterior<T> {
    pub mean: Vec<T>,
    pub log_variance: Vec<T>,
}

impl<T: Scalar> GaussianPosterior<T> {
    pub fn new(mean: Vec<T>, log_variance: Vec<T>) -> Result<Self, VaeError> {
        check_dim("log-variance", mean.len(), log_variance.len())?;
        if mean.iter().chain(&log_variance).any(|v| !v.is_finite()) {
            return Err(VaeError::NonFinite);
        }
        Ok(GaussianPosterior { mean, log_variance })
    }

    pub fn standard(latent_dim: usize) -> Self {
        GaussianPosterior {
            mean: vec![T::zero(); latent_dim],
            log_variance: vec![T::zero(); latent_dim],
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std_dev(&self) -> Vec<T> {
        self.log_variance.iter().map(|&lv| (lv / T::c(2.0)).exp()).collect()
    }

    /// `log q(z)`.
    pub fn log_density(&self, z: &[T]) -> T {
        debug_assert_eq!(z.len(), self.latent_dim());
        let half = T::c(0.5);
        let log_2pi = (T::PI() + T::PI()).ln();
        self.mean
            .iter()
            .zip(&self.log_variance)
            .zip(z)
            .map(|((&m, &lv), &zi)| {
                let d = zi - m;
                -half * (log_2pi + lv + d * d / lv.exp())
            })
            .sum()
    }

    pub fn density(&self, z: &[T]) -> T {
        self.log_density(z).exp()
    }
}

/// A posterior draw together with the noise that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LatentSample<T> {
    pub z: Vec<T>,
    pub eps: Vec<T>,
}

/// `z = μ + exp(log σ² / 2) ⊙ ε`.
pub fn reparameterize<T: Scalar>(post: &GaussianPosterior<T>, eps: &[T]) -> Result<LatentSample<T>, VaeError> {
    check_dim("noise", post.latent_dim(), eps.len())?;
    let z = post
        .mean
        .iter()
        .zip(&post.log_variance)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (lv / T::c(2.0)).exp() * e)
        .collect();
    Ok(LatentSample { z, eps: eps.to_vec() })
}

/// Closed-form `KL(q ‖ N(0, I)) = ½ Σ (μ² + e^{lv} − 1 − lv)`.
pub fn kl_standard_normal<T: Scalar>(post: &GaussianPosterior<T>) -> T {
    let half = T::c(0.5);
    post.mean
        .iter()
        .zip(&post.log_variance)
        .map(|(&m, &lv)| half * (m * m + lv.exp() - T::one() - lv))
        .sum()
}

/// Gradient of [`kl_standard_normal`] with respect to `(μ, log σ²)`.
pub(crate) fn kl_gradient<T: Scalar>(post: &GaussianPosterior<T>) -> (Vec<T>, Vec<T>) {
    let half = T::c(0.5);
    (
        post.mean.clone(),
        post.log_variance.iter().map(|&lv| half * (lv.exp() - T::one())).collect(),
    )
}

/// `log N(x; mean, I)`.
pub fn gaussian_unit_log_likelihood<T: Scalar>(x: &[T], mean: &[T]) -> T {
    let d = T::c(x.len() as f64);
    let log_2pi = (T::PI() + T::PI()).ln();
    -T::c(0.5) * crate::scalar::squared_distance(x, mean) - d / T::c(2.0) * log_2pi
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    #[default]
    GaussianUnitVariance,
}

/// Layer widths for one modality's encoder/decoder pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeArchitecture {
    pub observation_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub hidden_activation: Activation,
}

impl VaeArchitecture {
    pub fn encoder_dims(&self) -> Vec<usize> {
        let mut d = vec![self.observation_dim];
        d.extend(&self.encoder_hidden);
        d.push(2 * self.latent_dim);
        d
    }

    pub fn decoder_dims(&self) -> Vec<usize> {
        let mut d = vec![self.latent_dim];
        d.extend(&self.decoder_hidden);
        d.push(self.observation_dim);
        d
    }

    fn activations(&self, hidden: usize) -> Vec<Activation> {
        let mut a = vec![self.hidden_activation; hidden];
        a.push(Activation::Identity);
        a
    }

    pub fn encoder_activations(&self) -> Vec<Activation> {
        self.activations(self.encoder_hidden.len())
    }

    pub fn decoder_activations(&self) -> Vec<Activation> {
        self.activations(self.decoder_hidden.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ModalityVae<T> {
    encoder: DenseNet<T>,
    decoder: DenseNet<T>,
    latent_dim: usize,
    observation_dim: usize,
    likelihood: Likelihood,
}

/// Batched encoder pass kept for the backward sweep.
pub(crate) struct EncodedBatch<T> {
    pub posteriors: Vec<GaussianPosterior<T>>,
    cache: ForwardCache<T>,
    /// Whether each raw log-variance fell strictly inside the clamp range.
    inside_clamp: Vec<bool>,
}

/// Value and gradient of a weighted reconstruction term.
pub(crate) struct ReconstructionPass<T> {
    /// Σ_rows weight · log p(target | z).
    pub log_likelihood: T,
    /// Gradient of the *negated* weighted log-likelihood w.r.t. decoder parameters.
    pub decoder_grad: NetGradients<T>,
}

impl<T: Scalar> ModalityVae<T> {
    pub fn new(encoder: DenseNet<T>, decoder: DenseNet<T>) -> Result<Self, VaeError> {
        let observation_dim = encoder.in_dim();
        if encoder.out_dim() % 2 != 0 {
            return Err(VaeError::Dimension {
                what: "encoder output (must be 2 × latent)",
                expected: encoder.out_dim() + 1,
                got: encoder.out_dim(),
            });
        }
        let latent_dim = encoder.out_dim() / 2;
        check_dim("decoder input", latent_dim, decoder.in_dim())?;
        check_dim("decoder output", observation_dim, decoder.out_dim())?;
        Ok(ModalityVae {
            encoder,
            decoder,
            latent_dim,
            observation_dim,
            likelihood: Likelihood::GaussianUnitVariance,
        })
    }

    /// Seeds the encoder and decoder from child seeds of `seed`.
    pub fn init(arch: &VaeArchitecture, seed: u64) -> Result<Self, VaeError> {
        let encoder = init_net(&arch.encoder_dims(), &arch.encoder_activations(), derive_seed(seed, "encoder"))?;
        let decoder = init_net(&arch.decoder_dims(), &arch.decoder_activations(), derive_seed(seed, "decoder"))?;
        Self::new(encoder, decoder)
    }

    pub fn encoder(&self) -> &DenseNet<T> {
        &self.encoder
    }

    pub fn decoder(&self) -> &DenseNet<T> {
        &self.decoder
    }

    #[cfg(test)]
    pub(crate) fn encoder_mut(&mut self) -> &mut DenseNet<T> {
        &mut self.encoder
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn observation_dim(&self) -> usize {
        self.observation_dim
    }

    pub fn likelihood(&self) -> Likelihood {
        self.likelihood
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    /// Encoder parameters followed by decoder parameters.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        self.append_flat(&mut out);
        out
    }

    pub fn append_flat(&self, out: &mut Vec<T>) {
        self.encoder.append_flat(out);
        self.decoder.append_flat(out);
    }

    pub fn load_flat(&mut self, params: &[T]) -> Result<(), VaeError> {
        check_dim("parameter vector", self.param_count(), params.len())?;
        let split = self.encoder.param_count();
        self.encoder.load_flat(&params[..split])?;
        self.decoder.load_flat(&params[split..])?;
        Ok(())
    }

    fn split_head(&self, row: &[T]) -> (GaussianPosterior<T>, Vec<bool>) {
        let (lo, hi) = (T::c(LOG_VARIANCE_MIN), T::c(LOG_VARIANCE_MAX));
        let mean = row[..self.latent_dim].to_vec();
        let raw = &row[self.latent_dim..];
        let inside = raw.iter().map(|&v| v > lo && v < hi).collect();
        let log_variance = raw.iter().map(|&v| v.max(lo).min(hi)).collect();
        (GaussianPosterior { mean, log_variance }, inside)
    }

    pub fn encode(&self, x: &[T]) -> Result<GaussianPosterior<T>, VaeError> {
        check_dim("observation", self.observation_dim, x.len())?;
        let out = self.encoder.predict(&Tensor::vector(x.to_vec())?)?;
        Ok(self.split_head(out.data()).0)
    }

    /// Decoder mean for a latent point.
    pub fn decode(&self, z: &[T]) -> Result<Vec<T>, VaeError> {
        check_dim("latent", self.latent_dim, z.len())?;
        Ok(self.decoder.predict(&Tensor::vector(z.to_vec())?)?.into_data())
    }

    pub(crate) fn encode_batch<R: AsRef<[T]>>(&self, xs: &[R]) -> Result<EncodedBatch<T>, VaeError> {
        for x in xs {
            check_dim("observation", self.observation_dim, x.as_ref().len())?;
        }
        let input = Tensor::from_rows(xs)?;
        let (out, cache) = self.encoder.forward(&input)?;
        let mut posteriors = Vec::with_capacity(xs.len());
        let mut inside_clamp = Vec::with_capacity(xs.len() * self.latent_dim);
        for row in out.iter_rows() {
            let (p, inside) = self.split_head(row);
            posteriors.push(p);
            inside_clamp.extend(inside);
        }
        Ok(EncodedBatch { posteriors, cache, inside_clamp })
    }

    /// Backpropagates `(∂L/∂μ, ∂L/∂log σ²)` rows through the clamp and encoder.
    pub(crate) fn encoder_backward(&self, batch: &EncodedBatch<T>, d_mean: &[T], d_log_var: &[T]) -> Result<NetGradients<T>, VaeError> {
        let l = self.latent_dim;
        let rows = batch.posteriors.len();
        let mut grad = Vec::with_capacity(rows * 2 * l);
        for r in 0..rows {
            grad.extend_from_slice(&d_mean[r * l..(r + 1) * l]);
            for j in 0..l {
                let g = if batch.inside_clamp[r * l + j] { d_log_var[r * l + j] } else { T::zero() };
                grad.push(g);
            }
        }
        Ok(self.encoder.backward(&batch.cache, &Tensor::from_parts(vec![rows, 2 * l], grad))?)
    }

    /// Decodes each latent row and scores it against its target row.
    ///
    /// Returns the weighted log-likelihood sum and the gradients of its
    /// negation, including `∂/∂z` in `decoder_grad.input`.
    pub(crate) fn reconstruction_pass<R: AsRef<[T]>>(&self, z: &Tensor<T>, targets: &[R], weight: T) -> Result<ReconstructionPass<T>, VaeError> {
        check_dim("reconstruction targets", z.rows(), targets.len())?;
        let (x_hat, cache) = self.decoder.forward(z)?;
        let mut ll = T::zero();
        let mut grad = Vec::with_capacity(x_hat.data().len());
        for (row, target) in x_hat.iter_rows().zip(targets) {
            let target = target.as_ref();
            check_dim("observation", self.observation_dim, target.len())?;
            ll += weight * gaussian_unit_log_likelihood(target, row);
            grad.extend(row.iter().zip(target).map(|(&xh, &x)| weight * (xh - x)));
        }
        let decoder_grad = self.decoder.backward(&cache, &Tensor::from_parts(x_hat.shape().to_vec(), grad))?;
        Ok(ReconstructionPass { log_likelihood: ll, decoder_grad })
    }

    /// Mean negative ELBO over a batch and its gradient (layout of [`to_flat`](Self::to_flat)).
    ///
    /// `eps[b]` holds the `K ≥ 1` noise vectors for example `b`.
    pub fn negative_elbo_and_grad<R: AsRef<[T]>>(&self, xs: &[R], eps: &[Vec<Vec<T>>]) -> Result<(T, Vec<T>), VaeError> {
        check_dim("noise batches", xs.len(), eps.len())?;
        let batch = xs.len();
        let k = eps.first().map(Vec::len).unwrap_or(0);
        if k == 0 || eps.iter().any(|e| e.len() != k) {
            return Err(VaeError::NoSamples);
        }
        let enc = self.encode_batch(xs)?;
        let (z, rows) = stack_samples(&enc.posteriors, eps)?;
        let targets: Vec<&[T]> = xs.iter().flat_map(|x| std::iter::repeat_n(x.as_ref(), k)).collect();
        let inv_bk = T::one() / T::c((batch * k) as f64);
        let recon = self.reconstruction_pass(&z, &targets, inv_bk)?;

        let inv_b = T::one() / T::c(batch as f64);
        let mut kl_total = T::zero();
        let mut d_mean = Vec::with_capacity(batch * self.latent_dim);
        let mut d_lv = Vec::with_capacity(batch * self.latent_dim);
        let dz = recon.decoder_grad.input.data();
        for (b, post) in enc.posteriors.iter().enumerate() {
            kl_total += kl_standard_normal(post);
            let (km, klv) = kl_gradient(post);
            let (dm, dl) = reparam_backward(post, &rows[b], dz, self.latent_dim);
            d_mean.extend(dm.iter().zip(&km).map(|(&a, &c)| a + inv_b * c));
            d_lv.extend(dl.iter().zip(&klv).map(|(&a, &c)| a + inv_b * c));
        }
        let enc_grad = self.encoder_backward(&enc, &d_mean, &d_lv)?;
        let mut grad = enc_grad.params_flat();
        recon.decoder_grad.append_params_flat(&mut grad);
        Ok((inv_b * kl_total - recon.log_likelihood, grad))
    }
}

/// Stacks reparameterized draws into a `[Σ K_b, L]` latent matrix.
/// `rows[b]` lists `(row index, eps)` for example `b`.
#[allow(clippy::type_complexity)]
pub(crate) fn stack_samples<T: Scalar>(
    posteriors: &[GaussianPosterior<T>],
    eps: &[Vec<Vec<T>>],
) -> Result<(Tensor<T>, Vec<Vec<(usize, Vec<T>)>>), VaeError> {
    let l = posteriors.first().map(|p| p.latent_dim()).unwrap_or(0);
    let mut data = Vec::new();
    let mut rows = Vec::with_capacity(posteriors.len());
    let mut r = 0;
    for (post, draws) in posteriors.iter().zip(eps) {
        let mut mine = Vec::with_capacity(draws.len());
        for e in draws {
            let s = reparameterize(post, e)?;
            data.extend(s.z);
            mine.push((r, s.eps));
            r += 1;
        }
        rows.push(mine);
    }
    Ok((Tensor::from_parts(vec![r, l], data), rows))
}

/// Chain rule through `z = μ + exp(lv/2) ε` for one posterior, summing over its draws.
pub(crate) fn reparam_backward<T: Scalar>(post: &GaussianPosterior<T>, draws: &[(usize, Vec<T>)], dz: &[T], l: usize) -> (Vec<T>, Vec<T>) {
    let sigma = post.std_dev();
    let mut dm = vec![T::zero(); l];
    let mut dl = vec![T::zero(); l];
    let half = T::c(0.5);
    for (row, e) in draws {
        let g = &dz[row * l..(row + 1) * l];
        for j in 0..l {
            dm[j] += g[j];
            dl[j] += g[j] * e[j] * sigma[j] * half;
        }
    }
    (dm, dl)
}

/// `log p(x | z)` under the unit-variance Gaussian likelihood.
pub fn log_likelihood<T: Scalar>(vae: &ModalityVae<T>, x: &[T], z: &[T]) -> Result<T, VaeError> {
    check_dim("observation", vae.observation_dim, x.len())?;
    let mean = vae.decode(z)?;
    Ok(match vae.likelihood {
        Likelihood::GaussianUnitVariance => gaussian_unit_log_likelihood(x, &mean),
    })
}

/// `(1/K) Σ_k log p(x | z_k) − KL(q(z|x) ‖ N(0, I))` with `z_k` from `eps[k]`.
pub fn elbo_single<T: Scalar>(vae: &ModalityVae<T>, x: &[T], eps: &[Vec<T>]) -> Result<T, VaeError> {
    if eps.is_empty() {
        return Err(VaeError::NoSamples);
    }
    let post = vae.encode(x)?;
    let mut recon = T::zero();
    for e in eps {
        let s = reparameterize(&post, e)?;
        recon += log_likelihood(vae, x, &s.z)?;
    }
    Ok(recon / T::c(eps.len() as f64) - kl_standard_normal(&post))
}

pub(crate) fn standard_normal_vec<T: Scalar>(rng: &mut Rng, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::c(z)
        })
        .collect()
}

/// Fits one VAE to `data` with Adam; returns the per-step mean negative ELBO.
pub fn train_vae<T: Scalar>(vae: &mut ModalityVae<T>, data: &[Vec<T>], config: &TrainConfig) -> Result<Vec<T>, VaeError> {
    if data.is_empty() {
        return Err(VaeError::Dimension { what: "training set", expected: 1, got: 0 });
    }
    let mut rng = rng_from_seed(config.seed);
    let mut adam = AdamState::new(
        vae.param_count(),
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let batch = config.batch_size.min(data.len());
    let mut params = vae.to_flat();
    let mut trace = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let idx = sample_indices(&mut rng, data.len(), batch);
        let xs: Vec<&[T]> = idx.iter().map(|i| data[i].as_slice()).collect();
        let eps: Vec<Vec<Vec<T>>> = (0..batch)
            .map(|_| (0..config.samples).map(|_| standard_normal_vec(&mut rng, vae.latent_dim)).collect())
            .collect();
        let (loss, grad) = vae.negative_elbo_and_grad(&xs, &eps)?;
        adam.step(&mut params, &grad)?;
        vae.load_flat(&params)?;
        trace.push(loss);
    }
    Ok(trace)
}
