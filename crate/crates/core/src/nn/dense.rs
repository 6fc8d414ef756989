use std::sync::atomic::{AtomicU64, Ordering};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{shape_err, NnError, Tensor};
use crate::seed::rng_from_seed;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
        }
    }
}

/// `y = act(W x + b)` with `W` stored `[out, in]` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DenseLayer<T> {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<T>,
    bias: Vec<T>,
    activation: Activation,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<T>, bias: Vec<T>, activation: Activation) -> Result<Self, NnError> {
        if in_dim == 0 || out_dim == 0 {
            return Err(NnError::Architecture("layer dimensions must be positive".into()));
        }
        if weight.len() != in_dim * out_dim {
            return Err(shape_err(format!("{out_dim}x{in_dim} weight"), weight.len()));
        }
        if bias.len() != out_dim {
            return Err(shape_err(format!("{out_dim} biases"), bias.len()));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite);
        }
        Ok(DenseLayer { in_dim, out_dim, weight, bias, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> &[T] {
        &self.weight
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    #[cfg(test)]
    pub(crate) fn weight_mut(&mut self) -> &mut [T] {
        &mut self.weight
    }

    #[cfg(test)]
    pub(crate) fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }
}

static NEXT_STATE: AtomicU64 = AtomicU64::new(1);

fn fresh_state() -> u64 {
    NEXT_STATE.fetch_add(1, Ordering::Relaxed)
}

/// Chain of dense layers.
///
/// Every parameter mutation stamps the net with a new state id; a
/// [`ForwardCache`] records the id it was produced under, so running
/// `backward` against modified parameters is caught as a stale cache.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DenseNet<T> {
    layers: Vec<DenseLayer<T>>,
    #[serde(skip, default = "fresh_state")]
    state: u64,
}

impl<T: PartialEq> PartialEq for DenseNet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Per-layer inputs and outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    state: u64,
    dims: Vec<usize>,
    rows: usize,
    input_shape: Vec<usize>,
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Vec<T>>,
}

impl<T> ForwardCache<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetGradients<T> {
    pub layers: Vec<LayerGradient<T>>,
    pub input: Tensor<T>,
}

impl<T: Scalar> NetGradients<T> {
    /// Parameter gradients in the layout of [`DenseNet::to_flat`].
    pub fn params_flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.append_params_flat(&mut out);
        out
    }

    pub fn append_params_flat(&self, out: &mut Vec<T>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
    }

    /// Adds this gradient into a flat accumulator laid out like [`DenseNet::to_flat`].
    pub fn accumulate_into(&self, acc: &mut [T]) {
        let mut i = 0;
        for l in &self.layers {
            for &g in l.weight.iter().chain(&l.bias) {
                acc[i] += g;
                i += 1;
            }
        }
        debug_assert_eq!(i, acc.len());
    }
}

impl<T: Scalar> DenseNet<T> {
    pub fn from_layers(layers: Vec<DenseLayer<T>>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Architecture("a net needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(NnError::Architecture(format!(
                    "layer output {} does not feed next input {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        Ok(DenseNet { layers, state: fresh_state() })
    }

    /// All-zero weights and biases.
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self, NnError> {
        check_arch(dims, activations)?;
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &a)| DenseLayer::new(d[0], d[1], vec![T::zero(); d[0] * d[1]], vec![T::zero(); d[1]], a))
            .collect::<Result<_, _>>()?;
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer<T>] {
        self.state = fresh_state();
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// `[in, hidden..., out]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim()];
        d.extend(self.layers.iter().map(|l| l.out_dim));
        d
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        self.append_flat(&mut out);
        out
    }

    pub fn append_flat(&self, out: &mut Vec<T>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
    }

    /// Inverse of [`to_flat`](Self::to_flat).
    pub fn load_flat(&mut self, params: &[T]) -> Result<(), NnError> {
        if params.len() != self.param_count() {
            return Err(shape_err(format!("{} parameters", self.param_count()), params.len()));
        }
        let mut i = 0;
        for l in self.layers_mut() {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&params[i..i + nw]);
            i += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[i..i + nb]);
            i += nb;
        }
        Ok(())
    }

    /// Output only; skips building a cache.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        self.forward(input).map(|(out, _)| out)
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>), NnError> {
        if input.cols() != self.in_dim() {
            return Err(shape_err(format!("input width {}", self.in_dim()), input.cols()));
        }
        let rows = input.rows();
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.data().to_vec());
        for layer in &self.layers {
            let x = activations.last().expect("input pushed above");
            let mut y = Vec::with_capacity(rows * layer.out_dim);
            for xr in x.chunks(layer.in_dim) {
                for (o, w) in layer.weight.chunks(layer.in_dim).enumerate() {
                    let pre = layer.bias[o] + crate::scalar::dot(w, xr);
                    y.push(layer.activation.apply(pre));
                }
            }
            activations.push(y);
        }
        let mut out_shape = input.shape().to_vec();
        *out_shape.last_mut().expect("nonempty shape") = self.out_dim();
        let out = Tensor::from_parts(out_shape, activations.last().expect("at least one layer").clone());
        let cache = ForwardCache {
            state: self.state,
            dims: self.dims(),
            rows,
            input_shape: input.shape().to_vec(),
            activations,
        };
        Ok((out, cache))
    }

    /// Exact gradients of `sum(output ⊙ output_gradient)` through the cached pass.
    pub fn backward(&self, cache: &ForwardCache<T>, output_gradient: &Tensor<T>) -> Result<NetGradients<T>, NnError> {
        if cache.state != self.state || cache.dims != self.dims() {
            return Err(NnError::StaleCache);
        }
        if output_gradient.cols() != self.out_dim() || output_gradient.rows() != cache.rows {
            return Err(shape_err(
                format!("[{}, {}] output gradient", cache.rows, self.out_dim()),
                format!("{:?}", output_gradient.shape()),
            ));
        }
        let mut upstream = output_gradient.data().to_vec();
        let mut grads: Vec<LayerGradient<T>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.activations[l];
            let y = &cache.activations[l + 1];
            // delta = upstream ⊙ act'(pre)
            for (u, &yv) in upstream.iter_mut().zip(y) {
                *u *= layer.activation.derivative_from_output(yv);
            }
            let delta = upstream;
            let mut gw = vec![T::zero(); layer.weight.len()];
            let mut gb = vec![T::zero(); layer.out_dim];
            let mut gx = vec![T::zero(); cache.rows * layer.in_dim];
            for r in 0..cache.rows {
                let xr = &x[r * layer.in_dim..(r + 1) * layer.in_dim];
                let dr = &delta[r * layer.out_dim..(r + 1) * layer.out_dim];
                let gxr = &mut gx[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (o, &d) in dr.iter().enumerate() {
                    if d == T::zero() {
                        continue;
                    }
                    gb[o] += d;
                    let wrow = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                    let gwrow = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for i in 0..layer.in_dim {
                        gwrow[i] += d * xr[i];
                        gxr[i] += d * wrow[i];
                    }
                }
            }
            grads.push(LayerGradient { weight: gw, bias: gb });
            upstream = gx;
        }
        grads.reverse();
        Ok(NetGradients {
            layers: grads,
            input: Tensor::from_parts(cache.input_shape.clone(), upstream),
        })
    }

    pub fn to_checkpoint(&self, seed_lineage: Vec<String>) -> NetCheckpoint<T> {
        NetCheckpoint {
            format_version: NetCheckpoint::<T>::VERSION,
            layer_dims: self.dims(),
            activations: self.activations(),
            params: self.to_flat(),
            seed_lineage,
        }
    }

    pub fn from_checkpoint(ckpt: &NetCheckpoint<T>) -> Result<Self, NnError> {
        if ckpt.format_version != NetCheckpoint::<T>::VERSION {
            return Err(NnError::CheckpointVersion(ckpt.format_version));
        }
        let mut net = Self::zeros(&ckpt.layer_dims, &ckpt.activations)?;
        net.load_flat(&ckpt.params)?;
        if ckpt.params.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite);
        }
        Ok(net)
    }
}

/// Serialized form of a [`DenseNet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct NetCheckpoint<T> {
    pub format_version: u32,
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub params: Vec<T>,
    /// How the initial parameters were seeded, outermost first.
    pub seed_lineage: Vec<String>,
}

impl<T> NetCheckpoint<T> {
    pub const VERSION: u32 = 1;
}

fn check_arch(dims: &[usize], activations: &[Activation]) -> Result<(), NnError> {
    if dims.len() < 2 {
        return Err(NnError::Architecture("need at least input and output dims".into()));
    }
    if activations.len() != dims.len() - 1 {
        return Err(NnError::Architecture(format!(
            "{} layers but {} activations",
            dims.len() - 1,
            activations.len()
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(NnError::Architecture("dimensions must be positive".into()));
    }
    Ok(())
}

/// Weights i.i.d. `N(0, 1/fan_in)`, biases zero. Deterministic per seed.
pub fn init_net<T: Scalar>(layer_dims: &[usize], activations: &[Activation], seed: u64) -> Result<DenseNet<T>, NnError> {
    check_arch(layer_dims, activations)?;
    let mut rng = rng_from_seed(seed);
    let layers = layer_dims
        .windows(2)
        .zip(activations)
        .map(|(d, &a)| {
            let (fan_in, fan_out) = (d[0], d[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let weight = (0..fan_in * fan_out)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::c(z * scale)
                })
                .collect();
            DenseLayer::new(fan_in, fan_out, weight, vec![T::zero(); fan_out], a)
        })
        .collect::<Result<_, _>>()?;
    DenseNet::from_layers(layers)
}
