#![allow(dead_code)]

use concept_mmvae::nn::{Activation, DenseNet, Tensor};

/// `f(z + d) - f(z)` without cancellation.
fn activation_difference(act: Activation, z: f64, d: f64) -> f64 {
    match act {
        Activation::Identity => d,
        Activation::Tanh => d.sinh() / ((z + d).cosh() * z.cosh()),
        Activation::Relu => {
            if z > 0.0 && z + d > 0.0 {
                d
            } else if z <= 0.0 && z + d <= 0.0 {
                0.0
            } else {
                (z + d).max(0.0) - z.max(0.0)
            }
        }
    }
}

fn activate(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Identity => z,
        Activation::Tanh => z.tanh(),
        Activation::Relu => z.max(0.0),
    }
}

/// Central differences of `L = sum(net(x) * v)` at step `h`.
///
/// Each `L(θ ± h e_i) − L(θ)` is propagated through the layers as a
/// difference rather than obtained by subtracting two forward passes, so
/// gradients far below the loss scale keep their precision. Covers the
/// parameters listed in `coords` (all of them when `None`), in that order.
pub fn central_differences(net: &DenseNet<f64>, x: &Tensor<f64>, v: &Tensor<f64>, h: f64, coords: Option<&[usize]>) -> Vec<f64> {
    let layers = net.layers();
    // pre-activations and activations per sample and layer
    let mut pre: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut post: Vec<Vec<Vec<f64>>> = Vec::new();
    for row in x.iter_rows() {
        let mut a = row.to_vec();
        let mut zs = Vec::new();
        let mut acts = vec![a.clone()];
        for layer in layers {
            let w = layer.weight();
            let z: Vec<f64> = (0..layer.out_dim())
                .map(|j| layer.bias()[j] + (0..layer.in_dim()).map(|k| w[j * layer.in_dim() + k] * a[k]).sum::<f64>())
                .collect();
            a = z.iter().map(|&v| activate(layer.activation(), v)).collect();
            zs.push(z);
            acts.push(a.clone());
        }
        pre.push(zs);
        post.push(acts);
    }

    let mut owners = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        for j in 0..layer.out_dim() {
            for k in 0..layer.in_dim() {
                owners.push((l, j, Some(k)));
            }
        }
        for j in 0..layer.out_dim() {
            owners.push((l, j, None));
        }
    }
    let all: Vec<usize> = (0..owners.len()).collect();
    let coords = coords.unwrap_or(&all);

    let difference = |l: usize, j: usize, k: Option<usize>, step: f64| -> f64 {
        let mut total = 0.0;
        for b in 0..x.rows() {
            let dz = match k {
                Some(k) => step * post[b][l][k],
                None => step,
            };
            let mut da = vec![0.0; layers[l].out_dim()];
            da[j] = activation_difference(layers[l].activation(), pre[b][l][j], dz);
            for (m, layer) in layers.iter().enumerate().skip(l + 1) {
                let w = layer.weight();
                da = (0..layer.out_dim())
                    .map(|o| {
                        let d: f64 = da.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| w[o * layer.in_dim() + i] * v).sum();
                        activation_difference(layer.activation(), pre[b][m][o], d)
                    })
                    .collect();
            }
            total += da.iter().zip(v.row(b)).map(|(a, c)| a * c).sum::<f64>();
        }
        total
    };

    coords
        .iter()
        .map(|&i| {
            let (l, j, k) = owners[i];
            (difference(l, j, k, h) - difference(l, j, k, -h)) / (2.0 * h)
        })
        .collect()
}
