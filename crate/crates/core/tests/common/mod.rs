#![allow(dead_code)]

pub mod ctc_oracles;
pub mod desk;
pub mod gradients;
pub mod lm_tuning;
pub mod runs;
pub mod statistics;

use crossling::encoder::{ConvSpec, EncoderConfig};
use crossling::numerics::{Param, Parameterized, Tensor};
use rand::Rng;

/// Relative error between two gradient vectors; below a norm of 1e-6 the
/// error is effectively absolute.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    diff / scale.max(1e-6)
}

/// Central difference of `f` at `x[i]`.
pub fn central(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Full numerical gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len()).map(|i| central(&mut x, i, h, &mut f)).collect()
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Checks analytic parameter gradients of `model` against central
/// differences on up to `per_param` random coordinates of each parameter
/// accepted by `select`. `loss` must recompute the forward pass;
/// `grads` must zero and accumulate gradients.
pub fn check_params<M: Parameterized<f64>>(
    model: &mut M,
    select: impl Fn(&str) -> bool,
    per_param: usize,
    rng: &mut impl Rng,
    mut loss: impl FnMut(&mut M) -> f64,
    mut grads: impl FnMut(&mut M),
) -> Vec<(String, f64)> {
    grads(model);
    let analytic: Vec<(String, Vec<f64>)> = model
        .named_params()
        .into_iter()
        .filter(|(n, _)| select(n))
        .map(|(n, p)| (n, p.grad.data().to_vec()))
        .collect();
    let mut out = Vec::new();
    for (name, g) in analytic {
        let coords: Vec<usize> = if g.len() <= per_param {
            (0..g.len()).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..g.len())).collect()
        };
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &c in &coords {
            let h = 1e-5;
            let orig = param(model, &name).value.data()[c];
            param(model, &name).value.data_mut()[c] = orig + h;
            let up = loss(model);
            param(model, &name).value.data_mut()[c] = orig - h;
            let down = loss(model);
            param(model, &name).value.data_mut()[c] = orig;
            a.push(g[c]);
            n.push((up - down) / (2.0 * h));
        }
        out.push((name, rel_err(&a, &n)));
    }
    out
}

fn param<'a, M: Parameterized<f64>>(model: &'a mut M, name: &str) -> &'a mut Param<f64> {
    model
        .named_params_mut()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, p)| p)
        .expect("parameter exists")
}

/// Full stride layout at toy width, so waveforms stay cheap.
pub fn micro_encoder() -> EncoderConfig {
    EncoderConfig {
        conv: [(10, 5), (7, 4), (7, 4), (2, 2), (2, 2)]
            .into_iter()
            .map(|(kernel, stride)| ConvSpec { channels: 4, kernel, stride })
            .collect(),
        depth: 1,
        dim: 8,
        heads: 2,
        ffn_dim: 12,
        layerdrop: 0.0,
        pos_conv_kernel: 3,
        pos_conv_groups: 2,
    }
}
