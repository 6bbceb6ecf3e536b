//! Exactly specified numeric kernels shared by the whole crate:
//! normalization, activations, attention, sinusoidal timestep
//! embeddings, patchify/unpatchify, and a central-difference gradient
//! check harness.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Last-axis layer normalization without learnable affine, using the
/// population variance: y = (x - mean) / sqrt(var + eps).
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    if !x.all_finite() {
        return Err(Error::Numeric("layer_norm: non-finite input".into()));
    }
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("layer_norm: rank-0 tensor".into()))?;
    let rows = x.len() / c;
    let cn = T::from_usize(c);
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        let xs = &x.data()[r * c..(r + 1) * c];
        let mean = xs.iter().fold(T::zero(), |a, &v| a + v) / cn;
        let var = xs
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            / cn;
        let inv = T::one() / (var + eps).sqrt();
        for j in 0..c {
            out[r * c + j] = (xs[j] - mean) * inv;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Elementwise x * sigmoid(x).
pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v / (T::one() + (-v).exp()))
}

/// Row-stochastic softmax over the last axis with max subtraction.
pub fn softmax_last_axis<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = *x.shape().last().expect("softmax on rank-0 tensor");
    let rows = x.len() / c;
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        let xs = &x.data()[r * c..(r + 1) * c];
        let max = xs.iter().fold(xs[0], |a, &v| if v > a { v } else { a });
        let mut sum = T::zero();
        for j in 0..c {
            let e = (xs[j] - max).exp();
            out[r * c + j] = e;
            sum = sum + e;
        }
        for j in 0..c {
            out[r * c + j] = out[r * c + j] / sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// Single-head attention: softmax(Q K^T / sqrt(d_h)) V with Q, K, V of
/// shape (L, d_h).
pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if q.shape().len() != 2
        || k.shape().len() != 2
        || v.shape().len() != 2
        || k.shape()[1] != q.shape()[1]
        || v.shape()[0] != k.shape()[0]
    {
        return Err(Error::Shape("attention: Q/K/V must be (L, d_h)".into()));
    }
    let dh = q.shape()[1];
    if dh == 0 {
        return Err(Error::Invalid("attention: d_h = 0".into()));
    }
    let kt = transpose2d(k);
    let mut scores = q.matmul(&kt)?;
    let scale = T::one() / T::from_usize(dh).sqrt();
    scores = scores.map(|s| s * scale);
    let probs = softmax_last_axis(&scores);
    probs.matmul(v)
}

fn transpose2d<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    Tensor::from_fn(vec![c, r], |i| x.data()[(i % r) * c + i / r])
}

/// Sinusoidal timestep embedding: first half sin(t * w_k), second half
/// cos(t * w_k), w_k = 10000^(-2k/dim).
pub fn time_embedding<T: Scalar>(t: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Invalid(format!("time_embedding: odd dim {dim}")));
    }
    let half = dim / 2;
    let tf = t as f64;
    let mut out = vec![T::zero(); dim];
    for k in 0..half {
        let omega = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        out[k] = T::from_f64((tf * omega).sin());
        out[half + k] = T::from_f64((tf * omega).cos());
    }
    Tensor::new(vec![dim], out)
}

/// (F,C,H,W) -> (F*(H/p)*(W/p), C*p*p) tokens, frame-major then raster
/// order of patches.
pub fn patchify<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("patchify: rank-4 expected, got {s:?}")));
    }
    let (f, c, h, w) = (s[0], s[1], s[2], s[3]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Invalid(format!(
            "patchify: p={p} does not divide {h}x{w}"
        )));
    }
    let (hp, wp) = (h / p, w / p);
    let width = c * p * p;
    let mut out = vec![T::zero(); x.len()];
    for fr in 0..f {
        for i in 0..hp {
            for j in 0..wp {
                let tok = fr * hp * wp + i * wp + j;
                for ch in 0..c {
                    for a in 0..p {
                        for b in 0..p {
                            out[tok * width + ch * p * p + a * p + b] =
                                x.data()[fr * c * h * w + ch * h * w + (i * p + a) * w + j * p + b];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![f * hp * wp, width], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(
    tokens: &Tensor<T>,
    p: usize,
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let (hp, wp) = (height / p, width / p);
    let tok_width = channels * p * p;
    if tokens.shape() != [frames * hp * wp, tok_width] {
        return Err(Error::Shape(format!(
            "unpatchify: tokens {:?} incompatible with {}x{}x{}x{} p={}",
            tokens.shape(),
            frames,
            channels,
            height,
            width,
            p
        )));
    }
    let mut out = vec![T::zero(); frames * channels * height * width];
    for fr in 0..frames {
        for i in 0..hp {
            for j in 0..wp {
                let tok = fr * hp * wp + i * wp + j;
                for ch in 0..channels {
                    for a in 0..p {
                        for b in 0..p {
                            out[fr * channels * height * width
                                + ch * height * width
                                + (i * p + a) * width
                                + j * p
                                + b] = tokens.data()[tok * tok_width + ch * p * p + a * p + b];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![frames, channels, height, width], out)
}

/// Outcome of one parameter tensor's central-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub parameter_name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compare analytic gradients of a scalar loss against central
/// differences on a random coordinate subset (at least 32 coordinates
/// per parameter tensor, or the whole tensor if smaller).
///
/// `build_loss` must be a deterministic function of the parameter
/// store; this is verified by evaluating the base loss twice.
pub fn grad_check(
    params: &ParamStore<f64>,
    build_loss: impl Fn(&mut Graph<f64>, &crate::params::Binding) -> NodeId,
    eps: f64,
    tolerance: f64,
    seed: u64,
) -> Result<Vec<GradCheckReport>> {
    let eval = |store: &ParamStore<f64>| -> f64 {
        let mut g = Graph::new();
        let binding = store.bind_frozen(&mut g);
        let loss = build_loss(&mut g, &binding);
        g.value(loss).item()
    };

    let base = eval(params);
    if !base.is_finite() {
        return Err(Error::Numeric(format!("grad_check: non-finite loss {base}")));
    }
    if eval(params) != base {
        return Err(Error::Numeric(
            "grad_check: loss function is not deterministic".into(),
        ));
    }

    let mut g = Graph::new();
    let binding = params.bind_trainable(&mut g);
    let loss = build_loss(&mut g, &binding);
    g.backward(loss);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for (name, value) in params.iter() {
        let analytic = g
            .grad(binding.id(name))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
        let n = value.len();
        let mut coords: Vec<usize> = (0..n).collect();
        coords.shuffle(&mut rng);
        coords.truncate(n.min(32));
        let mut max_rel = 0.0f64;
        for &i in &coords {
            let mut store = params.clone();
            store.get_mut(name)?.data_mut()[i] += eps;
            let plus = eval(&store);
            let mut store = params.clone();
            store.get_mut(name)?.data_mut()[i] -= eps;
            let minus = eval(&store);
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        reports.push(GradCheckReport {
            parameter_name: name.to_string(),
            max_relative_error: max_rel,
            tolerance,
            passed: max_rel <= tolerance,
        });
    }
    Ok(reports)
}
