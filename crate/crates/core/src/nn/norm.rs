//! Per-channel batch normalization (training mode) and its folding into the
//! preceding convolution for export.

use crate::error::{Error, Result};
use crate::nn::conv::Activation;
use crate::tensor::{dot, lane_sum, Real, Tensor};

pub const BN_EPS: f64 = 1e-5;

pub(crate) struct BnForward<T> {
    pub output: Tensor<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

fn dims<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::shape(format!("batch_norm expects NCHW, got {:?}", x.shape()))),
    }
}

/// Normalize, apply the affine map, then `act`.
pub(crate) fn batch_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    act: Activation,
) -> Result<BnForward<T>> {
    let (n, c, plane) = dims(x)?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!("batch_norm affine params for {c} channels")));
    }
    let count = n * plane;
    if count == 0 {
        return Err(Error::shape("batch_norm over an empty batch"));
    }
    let inv_count = T::one() / T::of(count as f64);
    let eps = T::of(BN_EPS);
    let data = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum = T::zero();
        for b in 0..n {
            sum += lane_sum(&data[(b * c + ch) * plane..][..plane]);
        }
        let m = sum * inv_count;
        let mut sq = T::zero();
        let mut centered = vec![T::zero(); plane];
        for b in 0..n {
            for (d, &v) in centered.iter_mut().zip(&data[(b * c + ch) * plane..][..plane]) {
                *d = v - m;
            }
            sq += dot(&centered, &centered);
        }
        mean[ch] = m;
        var[ch] = sq * inv_count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = vec![T::zero(); data.len()];
    for b in 0..n {
        for ch in 0..c {
            let at = (b * c + ch) * plane;
            let scale = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - mean[ch] * scale;
            let dst = out[at..at + plane].iter_mut().zip(&data[at..at + plane]);
            match act {
                Activation::None => dst.for_each(|(o, &v)| *o = v * scale + shift),
                Activation::Relu6 => {
                    let six = T::of(6.0);
                    dst.for_each(|(o, &v)| *o = (v * scale + shift).max(T::zero()).min(six))
                }
            }
        }
    }
    Ok(BnForward {
        output: Tensor::new(x.shape().to_vec(), out)?,
        mean,
        var,
        inv_std,
    })
}

pub(crate) struct BnGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub(crate) fn batch_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
    dy: &[T],
) -> Result<BnGrads<T>> {
    let (n, c, plane) = dims(x)?;
    let count = T::of((n * plane) as f64);
    let data = x.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        for b in 0..n {
            let at = (b * c + ch) * plane;
            let g = &dy[at..at + plane];
            let s = lane_sum(g);
            dbeta[ch] += s;
            // sum g * (v - mean) = sum g * v - mean * sum g
            dgamma[ch] += (dot(g, &data[at..at + plane]) - mean[ch] * s) * inv_std[ch];
        }
    }
    let mut dx = vec![T::zero(); data.len()];
    for ch in 0..c {
        // dx = gamma * inv_std / M * (M * dy - sum(dy) - xhat * sum(dy * xhat))
        // expanded to dx = a * dy + c * x + b
        let k = gamma[ch] * inv_std[ch] / count;
        let (m, is, db, dg) = (mean[ch], inv_std[ch], dbeta[ch], dgamma[ch]);
        let a = k * count;
        let cx = -k * is * dg;
        let b0 = -k * db + k * m * is * dg;
        for b in 0..n {
            let at = (b * c + ch) * plane;
            let src = data[at..at + plane].iter().zip(&dy[at..at + plane]);
            for (d, (&v, &gy)) in dx[at..at + plane].iter_mut().zip(src) {
                *d = a * gy + cx * v + b0;
            }
        }
    }
    Ok(BnGrads { dx, dgamma, dbeta })
}

/// Fold inference-time normalization into a convolution's weights and bias.
///
/// `weight` is `[cout, ...]`; returns the scaled weights and the new bias.
pub fn fold_batch_norm(
    weight: &Tensor<f32>,
    bias: Option<&[f32]>,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
) -> Result<(Tensor<f32>, Vec<f32>)> {
    let cout = weight.shape()[0];
    if [gamma.len(), beta.len(), running_mean.len(), running_var.len()] != [cout; 4] {
        return Err(Error::shape("fold_batch_norm parameter lengths"));
    }
    let per = weight.len() / cout.max(1);
    let mut w = weight.clone();
    let mut b = vec![0.0f32; cout];
    for co in 0..cout {
        let scale = gamma[co] / (running_var[co] + BN_EPS as f32).sqrt();
        w.data_mut()[co * per..(co + 1) * per].iter_mut().for_each(|v| *v *= scale);
        let b0 = bias.map_or(0.0, |b| b[co]);
        b[co] = beta[co] + (b0 - running_mean[co]) * scale;
    }
    Ok((w, b))
}
