//! Per-channel batch normalisation.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Quantities cached by a normalisation forward pass for its backward.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    /// Normalised input `(x - mean) / sqrt(var + eps)`.
    pub x_hat: Tensor<T>,
    /// `1 / sqrt(var + eps)` per channel.
    pub inv_std: Vec<T>,
    /// `true` when batch statistics were used (train mode).
    pub batch_stats: bool,
}

/// Statistics observed on a training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (divided by the element count).
    pub var: Vec<T>,
    pub count: usize,
}

fn check_params<T: Real>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let c = input.shape().c;
    if gamma.len() != c {
        return Err(Error::shape("batch_norm", "gamma length", c, gamma.len()));
    }
    if beta.len() != c {
        return Err(Error::shape("batch_norm", "beta length", c, beta.len()));
    }
    Ok(c)
}

fn normalise<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
) -> (Tensor<T>, Tensor<T>) {
    let s = input.shape();
    let mut x_hat = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (g, b) = (gamma.data()[c], beta.data()[c]);
            let (m, is) = (mean[c], inv_std[c]);
            let src = input.plane(n, c);
            let xh = x_hat.plane_mut(n, c);
            for (d, &v) in xh.iter_mut().zip(src) {
                *d = (v - m) * is;
            }
            let xh = x_hat.plane(n, c);
            for (o, &v) in out.plane_mut(n, c).iter_mut().zip(xh) {
                *o = g * v + b;
            }
        }
    }
    (out, x_hat)
}

/// Train-mode normalisation over the batch statistics of every channel.
pub fn batch_norm_train<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>, BatchStats<T>)> {
    let channels = check_params(input, gamma, beta)?;
    let s = input.shape();
    let count = s.n * s.plane();
    let cnt = T::lit(count as f64);
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    for c in 0..channels {
        let mut acc = T::zero();
        for n in 0..s.n {
            for &v in input.plane(n, c) {
                acc += v;
            }
        }
        let m = acc / cnt;
        let mut sq = T::zero();
        for n in 0..s.n {
            for &v in input.plane(n, c) {
                sq += (v - m) * (v - m);
            }
        }
        mean[c] = m;
        var[c] = sq / cnt;
    }
    let eps = T::lit(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (out, x_hat) = normalise(input, gamma, beta, &mean, &inv_std);
    Ok((
        out,
        BatchNormCache {
            x_hat,
            inv_std,
            batch_stats: true,
        },
        BatchStats { mean, var, count },
    ))
}

/// Eval-mode normalisation with fixed running statistics.
pub fn batch_norm_eval<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let channels = check_params(input, gamma, beta)?;
    if running_mean.len() != channels || running_var.len() != channels {
        return Err(Error::shape(
            "batch_norm",
            "running stats length",
            channels,
            running_mean.len(),
        ));
    }
    let eps = T::lit(eps);
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    let (out, x_hat) = normalise(input, gamma, beta, running_mean.data(), &inv_std);
    Ok((
        out,
        BatchNormCache {
            x_hat,
            inv_std,
            batch_stats: false,
        },
    ))
}

/// Gradients with respect to input, gamma and beta.
pub fn batch_norm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = grad_out.shape();
    let mut gx = Tensor::zeros(s);
    let mut gg = Tensor::zeros(gamma.shape());
    let mut gb = Tensor::zeros(gamma.shape());
    let count = T::lit((s.n * s.plane()) as f64);
    for c in 0..s.c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for n in 0..s.n {
            for (&dy, &xh) in grad_out.plane(n, c).iter().zip(cache.x_hat.plane(n, c)) {
                sum_dy += dy;
                sum_dy_xhat += dy * xh;
            }
        }
        gg.data_mut()[c] = sum_dy_xhat;
        gb.data_mut()[c] = sum_dy;
        let g = gamma.data()[c];
        let is = cache.inv_std[c];
        for n in 0..s.n {
            let dy = grad_out.plane(n, c);
            let xh = cache.x_hat.plane(n, c);
            let dst = gx.plane_mut(n, c);
            if cache.batch_stats {
                let k = g * is / count;
                for ((d, &dyv), &xhv) in dst.iter_mut().zip(dy).zip(xh) {
                    *d = k * (count * dyv - sum_dy - xhv * sum_dy_xhat);
                }
            } else {
                for (d, &dyv) in dst.iter_mut().zip(dy) {
                    *d = dyv * g * is;
                }
            }
        }
    }
    (gx, gg, gb)
}
