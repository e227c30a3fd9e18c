//! Batch normalization over the channel axis of `[N, C, ...]` tensors.
//!
//! Training mode normalizes by batch statistics (biased variance) and updates
//! the caller-owned running statistics with the unbiased variance; eval mode
//! normalizes by the running statistics alone.

use super::{arg_err, shape_err, Mode, TensorError};
use crate::element::Element;

/// Running mean/variance owned by the layer, not the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    /// Fresh statistics: mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

pub fn validate<T: Element>(
    input: &[usize],
    gamma: &[usize],
    beta: &[usize],
    running: &RunningStats<T>,
    mode: Mode,
) -> Result<(), TensorError> {
    if input.len() < 2 {
        return Err(shape_err("batchnorm", format!("input must be [N, C, ...], got {input:?}")));
    }
    let channels = input[1];
    if gamma != [channels] || beta != [channels] {
        return Err(shape_err(
            "batchnorm",
            format!("gamma {gamma:?} and beta {beta:?} must be [{channels}]"),
        ));
    }
    if running.mean.len() != channels || running.var.len() != channels {
        return Err(shape_err(
            "batchnorm",
            format!(
                "running stats cover {} channels, input has {channels}",
                running.mean.len()
            ),
        ));
    }
    let reduce: usize = input[0] * input[2..].iter().product::<usize>();
    if mode == Mode::Train && reduce < 2 {
        return Err(arg_err(
            "batchnorm",
            format!(
                "batch statistics need at least 2 values per channel in training mode, \
                 batch x spatial = {reduce}"
            ),
        ));
    }
    Ok(())
}

/// Iterates all elements of channel `c`, calling `f` with their flat indices.
fn for_channel(shape: &[usize], c: usize, mut f: impl FnMut(usize)) {
    let (batch, channels) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    for n in 0..batch {
        let base = (n * channels + c) * spatial;
        for i in base..base + spatial {
            f(i);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn forward<T: Element>(
    shape: &[usize],
    x: &[T],
    gamma: &[T],
    beta: &[T],
    running: &mut RunningStats<T>,
    mode: Mode,
    momentum: T,
    eps: T,
    out: &mut [T],
) -> (Vec<T>, Vec<T>) {
    let channels = shape[1];
    let reduce = shape[0] * shape[2..].iter().product::<usize>();
    let mut saved_mean = vec![T::zero(); channels];
    let mut saved_invstd = vec![T::zero(); channels];
    for c in 0..channels {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = 0.0f64;
                for_channel(shape, c, |i| sum += x[i].as_f64());
                let mean = sum / reduce as f64;
                let mut sq = 0.0f64;
                for_channel(shape, c, |i| {
                    let d = x[i].as_f64() - mean;
                    sq += d * d;
                });
                let var = sq / reduce as f64;
                let unbiased = sq / (reduce as f64 - 1.0);
                let keep = T::one() - momentum;
                running.mean[c] = keep * running.mean[c] + momentum * T::from_f64(mean);
                running.var[c] = keep * running.var[c] + momentum * T::from_f64(unbiased);
                (T::from_f64(mean), T::from_f64(var))
            }
            Mode::Eval => (running.mean[c], running.var[c]),
        };
        let invstd = T::one() / (var + eps).sqrt();
        saved_mean[c] = mean;
        saved_invstd[c] = invstd;
        let (g, b) = (gamma[c], beta[c]);
        for_channel(shape, c, |i| {
            out[i] = g * (x[i] - mean) * invstd + b;
        });
    }
    (saved_mean, saved_invstd)
}

/// Returns `(dx, dgamma, dbeta)`. In training mode the batch statistics are
/// functions of the input, so their dependence is part of `dx`; in eval mode
/// the running statistics are constants.
pub fn backward<T: Element>(
    shape: &[usize],
    x: &[T],
    gamma: &[T],
    saved_mean: &[T],
    saved_invstd: &[T],
    train: bool,
    og: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let channels = shape[1];
    let reduce = shape[0] * shape[2..].iter().product::<usize>();
    let inv_m = T::from_f64(1.0 / reduce as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for c in 0..channels {
        let (mean, invstd, g) = (saved_mean[c], saved_invstd[c], gamma[c]);
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for_channel(shape, c, |i| {
            let xhat = (x[i] - mean) * invstd;
            sum_g += og[i].as_f64();
            sum_gx += (og[i] * xhat).as_f64();
        });
        dbeta[c] = T::from_f64(sum_g);
        dgamma[c] = T::from_f64(sum_gx);
        if train {
            let mean_g = T::from_f64(sum_g) * inv_m;
            let mean_gx = T::from_f64(sum_gx) * inv_m;
            for_channel(shape, c, |i| {
                let xhat = (x[i] - mean) * invstd;
                dx[i] = g * invstd * (og[i] - mean_g - xhat * mean_gx);
            });
        } else {
            for_channel(shape, c, |i| {
                dx[i] = og[i] * g * invstd;
            });
        }
    }
    (dx, dgamma, dbeta)
}
