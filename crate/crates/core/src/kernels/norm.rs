//! Batch normalization over the `(n, h, w)` axes of NHWC activations.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Real, Result, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
    /// Weight of the old running value in the moving average.
    pub momentum: T,
}

impl<T: Real> BatchNormParams<T> {
    /// Identity-initialised statistics: γ=1, β=0, μ=0, σ²=1.
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: T::of_f64(DEFAULT_EPSILON),
            momentum: T::of_f64(DEFAULT_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Exponential moving average of the batch statistics. The running
    /// variance uses the unbiased estimate.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        self.blend_running(stats, T::one() - self.momentum);
    }

    /// Plain running mean: after the call with `seen = k` the statistics are
    /// the average of batches `0..=k`, and `seen = 0` discards the old values.
    pub fn average_running(&mut self, stats: &BatchStats<T>, seen: usize) {
        self.blend_running(stats, T::one() / T::from_usize(seen + 1));
    }

    fn blend_running(&mut self, stats: &BatchStats<T>, weight: T) {
        let keep = T::one() - weight;
        let correction = if stats.count > 1 {
            T::from_usize(stats.count) / T::from_usize(stats.count - 1)
        } else {
            T::one()
        };
        for c in 0..self.channels() {
            self.running_mean[c] = keep * self.running_mean[c] + weight * stats.mean[c];
            self.running_var[c] = keep * self.running_var[c] + weight * stats.var[c] * correction;
        }
    }

    /// Per-channel `(scale, shift)` so that inference is `x * scale + shift`.
    pub fn inference_affine(&self) -> (Vec<T>, Vec<T>) {
        let scale: Vec<T> = (0..self.channels())
            .map(|c| self.gamma[c] / (self.running_var[c] + self.epsilon).sqrt())
            .collect();
        let shift = (0..self.channels())
            .map(|c| self.beta[c] - self.running_mean[c] * scale[c])
            .collect();
        (scale, shift)
    }

    pub fn cast<U: Real>(&self) -> BatchNormParams<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::of_f64(x.as_f64())).collect();
        BatchNormParams {
            gamma: c(&self.gamma),
            beta: c(&self.beta),
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
            epsilon: U::of_f64(self.epsilon.as_f64()),
            momentum: U::of_f64(self.momentum.as_f64()),
        }
    }
}

/// Statistics of one training batch, with the biased variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

fn check<T: Real>(x: &Tensor<T>, p: &BatchNormParams<T>) -> Result<()> {
    if x.c() != p.channels() {
        return Err(Error::dim("batch_norm", format!("input has {} channels, parameters {}", x.c(), p.channels())));
    }
    if x.is_empty() {
        return Err(Error::EmptyTensor(x.dims()));
    }
    Ok(())
}

pub fn batch_stats<T: Real>(x: &Tensor<T>) -> BatchStats<T> {
    let c = x.c();
    let count = x.len() / c;
    let mut mean = vec![T::zero(); c];
    for px in x.data().chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    let n = T::from_usize(count);
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![T::zero(); c];
    for px in x.data().chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    BatchStats { mean, var, count }
}

fn apply_affine<T: Real>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Tensor<T> {
    let c = x.c();
    let mut out = x.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for ((v, &s), &b) in px.iter_mut().zip(scale).zip(shift) {
            *v = *v * s + b;
        }
    }
    out
}

/// Pure forward pass. In training mode the batch statistics are returned
/// instead of being written into `p`.
pub fn batch_norm_forward<T: Real>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
    training: bool,
) -> Result<(Tensor<T>, Option<BatchStats<T>>)> {
    check(x, p)?;
    if !training {
        let (scale, shift) = p.inference_affine();
        return Ok((apply_affine(x, &scale, &shift), None));
    }
    let stats = batch_stats(x);
    let scale: Vec<T> = (0..p.channels())
        .map(|c| p.gamma[c] / (stats.var[c] + p.epsilon).sqrt())
        .collect();
    // Centre before scaling so a constant channel maps exactly to beta.
    let c = x.c();
    let mut y = x.clone();
    for px in y.data_mut().chunks_exact_mut(c) {
        for (ch, v) in px.iter_mut().enumerate() {
            *v = (*v - stats.mean[ch]) * scale[ch] + p.beta[ch];
        }
    }
    Ok((y, Some(stats)))
}

/// `gamma·(x−μ)/√(σ²+ε)+beta`; training mode normalises with batch
/// statistics and folds them into the running averages.
pub fn batch_norm<T: Real>(x: &Tensor<T>, p: &mut BatchNormParams<T>, training: bool) -> Result<Tensor<T>> {
    let (y, stats) = batch_norm_forward(x, p, training)?;
    if let Some(stats) = stats {
        p.update_running(&stats);
    }
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T = f32> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Backward pass. `stats` must be the batch statistics from the training
/// forward, or `None` for a pass that used the running statistics.
pub fn batch_norm_backward<T: Real>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
    stats: Option<&BatchStats<T>>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    check(x, p)?;
    if grad_out.dims() != x.dims() {
        return Err(Error::dim("batch_norm", format!("gradient {:?} != input {:?}", grad_out.dims(), x.dims())));
    }
    let c = x.c();
    let (mean, var) = match stats {
        Some(s) => (&s.mean, &s.var),
        None => (&p.running_mean, &p.running_var),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + p.epsilon).sqrt()).collect();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (px, gy) in x.data().chunks_exact(c).zip(grad_out.data().chunks_exact(c)) {
        for ch in 0..c {
            let xhat = (px[ch] - mean[ch]) * inv_std[ch];
            dgamma[ch] += gy[ch] * xhat;
            dbeta[ch] += gy[ch];
        }
    }
    let mut dx = Tensor::zeros(x.dims());
    match stats {
        Some(s) => {
            let count = T::from_usize(s.count);
            let inv_count = T::one() / count;
            for ((px, gy), out) in x
                .data()
                .chunks_exact(c)
                .zip(grad_out.data().chunks_exact(c))
                .zip(dx.data_mut().chunks_exact_mut(c))
            {
                for ch in 0..c {
                    let xhat = (px[ch] - mean[ch]) * inv_std[ch];
                    out[ch] = p.gamma[ch] * inv_std[ch] * inv_count
                        * (count * gy[ch] - dbeta[ch] - xhat * dgamma[ch]);
                }
            }
        }
        None => {
            for (gy, out) in grad_out.data().chunks_exact(c).zip(dx.data_mut().chunks_exact_mut(c)) {
                for ch in 0..c {
                    out[ch] = gy[ch] * p.gamma[ch] * inv_std[ch];
                }
            }
        }
    }
    Ok(BatchNormGrads { input: dx, gamma: dgamma, beta: dbeta })
}
