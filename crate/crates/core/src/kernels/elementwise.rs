//! Pointwise activations, residual addition, channel softmax, dropout and
//! channel concatenation.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use rand::RngCore;

use crate::{Error, Real, Result, Tensor};

pub fn relu6<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let six = T::of_f64(6.0);
    x.map(|v| v.max(T::zero()).min(six))
}

/// Passes the gradient where `0 < x < 6`.
pub fn relu6_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let six = T::of_f64(6.0);
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= T::zero() || xv >= six {
            *gv = T::zero();
        }
    }
    g
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.dims() != b.dims() {
        return Err(Error::dim("add", format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Softmax along the channel axis, stabilised by subtracting the per-pixel max.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.c();
    let mut out = x.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        let m = px.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut s = T::zero();
        for v in px.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = T::one() / s;
        px.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Per-element multipliers: 0 for dropped elements, `1/(1−rate)` for kept ones.
pub fn dropout_mask<T: Real>(len: usize, rate: f64, rng: &mut impl RngCore) -> Result<Vec<T>> {
    check_rate(rate)?;
    let keep = T::of_f64(1.0 / (1.0 - rate));
    Ok((0..len).map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep }).collect())
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Identity at inference; in training zeroes elements with probability
/// `rate` and rescales survivors.
pub fn dropout<T: Real>(x: &Tensor<T>, rate: f64, training: bool, rng: &mut impl RngCore) -> Result<Tensor<T>> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask::<T>(x.len(), rate, rng)?;
    Ok(apply_mask(x, &mask))
}

pub fn apply_mask<T: Real>(x: &Tensor<T>, mask: &[T]) -> Tensor<T> {
    let mut out = x.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
    out
}

pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let [n, h, w, _] = first.dims();
    for p in parts {
        if p.dims()[..3] != [n, h, w] {
            return Err(Error::dim("concat", format!("{:?} vs {:?}", p.dims(), first.dims())));
        }
    }
    let total: usize = parts.iter().map(|p| p.c()).sum();
    let mut data = Vec::with_capacity(n * h * w * total);
    for site in 0..n * h * w {
        for p in parts {
            let c = p.c();
            data.extend_from_slice(&p.data()[site * c..(site + 1) * c]);
        }
    }
    Tensor::from_vec([n, h, w, total], data)
}

pub fn split_channels<T: Real>(x: &Tensor<T>, widths: &[usize]) -> Vec<Tensor<T>> {
    let [n, h, w, c] = x.dims();
    debug_assert_eq!(widths.iter().sum::<usize>(), c);
    let mut outs: Vec<Vec<T>> = widths.iter().map(|&k| Vec::with_capacity(n * h * w * k)).collect();
    for px in x.data().chunks_exact(c) {
        let mut off = 0;
        for (o, &k) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&px[off..off + k]);
            off += k;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(d, &k)| Tensor::from_vec([n, h, w, k], d).expect("split widths are positive"))
        .collect()
}
