//! Spatial resampling: bilinear resize (align-corners = false), block
//! average pooling and adaptive pooling to a fixed bin grid.

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Real, Result, Tensor};

/// One output coordinate's two source taps and the weight of the second.
#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            Tap { i0, i1, frac: src - i0 as f64 }
        })
        .collect()
}

pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!("resize target {out_h}x{out_w} is empty")));
    }
    let [n, h, w, c] = x.dims();
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = Tensor::zeros([n, out_h, out_w, c]);
    let src = x.data();
    let dst = out.data_mut();
    for b in 0..n {
        for (oy, t) in ty.iter().enumerate() {
            let wy1 = T::of_f64(t.frac);
            let wy0 = T::one() - wy1;
            for (ox, s) in tx.iter().enumerate() {
                let wx1 = T::of_f64(s.frac);
                let wx0 = T::one() - wx1;
                let p00 = ((b * h + t.i0) * w + s.i0) * c;
                let p01 = ((b * h + t.i0) * w + s.i1) * c;
                let p10 = ((b * h + t.i1) * w + s.i0) * c;
                let p11 = ((b * h + t.i1) * w + s.i1) * c;
                let o = ((b * out_h + oy) * out_w + ox) * c;
                for ch in 0..c {
                    let top = src[p00 + ch] * wx0 + src[p01 + ch] * wx1;
                    let bot = src[p10 + ch] * wx0 + src[p11 + ch] * wx1;
                    dst[o + ch] = top * wy0 + bot * wy1;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_resize`]: scatters the output gradient back onto an
/// `in_h × in_w` grid.
pub fn bilinear_resize_backward<T: Real>(grad_out: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let [n, out_h, out_w, c] = grad_out.dims();
    let ty = taps(in_h, out_h);
    let tx = taps(in_w, out_w);
    let mut gx = Tensor::zeros([n, in_h, in_w, c]);
    let g = grad_out.data();
    let d = gx.data_mut();
    for b in 0..n {
        for (oy, t) in ty.iter().enumerate() {
            let wy1 = T::of_f64(t.frac);
            let wy0 = T::one() - wy1;
            for (ox, s) in tx.iter().enumerate() {
                let wx1 = T::of_f64(s.frac);
                let wx0 = T::one() - wx1;
                let o = ((b * out_h + oy) * out_w + ox) * c;
                let targets = [
                    (((b * in_h + t.i0) * in_w + s.i0) * c, wy0 * wx0),
                    (((b * in_h + t.i0) * in_w + s.i1) * c, wy0 * wx1),
                    (((b * in_h + t.i1) * in_w + s.i0) * c, wy1 * wx0),
                    (((b * in_h + t.i1) * in_w + s.i1) * c, wy1 * wx1),
                ];
                for (p, wgt) in targets {
                    for ch in 0..c {
                        d[p + ch] += g[o + ch] * wgt;
                    }
                }
            }
        }
    }
    gx
}

pub fn bilinear_upsample<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
    }
    bilinear_resize(x, x.h() * factor, x.w() * factor)
}

/// Mean over non-overlapping `factor × factor` blocks.
pub fn avg_pool<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, h, w, c] = x.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::dim("avg_pool", format!("{h}x{w} not divisible by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = T::one() / T::from_usize(factor * factor);
    let mut out = Tensor::zeros([n, oh, ow, c]);
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let o = out.offset(b, y / factor, xx / factor, 0);
                let px = x.pixel(b, y, xx);
                let acc = &mut out.data_mut()[o..o + c];
                for (a, &v) in acc.iter_mut().zip(px) {
                    *a += v;
                }
            }
        }
    }
    out.data_mut().iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

pub fn avg_pool_backward<T: Real>(grad_out: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [n, oh, ow, c] = grad_out.dims();
    let inv = T::one() / T::from_usize(factor * factor);
    let mut gx = Tensor::zeros([n, oh * factor, ow * factor, c]);
    for b in 0..n {
        for y in 0..oh * factor {
            for xx in 0..ow * factor {
                let src = grad_out.offset(b, y / factor, xx / factor, 0);
                let dst = gx.offset(b, y, xx, 0);
                for ch in 0..c {
                    gx.data_mut()[dst + ch] = grad_out.data()[src + ch] * inv;
                }
            }
        }
    }
    gx
}

/// `[start, end)` of bin `i` when `extent` is split into `bins` near-equal parts.
fn bin_range(i: usize, bins: usize, extent: usize) -> (usize, usize) {
    (i * extent / bins, (i + 1) * extent / bins)
}

/// Average pooling onto a `bins × bins` grid of non-overlapping regions.
pub fn avg_pool_to_bins<T: Real>(x: &Tensor<T>, bins: usize) -> Result<Tensor<T>> {
    let [n, h, w, c] = x.dims();
    if bins == 0 || bins > h.min(w) {
        return Err(Error::dim("avg_pool_to_bins", format!("{bins} bins for a {h}x{w} map")));
    }
    let mut out = Tensor::zeros([n, bins, bins, c]);
    for b in 0..n {
        for by in 0..bins {
            let (y0, y1) = bin_range(by, bins, h);
            for bx in 0..bins {
                let (x0, x1) = bin_range(bx, bins, w);
                let inv = T::one() / T::from_usize((y1 - y0) * (x1 - x0));
                let o = out.offset(b, by, bx, 0);
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let p = x.offset(b, y, xx, 0);
                        for ch in 0..c {
                            let v = x.data()[p + ch];
                            out.data_mut()[o + ch] += v;
                        }
                    }
                }
                out.data_mut()[o..o + c].iter_mut().for_each(|v| *v *= inv);
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_to_bins_backward<T: Real>(grad_out: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let [n, bins, _, c] = grad_out.dims();
    let mut gx = Tensor::zeros([n, in_h, in_w, c]);
    for b in 0..n {
        for by in 0..bins {
            let (y0, y1) = bin_range(by, bins, in_h);
            for bx in 0..bins {
                let (x0, x1) = bin_range(bx, bins, in_w);
                let inv = T::one() / T::from_usize((y1 - y0) * (x1 - x0));
                let o = grad_out.offset(b, by, bx, 0);
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let p = gx.offset(b, y, xx, 0);
                        for ch in 0..c {
                            gx.data_mut()[p + ch] = grad_out.data()[o + ch] * inv;
                        }
                    }
                }
            }
        }
    }
    gx
}
