//! Standard and depthwise 2-D convolution on NHWC tensors.
//!
//! Every output site is accumulated sequentially in kernel order
//! `(ky, kx, c_in)`, starting from the bias. The inner loop runs over output
//! channels, which are contiguous in both the kernel and the output.

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(in / stride)`, padding split with the smaller half first.
    Same,
    /// No padding.
    Valid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `(kh, kw, c_in, c_out)` for standard convolution, `(kh, kw, c, 1)` for depthwise.
    pub kernel: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl<T: Real> ConvParams<T> {
    pub fn new(kernel: Tensor<T>, stride: usize) -> Self {
        ConvParams { kernel, bias: None, stride, dilation: 1, padding: Padding::Same }
    }

    pub fn with_bias(mut self, bias: Vec<T>) -> Self {
        self.bias = Some(bias);
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn kh(&self) -> usize {
        self.kernel.dims()[0]
    }

    pub fn kw(&self) -> usize {
        self.kernel.dims()[1]
    }

    /// Number of output channels for a standard kernel, or channels for a depthwise one.
    pub fn out_channels(&self, depthwise: bool) -> usize {
        if depthwise {
            self.kernel.dims()[2]
        } else {
            self.kernel.dims()[3]
        }
    }

    pub fn cast<U: Real>(&self) -> ConvParams<U> {
        ConvParams {
            kernel: self.kernel.cast(),
            bias: self.bias.as_ref().map(|b| b.iter().map(|v| U::of_f64(v.as_f64())).collect()),
            stride: self.stride,
            dilation: self.dilation,
            padding: self.padding,
        }
    }
}

/// Output length and leading pad for one spatial axis.
pub fn axis_geometry(
    input: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if stride == 0 || dilation == 0 || kernel == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel {kernel}, stride {stride} and dilation {dilation} must be positive"
        )));
    }
    let span = (kernel - 1) * dilation + 1;
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + span).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if input < span {
                return Err(Error::dim("conv", format!("input extent {input} smaller than kernel span {span}")));
            }
            Ok(((input - span) / stride + 1, 0))
        }
    }
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    pad_t: usize,
    pad_l: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    dilation: usize,
}

impl Geometry {
    fn new<T: Real>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Self> {
        let (oh, pad_t) = axis_geometry(input.h(), p.kh(), p.stride, p.dilation, p.padding)?;
        let (ow, pad_l) = axis_geometry(input.w(), p.kw(), p.stride, p.dilation, p.padding)?;
        Ok(Geometry {
            n: input.n(),
            h: input.h(),
            w: input.w(),
            oh,
            ow,
            pad_t,
            pad_l,
            kh: p.kh(),
            kw: p.kw(),
            stride: p.stride,
            dilation: p.dilation,
        })
    }

    /// Input coordinate sampled by output `o` at tap `k`, if inside the image.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, dilation: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = o * stride + k * dilation;
        if pos < pad || pos - pad >= extent {
            None
        } else {
            Some(pos - pad)
        }
    }

    #[inline]
    fn src_y(&self, oy: usize, ky: usize) -> Option<usize> {
        Self::src(oy, ky, self.stride, self.dilation, self.pad_t, self.h)
    }

    #[inline]
    fn src_x(&self, ox: usize, kx: usize) -> Option<usize> {
        Self::src(ox, kx, self.stride, self.dilation, self.pad_l, self.w)
    }
}

#[inline(always)]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline(always)]
fn mul_acc<T: Real>(y: &mut [T], a: &[T], b: &[T]) {
    for ((yi, &ai), &bi) in y.iter_mut().zip(a).zip(b) {
        *yi += ai * bi;
    }
}

fn check_bias<T: Real>(p: &ConvParams<T>, channels: usize, op: &'static str) -> Result<()> {
    match &p.bias {
        Some(b) if b.len() != channels => {
            Err(Error::dim(op, format!("bias length {} != {channels} output channels", b.len())))
        }
        _ => Ok(()),
    }
}

fn check_standard<T: Real>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<()> {
    let [_, _, ci, co] = p.kernel.dims();
    if input.c() != ci {
        return Err(Error::dim("conv2d", format!("input has {} channels, kernel expects {ci}", input.c())));
    }
    check_bias(p, co, "conv2d")
}

fn check_depthwise<T: Real>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<()> {
    let [_, _, c, m] = p.kernel.dims();
    if m != 1 {
        return Err(Error::dim("depthwise_conv2d", format!("kernel multiplier must be 1, got {m}")));
    }
    if input.c() != c {
        return Err(Error::dim(
            "depthwise_conv2d",
            format!("input has {} channels, kernel expects {c}", input.c()),
        ));
    }
    check_bias(p, c, "depthwise_conv2d")
}

/// Cross-correlation with a `(kh, kw, c_in, c_out)` kernel.
pub fn conv2d<T: Real>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    check_standard(input, p)?;
    let g = Geometry::new(input, p)?;
    let [_, _, ci, co] = p.kernel.dims();
    let mut out = Tensor::zeros([g.n, g.oh, g.ow, co]);
    let x = input.data();
    let wk = p.kernel.data();
    let od = out.data_mut();
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o = ((b * g.oh + oy) * g.ow + ox) * co;
                let acc = &mut od[o..o + co];
                if let Some(bias) = &p.bias {
                    acc.copy_from_slice(bias);
                }
                for ky in 0..g.kh {
                    let Some(iy) = g.src_y(oy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src_x(ox, kx) else { continue };
                        let xo = ((b * g.h + iy) * g.w + ix) * ci;
                        let wo = (ky * g.kw + kx) * ci * co;
                        for (c, &a) in x[xo..xo + ci].iter().enumerate() {
                            axpy(acc, a, &wk[wo + c * co..wo + (c + 1) * co]);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-channel cross-correlation with a `(kh, kw, c, 1)` kernel.
pub fn depthwise_conv2d<T: Real>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    check_depthwise(input, p)?;
    let g = Geometry::new(input, p)?;
    let c = input.c();
    let mut out = Tensor::zeros([g.n, g.oh, g.ow, c]);
    let x = input.data();
    let wk = p.kernel.data();
    let od = out.data_mut();
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o = ((b * g.oh + oy) * g.ow + ox) * c;
                let acc = &mut od[o..o + c];
                if let Some(bias) = &p.bias {
                    acc.copy_from_slice(bias);
                }
                for ky in 0..g.kh {
                    let Some(iy) = g.src_y(oy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src_x(ox, kx) else { continue };
                        let xo = ((b * g.h + iy) * g.w + ix) * c;
                        let wo = (ky * g.kw + kx) * c;
                        mul_acc(acc, &x[xo..xo + c], &wk[wo..wo + c]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Debug, Clone)]
pub struct ConvGrads<T = f32> {
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

fn bias_grad<T: Real>(p: &ConvParams<T>, grad_out: &Tensor<T>) -> Option<Vec<T>> {
    p.bias.as_ref().map(|_| {
        let c = grad_out.c();
        let mut gb = alloc::vec![T::zero(); c];
        for px in grad_out.data().chunks_exact(c) {
            for (g, &v) in gb.iter_mut().zip(px) {
                *g += v;
            }
        }
        gb
    })
}

fn check_grad_dims<T: Real>(op: &'static str, g: &Geometry, channels: usize, grad_out: &Tensor<T>) -> Result<()> {
    let expect = [g.n, g.oh, g.ow, channels];
    if grad_out.dims() != expect {
        return Err(Error::dim(op, format!("output gradient {:?} != {:?}", grad_out.dims(), expect)));
    }
    Ok(())
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    check_standard(input, p)?;
    let g = Geometry::new(input, p)?;
    let [_, _, ci, co] = p.kernel.dims();
    check_grad_dims("conv2d", &g, co, grad_out)?;
    let x = input.data();
    let dy = grad_out.data();

    let mut dk = Tensor::zeros(p.kernel.dims());
    {
        let dkd = dk.data_mut();
        for b in 0..g.n {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let o = ((b * g.oh + oy) * g.ow + ox) * co;
                    let gy = &dy[o..o + co];
                    for ky in 0..g.kh {
                        let Some(iy) = g.src_y(oy, ky) else { continue };
                        for kx in 0..g.kw {
                            let Some(ix) = g.src_x(ox, kx) else { continue };
                            let xo = ((b * g.h + iy) * g.w + ix) * ci;
                            let wo = (ky * g.kw + kx) * ci * co;
                            for (c, &a) in x[xo..xo + ci].iter().enumerate() {
                                axpy(&mut dkd[wo + c * co..wo + (c + 1) * co], a, gy);
                            }
                        }
                    }
                }
            }
        }
    }

    let dx = if want_input {
        // Transposed kernel (kh, kw, c_out, c_in) keeps the inner loop contiguous.
        let wk = p.kernel.data();
        let mut wt = alloc::vec![T::zero(); wk.len()];
        for tap in 0..g.kh * g.kw {
            for c in 0..ci {
                for k in 0..co {
                    wt[tap * ci * co + k * ci + c] = wk[tap * ci * co + c * co + k];
                }
            }
        }
        let mut dx = Tensor::zeros(input.dims());
        let dxd = dx.data_mut();
        for b in 0..g.n {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let o = ((b * g.oh + oy) * g.ow + ox) * co;
                    let gy = &dy[o..o + co];
                    for ky in 0..g.kh {
                        let Some(iy) = g.src_y(oy, ky) else { continue };
                        for kx in 0..g.kw {
                            let Some(ix) = g.src_x(ox, kx) else { continue };
                            let xo = ((b * g.h + iy) * g.w + ix) * ci;
                            let wo = (ky * g.kw + kx) * ci * co;
                            let acc = &mut dxd[xo..xo + ci];
                            for (k, &a) in gy.iter().enumerate() {
                                axpy(acc, a, &wt[wo + k * ci..wo + (k + 1) * ci]);
                            }
                        }
                    }
                }
            }
        }
        Some(dx)
    } else {
        None
    };

    Ok(ConvGrads { input: dx, kernel: dk, bias: bias_grad(p, grad_out) })
}

pub fn depthwise_conv2d_backward<T: Real>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    check_depthwise(input, p)?;
    let g = Geometry::new(input, p)?;
    let c = input.c();
    check_grad_dims("depthwise_conv2d", &g, c, grad_out)?;
    let x = input.data();
    let wk = p.kernel.data();
    let dy = grad_out.data();
    let mut dk = Tensor::zeros(p.kernel.dims());
    let mut dx = if want_input { Some(Tensor::zeros(input.dims())) } else { None };
    let dkd = dk.data_mut();
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o = ((b * g.oh + oy) * g.ow + ox) * c;
                let gy = &dy[o..o + c];
                for ky in 0..g.kh {
                    let Some(iy) = g.src_y(oy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src_x(ox, kx) else { continue };
                        let xo = ((b * g.h + iy) * g.w + ix) * c;
                        let wo = (ky * g.kw + kx) * c;
                        mul_acc(&mut dkd[wo..wo + c], &x[xo..xo + c], gy);
                        if let Some(dx) = dx.as_mut() {
                            mul_acc(&mut dx.data_mut()[xo..xo + c], &wk[wo..wo + c], gy);
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads { input: dx, kernel: dk, bias: bias_grad(p, grad_out) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    /// Direct 7-deep loop: batch, out-y, out-x, out-channel, ky, kx, in-channel.
    fn conv_oracle(input: &Tensor<f64>, kernel: &Tensor<f64>, stride: usize, dilation: usize) -> Tensor<f64> {
        let [n, h, w, _] = input.dims();
        let [kh, kw, ci, co] = kernel.dims();
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        let pad_h = ((oh - 1) * stride + (kh - 1) * dilation + 1).saturating_sub(h) / 2;
        let pad_w = ((ow - 1) * stride + (kw - 1) * dilation + 1).saturating_sub(w) / 2;
        let mut out = Tensor::zeros([n, oh, ow, co]);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for k in 0..co {
                        let mut s = 0.0;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                for c in 0..ci {
                                    let iy = (oy * stride + ky * dilation) as isize - pad_h as isize;
                                    let ix = (ox * stride + kx * dilation) as isize - pad_w as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += input.at(b, iy as usize, ix as usize, c) * kernel.at(ky, kx, c, k);
                                    }
                                }
                            }
                        }
                        out.set(b, oy, ox, k, s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_on_single_pixel() {
        let x = Tensor::<f32>::from_vec([1, 1, 1, 1], vec![2.0]).unwrap();
        let p = ConvParams::new(Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap(), 1);
        assert_eq!(conv2d(&x, &p).unwrap().data(), &[2.0]);
    }

    #[test]
    fn first_context_conv_shape() {
        let x = Tensor::<f32>::zeros([1, 256, 512, 3]);
        let p = ConvParams::new(Tensor::zeros([3, 3, 3, 32]), 2);
        assert_eq!(conv2d(&x, &p).unwrap().dims(), [1, 128, 256, 32]);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = crate::seeded_rng(11);
        let x = Tensor::<f32>::random_normal([1, 5, 5, 2], 1.0, &mut rng);
        let k = Tensor::<f32>::random_normal([3, 3, 2, 4], 1.0, &mut rng);
        let got = conv2d(&x, &ConvParams::new(k.clone(), 1)).unwrap();
        let want = conv_oracle(&x.cast(), &k.cast(), 1, 1).cast::<f32>();
        assert!(got.max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let x = Tensor::<f32>::zeros([1, 4, 4, 3]);
        let p = ConvParams::new(Tensor::zeros([3, 3, 2, 4]), 1);
        assert!(matches!(conv2d(&x, &p), Err(Error::Dimension { op: "conv2d", .. })));
        let dw = ConvParams::new(Tensor::zeros([3, 3, 2, 1]), 1);
        assert!(matches!(depthwise_conv2d(&x, &dw), Err(Error::Dimension { .. })));
    }

    #[test]
    fn depthwise_zero_kernel_gives_zero() {
        let mut rng = crate::seeded_rng(2);
        let x = Tensor::<f32>::random_normal([1, 6, 6, 3], 1.0, &mut rng);
        let p = ConvParams::new(Tensor::zeros([3, 3, 3, 1]), 1);
        assert!(depthwise_conv2d(&x, &p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dilated_depthwise_keeps_fusion_shape() {
        let x = Tensor::<f32>::zeros([1, 32, 64, 128]);
        let p = ConvParams::new(Tensor::zeros([3, 3, 128, 1]), 1).with_dilation(4);
        assert_eq!(depthwise_conv2d(&x, &p).unwrap().dims(), [1, 32, 64, 128]);
    }

    #[test]
    fn depthwise_is_independent_per_channel() {
        let mut rng = crate::seeded_rng(5);
        let x = Tensor::<f32>::random_normal([1, 6, 6, 3], 1.0, &mut rng);
        let k = Tensor::<f32>::random_normal([3, 3, 3, 1], 1.0, &mut rng);
        let got = depthwise_conv2d(&x, &ConvParams::new(k.clone(), 1)).unwrap();
        for ch in 0..3 {
            let xc = Tensor::from_vec(
                [1, 6, 6, 1],
                x.data().iter().skip(ch).step_by(3).map(|&v| v as f64).collect(),
            )
            .unwrap();
            let kc = Tensor::from_vec(
                [3, 3, 1, 1],
                k.data().iter().skip(ch).step_by(3).map(|&v| v as f64).collect(),
            )
            .unwrap();
            let want = conv_oracle(&xc, &kc, 1, 1);
            for (i, &v) in want.data().iter().enumerate() {
                assert!((got.data()[i * 3 + ch] as f64 - v).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn valid_padding_shrinks() {
        let x = Tensor::<f32>::zeros([1, 7, 9, 1]);
        let p = ConvParams::new(Tensor::zeros([3, 3, 1, 1]), 2).with_padding(Padding::Valid);
        assert_eq!(conv2d(&x, &p).unwrap().dims(), [1, 3, 4, 1]);
    }

    #[test]
    fn bias_is_added_and_checked() {
        let x = Tensor::<f32>::full([1, 2, 2, 1], 1.0);
        let p = ConvParams::new(Tensor::full([1, 1, 1, 2], 1.0), 1).with_bias(vec![0.5, -1.0]);
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.pixel(0, 1, 1), &[1.5, 0.0]);
        let bad = ConvParams::new(Tensor::full([1, 1, 1, 2], 1.0), 1).with_bias(vec![0.5]);
        assert!(conv2d(&x, &bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn same_padding_shape_law(
            extent in 1usize..=64,
            stride in prop::sample::select(vec![1usize, 2]),
            k in prop::sample::select(vec![1usize, 3]),
            dilation in prop::sample::select(vec![1usize, 4]),
        ) {
            let (out, _) = axis_geometry(extent, k, stride, dilation, Padding::Same).unwrap();
            prop_assert_eq!(out, extent.div_ceil(stride));
            let x = Tensor::<f32>::zeros([1, extent, 3, 2]);
            let std = ConvParams::new(Tensor::zeros([k, k, 2, 2]), stride).with_dilation(dilation);
            prop_assert_eq!(conv2d(&x, &std).unwrap().h(), extent.div_ceil(stride));
            let dw = ConvParams::new(Tensor::zeros([k, k, 2, 1]), stride).with_dilation(dilation);
            prop_assert_eq!(depthwise_conv2d(&x, &dw).unwrap().h(), extent.div_ceil(stride));
        }

        #[test]
        fn depthwise_equals_block_diagonal_conv(seed in any::<u64>(), c in 1usize..5, stride in 1usize..3) {
            let mut rng = crate::seeded_rng(seed);
            let x = Tensor::<f32>::random_normal([1, 7, 6, c], 1.0, &mut rng);
            let k = Tensor::<f32>::random_normal([3, 3, c, 1], 1.0, &mut rng);
            let mut full = Tensor::<f32>::zeros([3, 3, c, c]);
            for ky in 0..3 {
                for kx in 0..3 {
                    for ch in 0..c {
                        full.set(ky, kx, ch, ch, k.at(ky, kx, ch, 0));
                    }
                }
            }
            let a = depthwise_conv2d(&x, &ConvParams::new(k, stride)).unwrap();
            let b = conv2d(&x, &ConvParams::new(full, stride)).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-5);
        }

        #[test]
        fn pointwise_is_per_pixel_matmul(seed in any::<u64>(), ci in 1usize..6, co in 1usize..6) {
            let mut rng = crate::seeded_rng(seed);
            let x = Tensor::<f32>::random_normal([2, 3, 4, ci], 1.0, &mut rng);
            let k = Tensor::<f32>::random_normal([1, 1, ci, co], 1.0, &mut rng);
            let y = conv2d(&x, &ConvParams::new(k.clone(), 1)).unwrap();
            for (p, px) in x.data().chunks(ci).enumerate() {
                for j in 0..co {
                    let want: f64 = (0..ci).map(|i| px[i] as f64 * k.at(0, 0, i, j) as f64).sum();
                    prop_assert!((y.data()[p * co + j] as f64 - want).abs() < 1e-5);
                }
            }
        }

        #[test]
        fn kernels_are_pure(seed in any::<u64>()) {
            let mut rng = crate::seeded_rng(seed);
            let x = Tensor::<f32>::random_normal([1, 5, 5, 3], 1.0, &mut rng);
            let k = Tensor::<f32>::random_normal([3, 3, 3, 2], 1.0, &mut rng);
            let p = ConvParams::new(k, 2);
            prop_assert_eq!(conv2d(&x, &p).unwrap(), conv2d(&x, &p).unwrap());
        }
    }

    #[test]
    fn backward_matches_directional_derivative() {
        // d/dα sum(r ⊙ conv(x + α dx; W + α dW)) at α = 0, via f64 central differences.
        let mut rng = crate::seeded_rng(9);
        for (stride, dilation) in [(1, 1), (2, 1), (1, 4), (2, 4)] {
            let x = Tensor::<f64>::random_normal([2, 6, 5, 3], 1.0, &mut rng);
            let k = Tensor::<f64>::random_normal([3, 3, 3, 4], 1.0, &mut rng);
            let p = ConvParams::new(k.clone(), stride).with_dilation(dilation).with_bias(vec![0.1, 0.2, 0.3, 0.4]);
            let y = conv2d(&x, &p).unwrap();
            let r = Tensor::<f64>::random_normal(y.dims(), 1.0, &mut rng);
            let g = conv2d_backward(&x, &p, &r, true).unwrap();
            let dx = Tensor::<f64>::random_normal(x.dims(), 1.0, &mut rng);
            let dk = Tensor::<f64>::random_normal(k.dims(), 1.0, &mut rng);
            let f = |a: f64| {
                let xa = Tensor::from_vec(x.dims(), x.data().iter().zip(dx.data()).map(|(v, d)| v + a * d).collect()).unwrap();
                let ka = Tensor::from_vec(k.dims(), k.data().iter().zip(dk.data()).map(|(v, d)| v + a * d).collect()).unwrap();
                let pa = ConvParams { kernel: ka, ..p.clone() };
                conv2d(&xa, &pa).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let numeric = (f(1e-4) - f(-1e-4)) / 2e-4;
            let analytic: f64 = g.input.unwrap().data().iter().zip(dx.data()).map(|(a, b)| a * b).sum::<f64>()
                + g.kernel.data().iter().zip(dk.data()).map(|(a, b)| a * b).sum::<f64>();
            assert!((numeric - analytic).abs() < 1e-6 * analytic.abs().max(1.0), "{numeric} vs {analytic}");
            let bias_sum: Vec<f64> = (0..4).map(|k| r.data().iter().skip(k).step_by(4).sum()).collect();
            for (a, b) in g.bias.unwrap().iter().zip(&bias_sum) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn depthwise_backward_matches_directional_derivative() {
        let mut rng = crate::seeded_rng(10);
        for (stride, dilation) in [(1, 1), (2, 1), (1, 4)] {
            let x = Tensor::<f64>::random_normal([2, 7, 6, 3], 1.0, &mut rng);
            let k = Tensor::<f64>::random_normal([3, 3, 3, 1], 1.0, &mut rng);
            let p = ConvParams::new(k.clone(), stride).with_dilation(dilation);
            let y = depthwise_conv2d(&x, &p).unwrap();
            let r = Tensor::<f64>::random_normal(y.dims(), 1.0, &mut rng);
            let g = depthwise_conv2d_backward(&x, &p, &r, true).unwrap();
            let dx = Tensor::<f64>::random_normal(x.dims(), 1.0, &mut rng);
            let dk = Tensor::<f64>::random_normal(k.dims(), 1.0, &mut rng);
            let f = |a: f64| {
                let xa = Tensor::from_vec(x.dims(), x.data().iter().zip(dx.data()).map(|(v, d)| v + a * d).collect()).unwrap();
                let ka = Tensor::from_vec(k.dims(), k.data().iter().zip(dk.data()).map(|(v, d)| v + a * d).collect()).unwrap();
                let pa = ConvParams { kernel: ka, ..p.clone() };
                depthwise_conv2d(&xa, &pa).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let numeric = (f(1e-4) - f(-1e-4)) / 2e-4;
            let analytic: f64 = g.input.unwrap().data().iter().zip(dx.data()).map(|(a, b)| a * b).sum::<f64>()
                + g.kernel.data().iter().zip(dk.data()).map(|(a, b)| a * b).sum::<f64>();
            assert!((numeric - analytic).abs() < 1e-6 * analytic.abs().max(1.0));
        }
    }
}
