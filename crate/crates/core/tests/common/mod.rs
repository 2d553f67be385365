//! Independent reference implementations shared by the integration tests.
//! Everything here is written from the defining formulas with plain loops
//! and never calls into the kernels it is used to check.

#![allow(dead_code)]

use contextnet_core::Tensor;

/// Leading pad of a SAME convolution along one axis: the total padding
/// needed to reach `ceil(n / s)` outputs, smaller half first.
pub fn same_pad(n: usize, k: usize, s: usize, d: usize) -> (usize, usize) {
    let out = n.div_ceil(s);
    let span = (k - 1) * d + 1;
    let total = ((out - 1) * s + span).saturating_sub(n);
    (out, total / 2)
}

/// Seven nested loops over (n, oy, ox, co, ky, kx, ci).
pub fn conv2d_oracle(x: &Tensor, k: &Tensor, bias: Option<&[f32]>, s: usize, d: usize) -> Tensor {
    let [n, h, w, ci] = x.dims();
    let [kh, kw, kci, co] = k.dims();
    assert_eq!(ci, kci);
    let (oh, pt) = same_pad(h, kh, s, d);
    let (ow, pl) = same_pad(w, kw, s, d);
    let mut out = Tensor::zeros([n, oh, ow, co]);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut acc = bias.map_or(0.0f64, |b| b[o] as f64);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            for c in 0..ci {
                                let iy = (oy * s + ky * d) as isize - pt as isize;
                                let ix = (ox * s + kx * d) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.at(b, iy as usize, ix as usize, c) as f64 * k.at(ky, kx, c, o) as f64;
                            }
                        }
                    }
                    out.set(b, oy, ox, o, acc as f32);
                }
            }
        }
    }
    out
}

/// Each channel convolved on its own with its `(kh, kw)` slice.
pub fn depthwise_oracle(x: &Tensor, k: &Tensor, s: usize, d: usize) -> Tensor {
    let [n, h, w, c] = x.dims();
    let [kh, kw, _, _] = k.dims();
    let mut out: Option<Tensor> = None;
    for ch in 0..c {
        let mut xc = Tensor::zeros([n, h, w, 1]);
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    xc.set(b, y, xx, 0, x.at(b, y, xx, ch));
                }
            }
        }
        let mut kc = Tensor::zeros([kh, kw, 1, 1]);
        for ky in 0..kh {
            for kx in 0..kw {
                kc.set(ky, kx, 0, 0, k.at(ky, kx, ch, 0));
            }
        }
        let yc = conv2d_oracle(&xc, &kc, None, s, d);
        let o = out.get_or_insert_with(|| Tensor::zeros([n, yc.h(), yc.w(), c]));
        for b in 0..n {
            for y in 0..yc.h() {
                for xx in 0..yc.w() {
                    o.set(b, y, xx, ch, yc.at(b, y, xx, 0));
                }
            }
        }
    }
    out.unwrap()
}

/// Sum of absolute weights per output filter, by direct indexing.
pub fn l1_oracle(k: &Tensor) -> Vec<f64> {
    let [kh, kw, ci, co] = k.dims();
    (0..co)
        .map(|o| {
            let mut s = 0.0;
            for a in 0..kh {
                for b in 0..kw {
                    for c in 0..ci {
                        s += (k.at(a, b, c, o) as f64).abs();
                    }
                }
            }
            s
        })
        .collect()
}

/// Ascending order by insertion sort on (norm, index).
pub fn order_oracle(norms: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = Vec::new();
    for i in 0..norms.len() {
        let mut pos = idx.len();
        while pos > 0 && norms[idx[pos - 1]] > norms[i] {
            pos -= 1;
        }
        idx.insert(pos, i);
    }
    idx
}

/// Exact fraction with reduced u128 parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u128,
    pub den: u128,
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Ratio {
    pub fn new(num: u128, den: u128) -> Self {
        assert!(den > 0);
        let g = gcd(num, den).max(1);
        Ratio { num: num / g, den: den / g }
    }

    pub fn add(self, o: Ratio) -> Ratio {
        Ratio::new(self.num * o.den + o.num * self.den, self.den * o.den)
    }

    pub fn div_int(self, k: u128) -> Ratio {
        Ratio::new(self.num, self.den * k)
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// Per-class IoU as exact fractions from flat prediction/truth arrays.
pub fn iou_oracle(pred: &[u8], truth: &[u8], classes: usize) -> (Vec<Option<Ratio>>, Ratio) {
    let mut per = Vec::new();
    for c in 0..classes as u8 {
        let (mut tp, mut fp, mut fne) = (0u128, 0u128, 0u128);
        for (&p, &t) in pred.iter().zip(truth) {
            if t == 255 {
                continue;
            }
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                _ => {}
            }
        }
        per.push((tp + fp + fne > 0).then(|| Ratio::new(tp, tp + fp + fne)));
    }
    let present: Vec<Ratio> = per.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        Ratio::new(0, 1)
    } else {
        present.iter().fold(Ratio::new(0, 1), |a, &b| a.add(b)).div_int(present.len() as u128)
    };
    (per, mean)
}
