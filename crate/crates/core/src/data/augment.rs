use num_traits::Float;
use rand::{Rng as _, RngCore};

use super::{LabelMap, SegSample, VOID};
use crate::kernels::bilinear_resize;
use crate::{Error, Result, Tensor};

/// Random geometric and photometric perturbation. Zero amplitudes disable
/// the corresponding step exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
    /// Hue shift amplitude as a fraction of the hue circle.
    pub hue: f64,
    /// Multiplicative amplitudes: factors are drawn from `[1 − a, 1 + a]`.
    pub saturation: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { scale_range: (0.5, 2.0), flip_prob: 0.5, hue: 0.05, saturation: 0.2, brightness: 0.2, contrast: 0.2 }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig { scale_range: (1.0, 1.0), flip_prob: 0.0, hue: 0.0, saturation: 0.0, brightness: 0.0, contrast: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        let amps = [self.hue, self.saturation, self.brightness, self.contrast];
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!("invalid scale range {lo}..{hi}")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || amps.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidConfig("flip probability and jitter amplitudes must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Scale, crop-or-pad back to the original size, flip, then jitter colours.
pub fn augment(sample: &SegSample, cfg: &AugmentConfig, rng: &mut impl RngCore) -> Result<SegSample> {
    cfg.validate()?;
    let (h, w) = (sample.height(), sample.width());
    let (lo, hi) = cfg.scale_range;
    let scale = if lo == hi { lo } else { rng.gen_range(lo..hi) };
    let mut image = sample.image.clone();
    let mut labels = sample.labels.clone();
    if scale != 1.0 {
        let sh = (Float::round(h as f64 * scale) as usize).max(1);
        let sw = (Float::round(w as f64 * scale) as usize).max(1);
        image = bilinear_resize(&image, sh, sw)?;
        labels = resize_nearest(&labels, sh, sw);
        let oy = random_offset(sh, h, rng);
        let ox = random_offset(sw, w, rng);
        image = crop_or_pad_image(&image, h, w, oy, ox);
        labels = crop_or_pad_labels(&labels, h, w, oy, ox);
    }
    if cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob) {
        image = flip_image(&image);
        labels = labels.flip_horizontal();
    }
    jitter(&mut image, cfg, rng);
    SegSample::new(image, labels)
}

/// Offset of the output window inside the source (positive: crop) or of
/// the source inside the output (negative: pad).
fn random_offset(src: usize, dst: usize, rng: &mut impl RngCore) -> isize {
    if src >= dst {
        rng.gen_range(0..=src - dst) as isize
    } else {
        -(rng.gen_range(0..=dst - src) as isize)
    }
}

fn resize_nearest(labels: &LabelMap, out_h: usize, out_w: usize) -> LabelMap {
    let (h, w) = (labels.height(), labels.width());
    let mut out = LabelMap::filled(out_h, out_w, VOID);
    for y in 0..out_h {
        let sy = (((y as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
        for x in 0..out_w {
            let sx = (((x as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
            out.set(y, x, labels.get(sy, sx));
        }
    }
    out
}

/// Mirror index into `[0, n)` without repeating the edge pixel; repeats
/// periodically so any offset is valid.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn crop_or_pad_image(x: &Tensor, h: usize, w: usize, oy: isize, ox: isize) -> Tensor {
    let mut out = Tensor::zeros([1, h, w, 3]);
    for y in 0..h {
        let sy = reflect(y as isize + oy, x.h());
        for xx in 0..w {
            let sx = reflect(xx as isize + ox, x.w());
            for c in 0..3 {
                out.set(0, y, xx, c, x.at(0, sy, sx, c));
            }
        }
    }
    out
}

fn crop_or_pad_labels(l: &LabelMap, h: usize, w: usize, oy: isize, ox: isize) -> LabelMap {
    let mut out = LabelMap::filled(h, w, VOID);
    for y in 0..h {
        let sy = y as isize + oy;
        if sy < 0 || sy >= l.height() as isize {
            continue;
        }
        for x in 0..w {
            let sx = x as isize + ox;
            if sx >= 0 && sx < l.width() as isize {
                out.set(y, x, l.get(sy as usize, sx as usize));
            }
        }
    }
    out
}

fn flip_image(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let (h, w) = (x.h(), x.w());
    for y in 0..h {
        for xx in 0..w {
            for c in 0..3 {
                out.set(0, y, xx, c, x.at(0, y, w - 1 - xx, c));
            }
        }
    }
    out
}

fn factor(amp: f64, rng: &mut impl RngCore) -> f64 {
    if amp == 0.0 {
        1.0
    } else {
        rng.gen_range(1.0 - amp..1.0 + amp)
    }
}

fn jitter(image: &mut Tensor, cfg: &AugmentConfig, rng: &mut impl RngCore) {
    let hue = if cfg.hue == 0.0 { 0.0 } else { rng.gen_range(-cfg.hue..cfg.hue) };
    let sat = factor(cfg.saturation, rng);
    let bright = factor(cfg.brightness, rng);
    let contrast = factor(cfg.contrast, rng);
    if hue != 0.0 || sat != 1.0 {
        for px in image.data_mut().chunks_exact_mut(3) {
            let [h, s, v] = rgb_to_hsv([px[0] as f64, px[1] as f64, px[2] as f64]);
            let rgb = hsv_to_rgb([wrap(h + hue, 1.0), (s * sat).clamp(0.0, 1.0), v]);
            px.iter_mut().zip(rgb).for_each(|(p, v)| *p = v as f32);
        }
    }
    if bright != 1.0 {
        image.data_mut().iter_mut().for_each(|v| *v = (*v * bright as f32).clamp(0.0, 1.0));
    }
    if contrast != 1.0 {
        let mean = image.data().iter().map(|&v| v as f64).sum::<f64>() / image.len() as f64;
        image
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = ((*v as f64 - mean) * contrast + mean).clamp(0.0, 1.0) as f32);
    }
}

/// `x mod m` in `[0, m)`.
fn wrap(x: f64, m: f64) -> f64 {
    let r = x % m;
    if r < 0.0 {
        r + m
    } else {
        r
    }
}

/// Hue, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        wrap((g - b) / d, 6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = wrap(h, 1.0) * 6.0;
    let i = h6 as usize % 6;
    let f = h6 - Float::floor(h6);
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
