//! Procedural scenes: a smooth background with one large coloured shape per
//! horizontal slot. Every class above 0 has its own shape kind and hue, so
//! the task is learnable from a few dozen samples.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};

use super::augment::hsv_to_rgb;
use super::{LabelMap, SegSample};
use crate::{Error, Result, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
    Diamond,
}

impl ShapeKind {
    pub fn for_class(class: u8) -> Self {
        match (class.max(1) - 1) % 4 {
            0 => ShapeKind::Rectangle,
            1 => ShapeKind::Ellipse,
            2 => ShapeKind::Triangle,
            _ => ShapeKind::Diamond,
        }
    }

    /// Whether the point `(dy, dx)`, relative to the centre, lies inside a
    /// shape with half extents `(ry, rx)`.
    pub fn contains(self, dy: f64, dx: f64, ry: f64, rx: f64) -> bool {
        match self {
            ShapeKind::Rectangle => dx.abs() <= rx && dy.abs() <= ry,
            ShapeKind::Ellipse => (dx / rx) * (dx / rx) + (dy / ry) * (dy / ry) <= 1.0,
            ShapeKind::Triangle => {
                // Apex at the top, base at the bottom.
                let v = (dy + ry) / (2.0 * ry);
                (0.0..=1.0).contains(&v) && dx.abs() <= rx * v
            }
            ShapeKind::Diamond => dx.abs() / rx + dy.abs() / ry <= 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub class: u8,
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub radius: (f64, f64),
    pub color: [f32; 3],
}

/// Everything needed to render one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub background: [f32; 3],
    /// Added to the background, scaled by `x / width − 0.5`.
    pub gradient: [f32; 3],
    pub shapes: Vec<Shape>,
    pub noise: f32,
    pub noise_seed: u64,
}

fn class_color(class: u8, classes: usize) -> [f32; 3] {
    let hue = (class as f64 - 1.0) / (classes as f64 - 1.0).max(1.0);
    let [r, g, b] = hsv_to_rgb([hue, 0.85, 0.9]);
    [r as f32, g as f32, b as f32]
}

/// Deterministic scene descriptions for `n` samples.
pub fn scene_specs(n: usize, height: usize, width: usize, classes: usize, seed: u64) -> Result<Vec<SceneSpec>> {
    if !(2..=255).contains(&classes) {
        return Err(Error::InvalidArgument(format!("synthetic data needs 2..=255 classes, got {classes}")));
    }
    if height < 8 || width < 8 {
        return Err(Error::InvalidArgument(format!("synthetic images must be at least 8x8, got {height}x{width}")));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let slots = (classes - 1).clamp(1, (width / 16).max(1)).min(4);
    let slot_w = width as f64 / slots as f64;
    let (h, w) = (height as f64, width as f64);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let grey = rng.gen_range(0.3..0.6);
        let tint = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
        let background = [grey + tint[0], grey + tint[1], grey + tint[2]];
        let gradient = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
        let mut shapes = Vec::new();
        for s in 0..slots {
            if rng.gen_bool(0.15) {
                continue;
            }
            let class = rng.gen_range(1..classes) as u8;
            let rx = rng.gen_range(0.25..0.42) * slot_w;
            let ry = rng.gen_range(0.22..0.4) * h;
            let cx = s as f64 * slot_w + slot_w / 2.0 + rng.gen_range(-0.4..0.4) * (slot_w / 2.0 - rx);
            let cy = h / 2.0 + rng.gen_range(-0.8..0.8) * (h / 2.0 - ry);
            let base = class_color(class, classes);
            let color = [0, 1, 2].map(|c| (base[c] + rng.gen_range(-0.06f32..0.06)).clamp(0.0, 1.0));
            shapes.push(Shape {
                class,
                kind: ShapeKind::for_class(class),
                center: (cy, cx.clamp(rx, w - rx)),
                radius: (ry, rx),
                color,
            });
        }
        out.push(SceneSpec {
            height,
            width,
            classes,
            background,
            gradient,
            shapes,
            noise: 0.03,
            noise_seed: rng.gen(),
        });
    }
    Ok(out)
}

/// Rasterises a scene, sampling shapes at pixel centres. Later shapes paint
/// over earlier ones.
pub fn render_scene(spec: &SceneSpec) -> Result<SegSample> {
    let (h, w) = (spec.height, spec.width);
    let mut labels = LabelMap::filled(h, w, 0);
    let mut image = Tensor::zeros([1, h, w, 3]);
    let mut noise = Rng::seed_from_u64(spec.noise_seed);
    for y in 0..h {
        for x in 0..w {
            let t = (x as f32 + 0.5) / w as f32 - 0.5;
            let mut rgb = [0, 1, 2].map(|c| spec.background[c] + spec.gradient[c] * t);
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            for s in &spec.shapes {
                if s.kind.contains(py - s.center.0, px - s.center.1, s.radius.0, s.radius.1) {
                    rgb = s.color;
                    labels.set(y, x, s.class);
                }
            }
            for (c, v) in rgb.iter().enumerate() {
                let n: f32 = noise.gen_range(-1.0..1.0);
                image.set(0, y, x, c, (v + spec.noise * n).clamp(0.0, 1.0));
            }
        }
    }
    SegSample::new(image, labels)
}

/// `n` deterministic samples with `classes` labels (background plus
/// `classes − 1` shape classes).
pub fn generate_synthetic_dataset(n: usize, height: usize, width: usize, classes: usize, seed: u64) -> Result<Vec<SegSample>> {
    scene_specs(n, height, width, classes, seed)?.iter().map(render_scene).collect()
}
