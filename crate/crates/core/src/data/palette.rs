use alloc::format;
use alloc::vec::Vec;

use super::{LabelMap, VOID};
use crate::{Error, Result, Tensor};

/// Interleaved 8-bit RGB pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::DataLength { dims: [1, height, width, 3], len: data.len() });
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// `(1, h, w, 3)` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v as f32 / 255.0).collect();
        Tensor::from_vec([1, self.height, self.width, 3], data).expect("dims checked at construction")
    }

    /// Quantises the first sample of a 3-channel tensor, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.c() != 3 {
            return Err(Error::dim("rgb", format!("expected 3 channels, got {:?}", t.dims())));
        }
        let s = t.sample(0);
        let data = s.data().iter().map(|&v| num_traits::Float::round(v.clamp(0.0, 1.0) * 255.0) as u8).collect();
        RgbImage::new(t.h(), t.w(), data)
    }
}

/// Class colours; void is always drawn black.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    pub colors: Vec<[u8; 3]>,
}

impl Palette {
    /// Well-separated colours for `classes` classes. Class 0 is dark grey
    /// so it stays distinct from void.
    pub fn default_for(classes: usize) -> Self {
        const BASE: [[u8; 3]; 8] = [
            [64, 64, 64],
            [220, 20, 60],
            [0, 142, 70],
            [30, 90, 230],
            [250, 170, 30],
            [150, 60, 200],
            [0, 200, 200],
            [240, 240, 240],
        ];
        let colors = (0..classes)
            .map(|i| {
                if i < BASE.len() {
                    BASE[i]
                } else {
                    // Deterministic spread for larger class counts.
                    let k = (i as u32).wrapping_mul(2_654_435_761);
                    [(k >> 8) as u8 | 1, (k >> 16) as u8 | 1, (k >> 24) as u8 | 1]
                }
            })
            .collect();
        Palette { colors }
    }

    pub fn color(&self, label: u8) -> [u8; 3] {
        if label == VOID {
            return [0, 0, 0];
        }
        self.colors.get(label as usize).copied().unwrap_or([0, 0, 0])
    }

    /// Inverse of [`Palette::color`]; black maps to void.
    pub fn lookup(&self, rgb: [u8; 3]) -> Option<u8> {
        if rgb == [0, 0, 0] {
            return Some(VOID);
        }
        self.colors.iter().position(|&c| c == rgb).map(|i| i as u8)
    }
}

pub fn colorize_mask(labels: &LabelMap, palette: &Palette) -> RgbImage {
    let data = labels.data().iter().flat_map(|&l| palette.color(l)).collect();
    RgbImage { height: labels.height(), width: labels.width(), data }
}
