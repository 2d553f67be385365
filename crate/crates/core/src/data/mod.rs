//! Samples, label maps and the desk-scale data pipeline.

mod augment;
mod metrics;
mod palette;
mod synthetic;

use alloc::format;
use alloc::vec::Vec;

pub use augment::{augment, hsv_to_rgb, rgb_to_hsv, AugmentConfig};
pub use metrics::{compute_miou, ConfusionMatrix, MiouReport};
pub use palette::{colorize_mask, Palette, RgbImage};
pub use synthetic::{generate_synthetic_dataset, render_scene, scene_specs, SceneSpec, Shape, ShapeKind};

use crate::{Error, Result, Tensor};

/// Label value excluded from the loss and from scoring.
pub const VOID: u8 = 255;

/// Per-pixel class indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::DataLength { dims: [1, height, width, 1], len: data.len() });
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap { height, width, data: alloc::vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Every label is below `classes` or void.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l != VOID && l as usize >= classes) {
            Some(&label) => Err(Error::InvalidLabel { label, classes }),
            None => Ok(()),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for (src, dst) in self.data.chunks_exact(self.width).zip(out.data.chunks_exact_mut(self.width)) {
            dst.iter_mut().zip(src.iter().rev()).for_each(|(d, s)| *d = *s);
        }
        out
    }
}

/// Nearest-neighbour subsampling that keeps pixel `i·factor + factor/2`
/// along each axis. Void stays void.
pub fn downsample_labels(labels: &LabelMap, factor: usize) -> Result<LabelMap> {
    if factor == 0 || labels.height % factor != 0 || labels.width % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot downsample {}x{} labels by {factor}",
            labels.height, labels.width
        )));
    }
    let (h, w) = (labels.height / factor, labels.width / factor);
    let off = factor / 2;
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(labels.get(y * factor + off, x * factor + off));
        }
    }
    LabelMap::new(h, w, data)
}

/// An RGB image in `[0, 1]` with its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub image: Tensor,
    pub labels: LabelMap,
}

impl SegSample {
    pub fn new(image: Tensor, labels: LabelMap) -> Result<Self> {
        let [n, h, w, c] = image.dims();
        if n != 1 || c != 3 {
            return Err(Error::dim("sample", format!("image must be (1, h, w, 3), got {:?}", image.dims())));
        }
        if (h, w) != (labels.height, labels.width) {
            return Err(Error::dim(
                "sample",
                format!("image {h}x{w} does not match labels {}x{}", labels.height, labels.width),
            ));
        }
        Ok(SegSample { image, labels })
    }

    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }
}

/// Stacks images along the batch axis and concatenates labels.
pub fn stack_batch(samples: &[&SegSample]) -> Result<(Tensor, Vec<u8>)> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let image = Tensor::stack(&images)?;
    let labels = samples.iter().flat_map(|s| s.labels.data.iter().copied()).collect();
    Ok((image, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_identity_constant_and_checkerboard() {
        let l = LabelMap::new(2, 2, alloc::vec![0, 1, VOID, 2]).unwrap();
        assert_eq!(downsample_labels(&l, 1).unwrap(), l);
        assert_eq!(downsample_labels(&LabelMap::filled(8, 8, 3), 4).unwrap(), LabelMap::filled(2, 2, 3));

        let mut board = LabelMap::filled(4, 4, 0);
        for y in 0..4 {
            for x in 0..4 {
                board.set(y, x, ((x + y) % 2) as u8 + 10 * (y / 2) as u8);
            }
        }
        // Picks rows and columns 1 and 3.
        let d = downsample_labels(&board, 2).unwrap();
        assert_eq!(d.data(), &[0, 0, 10, 10]);
        assert!(downsample_labels(&board, 3).is_err());
    }

    #[test]
    fn label_validation() {
        let l = LabelMap::new(1, 3, alloc::vec![0, VOID, 3]).unwrap();
        assert!(l.validate(4).is_ok());
        assert!(matches!(l.validate(3), Err(Error::InvalidLabel { label: 3, classes: 3 })));
        assert!(LabelMap::new(2, 2, alloc::vec![0; 3]).is_err());
    }

    #[test]
    fn sample_rejects_mismatch() {
        assert!(SegSample::new(Tensor::zeros([1, 2, 3, 3]), LabelMap::filled(2, 2, 0)).is_err());
        assert!(SegSample::new(Tensor::zeros([1, 2, 2, 1]), LabelMap::filled(2, 2, 0)).is_err());
        assert!(SegSample::new(Tensor::zeros([1, 2, 2, 3]), LabelMap::filled(2, 2, 0)).is_ok());
    }
}
