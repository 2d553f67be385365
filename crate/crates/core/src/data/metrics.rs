use alloc::format;
use alloc::vec::Vec;

use super::VOID;
use crate::{Error, Result};

/// `counts[truth * classes + prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: alloc::vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Scores every non-void pixel of `labels` against `pred`.
    pub fn update(&mut self, pred: &[u8], labels: &[u8]) -> Result<()> {
        if pred.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "prediction has {} pixels, labels {}",
                pred.len(),
                labels.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(labels) {
            if t == VOID {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if t >= self.classes {
                return Err(Error::InvalidLabel { label: t as u8, classes: self.classes });
            }
            if p >= self.classes {
                return Err(Error::InvalidArgument(format!("predicted class {p} >= {}", self.classes)));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::InvalidArgument("confusion matrices differ in class count".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(TP, TP + FP + FN)` for class `c`.
    pub fn iou_ratio(&self, c: usize) -> (u64, u64) {
        let tp = self.get(c, c);
        let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
        let col: u64 = (0..self.classes).map(|t| self.get(t, c)).sum();
        (tp, row + col - tp)
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let tp: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        match self.total() {
            0 => 0.0,
            n => tp as f64 / n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    /// `None` for classes absent from both truth and prediction.
    pub per_class: Vec<Option<f64>>,
    /// Mean over present classes; 0 when nothing was scored.
    pub mean: f64,
}

pub fn compute_miou(cm: &ConfusionMatrix) -> MiouReport {
    let per_class: Vec<Option<f64>> = (0..cm.classes)
        .map(|c| match cm.iou_ratio(c) {
            (_, 0) => None,
            (tp, d) => Some(tp as f64 / d as f64),
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    MiouReport { per_class, mean }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_disjoint() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap();
        assert_eq!(compute_miou(&cm).mean, 1.0);
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[1, 0, 0, 1], &[0, 1, 1, 0]).unwrap();
        assert_eq!(compute_miou(&cm).mean, 0.0);
    }

    #[test]
    fn void_is_never_scored_and_absent_classes_skipped() {
        let mut cm = ConfusionMatrix::new(4);
        cm.update(&[0, 1, 3], &[0, VOID, 0]).unwrap();
        assert_eq!(cm.total(), 2);
        let r = compute_miou(&cm);
        assert_eq!(r.per_class, alloc::vec![Some(0.5), None, None, Some(0.0)]);
        assert_eq!(r.mean, 0.25);
        assert!(cm.update(&[0], &[4]).is_err());
        assert!(cm.update(&[0, 0], &[0]).is_err());
    }
}
