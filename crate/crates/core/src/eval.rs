//! Inference-time prediction and mIoU scoring, including branch ablation
//! and two-model softmax ensembling.

use alloc::format;
use alloc::vec::Vec;

use crate::data::{stack_batch, ConfusionMatrix, MiouReport, SegSample};
use crate::graph::ForwardOptions;
use crate::kernels::{bilinear_upsample, softmax};
use crate::{Error, Graph, Mark, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Normal,
    /// Context features entering the fusion unit are replaced by zeros.
    ZeroContext,
    /// Detail features entering the fusion unit are replaced by zeros.
    ZeroDetail,
}

fn options(graph: &Graph, mode: EvalMode) -> Result<ForwardOptions> {
    let mut opts = ForwardOptions::inference();
    let mark = match mode {
        EvalMode::Normal => return Ok(opts),
        EvalMode::ZeroContext => Mark::ContextOut,
        EvalMode::ZeroDetail => Mark::DetailOut,
    };
    let id = graph.mark(mark).ok_or_else(|| Error::InvalidArgument(format!("graph has no {mark:?} node")))?;
    opts.zeroed.push(id);
    Ok(opts)
}

fn marked(graph: &Graph, mark: Mark) -> Result<crate::NodeId> {
    graph.mark(mark).ok_or_else(|| Error::InvalidArgument(format!("graph has no {mark:?} output")))
}

/// Full-resolution logits in inference mode.
pub fn logits(graph: &Graph, images: &Tensor, mode: EvalMode) -> Result<Tensor> {
    let out = marked(graph, Mark::FullLogits)?;
    graph.run(images, &options(graph, mode)?, out, &mut crate::seeded_rng(0))
}

/// Per-pixel channel argmax; ties go to the lower class.
pub fn argmax(x: &Tensor) -> Vec<u8> {
    x.data()
        .chunks_exact(x.c())
        .map(|px| {
            let mut best = 0;
            for (k, &v) in px.iter().enumerate() {
                if v > px[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

pub fn predict(graph: &Graph, images: &Tensor, mode: EvalMode) -> Result<Vec<u8>> {
    Ok(argmax(&logits(graph, images, mode)?))
}

/// Argmax of the averaged softmax of two models.
pub fn ensemble_predict(a: &Graph, b: &Graph, images: &Tensor) -> Result<Vec<u8>> {
    let pa = softmax(&logits(a, images, EvalMode::Normal)?);
    let pb = softmax(&logits(b, images, EvalMode::Normal)?);
    if pa.dims() != pb.dims() {
        return Err(Error::dim("ensemble", format!("outputs {:?} and {:?} differ", pa.dims(), pb.dims())));
    }
    let mut avg = pa;
    avg.add_assign(&pb);
    Ok(argmax(&avg))
}

/// Argmax of the auxiliary head, bilinearly upsampled to input resolution.
pub fn aux_predict(graph: &Graph, images: &Tensor) -> Result<Vec<u8>> {
    let aux = marked(graph, Mark::AuxLogits)?;
    let z = graph.run(images, &ForwardOptions::inference(), aux, &mut crate::seeded_rng(0))?;
    if images.h() % z.h() != 0 || images.h() / z.h() != images.w() / z.w() {
        return Err(Error::dim("aux_predict", format!("aux logits {:?} for input {:?}", z.dims(), images.dims())));
    }
    Ok(argmax(&bilinear_upsample(&z, images.h() / z.h())?))
}

/// What to score.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a Graph, EvalMode),
    Ensemble(&'a Graph, &'a Graph),
    Aux(&'a Graph),
}

impl Predictor<'_> {
    pub fn predict(&self, images: &Tensor) -> Result<Vec<u8>> {
        match *self {
            Predictor::Model(g, mode) => predict(g, images, mode),
            Predictor::Ensemble(a, b) => ensemble_predict(a, b, images),
            Predictor::Aux(g) => aux_predict(g, images),
        }
    }
}

/// Scores `samples` in batches of `batch_size`.
pub fn evaluate(
    predictor: Predictor<'_>,
    samples: &[SegSample],
    classes: usize,
    batch_size: usize,
) -> Result<(ConfusionMatrix, MiouReport)> {
    let mut cm = ConfusionMatrix::new(classes);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let (images, labels) = stack_batch(&refs)?;
        cm.update(&predictor.predict(&images)?, &labels)?;
    }
    let report = crate::data::compute_miou(&cm);
    Ok((cm, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_prefer_lower_class() {
        let t = Tensor::from_vec([1, 1, 2, 3], alloc::vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax(&t), [0, 1]);
    }
}
