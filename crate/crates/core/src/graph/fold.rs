//! Batch-norm folding for inference.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, Op};
use crate::{Error, Real, Result};

/// Merges every batch-norm node into the convolution that feeds it:
/// `w' = w·γ/√(σ²+ε)` per output channel and `b' = (b−μ)·γ/√(σ²+ε)+β`.
/// The returned graph has no batch-norm nodes.
pub fn fold_batch_norm<T: Real>(graph: &Graph<T>) -> Result<Graph<T>> {
    let mut g = graph.clone();
    let n = g.len();
    let mut keep = vec![true; n];
    let mut alias: Vec<usize> = (0..n).collect();
    for id in 0..n {
        let Op::BatchNorm(bn) = &g.nodes[id].op else { continue };
        let bn = bn.clone();
        let name = g.nodes[id].name.clone();
        let parent = g.nodes[id].inputs[0];
        if !matches!(g.nodes[parent].op, Op::Conv(_) | Op::DepthwiseConv(_)) {
            return Err(Error::Fold(name, format!("parent `{}` is not a convolution", g.nodes[parent].name)));
        }
        if g.consumers(parent).len() != 1 || g.marks.iter().any(|&(_, m)| m == parent) {
            return Err(Error::Fold(name, format!("convolution `{}` has other consumers", g.nodes[parent].name)));
        }
        let (scale, shift) = bn.inference_affine();
        let depthwise = matches!(g.nodes[parent].op, Op::DepthwiseConv(_));
        let (Op::Conv(p) | Op::DepthwiseConv(p)) = &mut g.nodes[parent].op else { unreachable!() };
        let c = scale.len();
        let [_, _, ci, co] = p.kernel.dims();
        // Output channels are axis 3 of a standard kernel and axis 2 of a
        // depthwise one; either way the channel index is `i % channels`.
        let channels = if depthwise { ci } else { co };
        if channels != c {
            return Err(Error::Fold(name, format!("{c} statistics for {channels} output channels")));
        }
        for (i, w) in p.kernel.data_mut().iter_mut().enumerate() {
            *w *= scale[i % channels];
        }
        let bias = p.bias.get_or_insert_with(|| vec![T::zero(); c]);
        for k in 0..c {
            bias[k] = bias[k] * scale[k] + shift[k];
        }
        keep[id] = false;
        alias[id] = parent;
    }
    g.compact(&keep, &alias)
}
