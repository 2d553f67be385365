//! Parameter and multiply-accumulate accounting.

use alloc::string::String;
use alloc::vec::Vec;

use super::{Graph, NodeId, Op};
use crate::{Real, Result};

/// Trainable element count: conv kernels, biases, batch-norm γ and β.
pub fn count_params<T: Real>(graph: &Graph<T>) -> usize {
    graph
        .nodes()
        .iter()
        .flat_map(|n| n.op.param_info())
        .filter(|p| p.trainable)
        .map(|p| p.dims.iter().product::<usize>())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub node: NodeId,
    pub name: String,
    pub kind: &'static str,
    pub params: usize,
    pub macs: u64,
    pub out_dims: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_params: usize,
    pub total_macs: u64,
}

impl CostReport {
    /// One MAC counted as two floating-point operations.
    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs
    }
}

/// Per-layer cost with every graph input resized to `height × width`
/// (batch 1, declared channels).
pub fn count_flops<T: Real>(graph: &Graph<T>, height: usize, width: usize) -> Result<CostReport> {
    let dims: Vec<[usize; 4]> = graph.input_dims(1).into_iter().map(|d| [1, height, width, d[3]]).collect();
    count_flops_for_dims(graph, &dims)
}

/// Standard conv: `kh·kw·c_in·c_out·h_out·w_out`; depthwise:
/// `kh·kw·c·h_out·w_out`. Other ops are not counted.
pub fn count_flops_for_dims<T: Real>(graph: &Graph<T>, inputs: &[[usize; 4]]) -> Result<CostReport> {
    let dims = graph.infer_dims(inputs)?;
    let mut layers = Vec::with_capacity(graph.len());
    for (id, node) in graph.nodes().iter().enumerate() {
        let [n, oh, ow, oc] = dims[id];
        let sites = (n * oh * ow) as u64;
        let macs = match &node.op {
            Op::Conv(p) => {
                let [kh, kw, ci, co] = p.kernel.dims();
                (kh * kw * ci * co) as u64 * sites
            }
            Op::DepthwiseConv(p) => (p.kh() * p.kw() * oc) as u64 * sites,
            _ => 0,
        };
        let params = node
            .op
            .param_info()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.dims.iter().product::<usize>())
            .sum();
        layers.push(LayerCost {
            node: id,
            name: node.name.clone(),
            kind: node.op.kind(),
            params,
            macs,
            out_dims: dims[id],
        });
    }
    Ok(CostReport {
        total_params: layers.iter().map(|l| l.params).sum(),
        total_macs: layers.iter().map(|l| l.macs).sum(),
        layers,
    })
}
