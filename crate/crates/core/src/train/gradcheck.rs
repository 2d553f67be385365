use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::graph::ForwardOptions;
use crate::{Error, Graph, NodeId, Result, Tensor};

/// Worst relative error per parameter tensor and per graph input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `("node.param", error)`.
    pub params: Vec<(String, f64)>,
    pub inputs: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.1).chain(self.inputs.iter().copied()).fold(0.0, f64::max)
    }
}

/// Tensor error `max|analytic − numeric| / max(1e-8, max|numeric|)`.
/// Scaling by the whole tensor keeps near-zero entries from dominating.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = numeric.iter().map(|n| n.abs()).fold(0.0, f64::max);
    diff / scale.max(1e-8)
}

/// Compares backward against central differences of the scalar
/// `Σ projection ⊙ output` with the graph in training mode. The same
/// `rng_seed` is used for every evaluation so dropout masks stay fixed.
pub fn grad_check(
    graph: &Graph<f64>,
    inputs: &[Tensor<f64>],
    output: NodeId,
    projection: &Tensor<f64>,
    eps: f64,
    rng_seed: u64,
) -> Result<GradCheckReport> {
    let opts = ForwardOptions::training();
    let objective = |g: &Graph<f64>, xs: &[Tensor<f64>]| -> Result<f64> {
        let acts = g.forward(xs, &opts, &mut crate::seeded_rng(rng_seed))?;
        let y = acts.get(output);
        if y.dims() != projection.dims() {
            return Err(Error::dim("grad_check", format!("projection {:?} vs output {:?}", projection.dims(), y.dims())));
        }
        Ok(y.data().iter().zip(projection.data()).map(|(a, b)| a * b).sum())
    };
    let acts = graph.forward(inputs, &opts, &mut crate::seeded_rng(rng_seed))?;
    let grads = graph.backward(&acts, &[(output, projection.clone())])?;

    let mut probe = graph.clone();
    let mut params = Vec::new();
    for (id, node) in graph.nodes().iter().enumerate() {
        let infos = node.op.param_info();
        for (k, info) in infos.iter().enumerate().filter(|(_, p)| p.trainable) {
            let mut numeric = Vec::with_capacity(grads.params[id][k].len());
            for i in 0..grads.params[id][k].len() {
                let orig = graph.node(id).op.param_values()[k][i];
                probe.node_mut(id).op.param_values_mut()[k][i] = orig + eps;
                let up = objective(&probe, inputs)?;
                probe.node_mut(id).op.param_values_mut()[k][i] = orig - eps;
                let down = objective(&probe, inputs)?;
                probe.node_mut(id).op.param_values_mut()[k][i] = orig;
                numeric.push((up - down) / (2.0 * eps));
            }
            params.push((format!("{}.{}", node.name, info.name), relative_error(&grads.params[id][k], &numeric)));
        }
    }

    let mut input_errors = Vec::new();
    let mut xs = inputs.to_vec();
    for (j, g) in grads.inputs.iter().enumerate() {
        let Some(g) = g else {
            input_errors.push(0.0);
            continue;
        };
        let mut numeric = Vec::with_capacity(g.len());
        for i in 0..g.len() {
            let orig = xs[j].data()[i];
            xs[j].data_mut()[i] = orig + eps;
            let up = objective(graph, &xs)?;
            xs[j].data_mut()[i] = orig - eps;
            let down = objective(graph, &xs)?;
            xs[j].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
        input_errors.push(relative_error(g.data(), &numeric));
    }
    Ok(GradCheckReport { params, inputs: input_errors })
}
