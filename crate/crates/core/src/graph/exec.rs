//! Forward evaluation and reverse-mode differentiation over a [`Graph`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;

use super::{Graph, NodeId, Op};
use crate::kernels::{self, BatchStats};
use crate::{Error, Real, Result, Tensor};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Batch statistics in batch norm, active dropout.
    pub training: bool,
    /// Nodes whose outputs are replaced by zeros.
    pub zeroed: Vec<NodeId>,
}

impl ForwardOptions {
    pub fn inference() -> Self {
        ForwardOptions { training: false, zeroed: Vec::new() }
    }

    pub fn training() -> Self {
        ForwardOptions { training: true, zeroed: Vec::new() }
    }
}

/// Per-node callbacks around forward evaluation, used for profiling.
pub trait NodeHook {
    fn enter(&mut self, _id: NodeId) {}
    fn exit(&mut self, _id: NodeId) {}
}

impl NodeHook for () {}

#[derive(Debug, Clone)]
enum Saved<T> {
    Nothing,
    Stats(BatchStats<T>),
    Mask(Vec<T>),
}

/// Every node's output from one forward pass, plus what backward needs.
#[derive(Debug, Clone)]
pub struct Activations<T = f32> {
    values: Vec<Tensor<T>>,
    saved: Vec<Saved<T>>,
    options: ForwardOptions,
}

impl<T: Real> Activations<T> {
    pub fn get(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn training(&self) -> bool {
        self.options.training
    }

    pub fn into_values(self) -> Vec<Tensor<T>> {
        self.values
    }

    /// Batch statistics recorded for a batch-norm node in training mode.
    pub fn batch_stats(&self, id: NodeId) -> Option<&BatchStats<T>> {
        match &self.saved[id] {
            Saved::Stats(s) => Some(s),
            _ => None,
        }
    }
}

/// Gradients of every trainable parameter and every graph input.
#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    /// `params[node][k]` matches the node's k-th trainable tensor.
    pub params: Vec<Vec<Vec<T>>>,
    /// Indexed by graph input index.
    pub inputs: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Graph<T> {
    pub fn forward(
        &self,
        inputs: &[Tensor<T>],
        options: &ForwardOptions,
        rng: &mut impl RngCore,
    ) -> Result<Activations<T>> {
        self.forward_with_hook(inputs, options, rng, &mut ())
    }

    pub fn forward_with_hook(
        &self,
        inputs: &[Tensor<T>],
        options: &ForwardOptions,
        rng: &mut impl RngCore,
        hook: &mut impl NodeHook,
    ) -> Result<Activations<T>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut saved = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            hook.enter(id);
            let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &values[i]).collect();
            let (mut out, s) =
                eval_node(&node.op, &ins, inputs, options.training, rng).map_err(|e| e.at_node(&node.name))?;
            if options.zeroed.contains(&id) {
                out = Tensor::zeros(out.dims());
            }
            hook.exit(id);
            values.push(out);
            saved.push(s);
        }
        Ok(Activations { values, saved, options: options.clone() })
    }

    /// Convenience: single-input forward returning one marked output.
    pub fn run(&self, input: &Tensor<T>, options: &ForwardOptions, output: NodeId, rng: &mut impl RngCore) -> Result<Tensor<T>> {
        let acts = self.forward(core::slice::from_ref(input), options, rng)?;
        Ok(acts.values.into_iter().nth(output).expect("output node exists"))
    }

    /// Back-propagates `seeds` (gradients of the loss with respect to the
    /// given nodes' outputs) through the recorded forward pass.
    pub fn backward(&self, acts: &Activations<T>, seeds: &[(NodeId, Tensor<T>)]) -> Result<Gradients<T>> {
        if acts.values.len() != self.nodes.len() {
            let missing = self.nodes.get(acts.values.len()).map_or("?", |n| n.name.as_str());
            return Err(Error::MissingActivation(missing.into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            let expect = acts.values[*id].dims();
            if g.dims() != expect {
                return Err(Error::dim("backward", format!("seed {:?} for node of shape {:?}", g.dims(), expect))
                    .at_node(&self.nodes[*id].name));
            }
            accumulate(&mut grads[*id], g.clone());
        }
        let mut params: Vec<Vec<Vec<T>>> = self
            .nodes
            .iter()
            .map(|n| vec![Vec::new(); n.op.trainable_count()])
            .collect();
        let mut input_grads = vec![None; self.input_nodes().len()];

        for id in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[id].take() else { continue };
            if acts.options.zeroed.contains(&id) {
                continue;
            }
            let node = &self.nodes[id];
            let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &acts.values[i]).collect();
            let step = backward_node(&node.op, &ins, &acts.values[id], &acts.saved[id], &gy)
                .map_err(|e| e.at_node(&node.name))?;
            if let Op::Input { index, .. } = node.op {
                input_grads[index] = Some(gy);
                continue;
            }
            for (slot, g) in node.inputs.iter().zip(step.inputs) {
                if let Some(g) = g {
                    accumulate(&mut grads[*slot], g);
                }
            }
            let n_params = params[id].len();
            for (k, g) in step.params.into_iter().enumerate().take(n_params) {
                params[id][k] = g;
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            // Nodes the loss never reached still get zero gradients.
            for (k, info) in node.op.param_info().iter().filter(|p| p.trainable).enumerate() {
                if params[id][k].is_empty() {
                    params[id][k] = vec![T::zero(); info.dims.iter().product()];
                }
            }
        }
        Ok(Gradients { params, inputs: input_grads })
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// averages of every batch-norm node.
    pub fn update_running_stats(&mut self, acts: &Activations<T>) {
        for (node, saved) in self.nodes.iter_mut().zip(&acts.saved) {
            if let (Op::BatchNorm(p), Saved::Stats(s)) = (&mut node.op, saved) {
                p.update_running(s);
            }
        }
    }

    /// Like [`Graph::update_running_stats`] with an equal-weight average over
    /// the `seen + 1` passes so far in place of the moving average.
    pub fn average_running_stats(&mut self, acts: &Activations<T>, seen: usize) {
        for (node, saved) in self.nodes.iter_mut().zip(&acts.saved) {
            if let (Op::BatchNorm(p), Saved::Stats(s)) = (&mut node.op, saved) {
                p.average_running(s, seen);
            }
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn eval_node<T: Real>(
    op: &Op<T>,
    ins: &[&Tensor<T>],
    graph_inputs: &[Tensor<T>],
    training: bool,
    rng: &mut impl RngCore,
) -> Result<(Tensor<T>, Saved<T>)> {
    let plain = |t: Tensor<T>| Ok((t, Saved::Nothing));
    match op {
        Op::Input { index, height, width, channels } => {
            let x = graph_inputs
                .get(*index)
                .ok_or_else(|| Error::InvalidArgument(format!("graph input {index} not supplied")))?;
            if [x.h(), x.w(), x.c()] != [*height, *width, *channels] {
                return Err(Error::dim(
                    "input",
                    format!("got {:?}, declared (n, {height}, {width}, {channels})", x.dims()),
                ));
            }
            plain(x.clone())
        }
        Op::AvgPool { factor } => plain(kernels::avg_pool(ins[0], *factor)?),
        Op::Conv(p) => plain(kernels::conv2d(ins[0], p)?),
        Op::DepthwiseConv(p) => plain(kernels::depthwise_conv2d(ins[0], p)?),
        Op::BatchNorm(p) => {
            let (y, stats) = kernels::batch_norm_forward(ins[0], p, training)?;
            Ok((y, stats.map_or(Saved::Nothing, Saved::Stats)))
        }
        Op::Relu6 => plain(kernels::relu6(ins[0])),
        Op::Add => plain(kernels::add(ins[0], ins[1])?),
        Op::Concat => plain(kernels::concat_channels(ins)?),
        Op::Upsample { factor } => plain(kernels::bilinear_upsample(ins[0], *factor)?),
        Op::ResizeLike => plain(kernels::bilinear_resize(ins[0], ins[1].h(), ins[1].w())?),
        Op::PoolToBins { bins } => plain(kernels::avg_pool_to_bins(ins[0], *bins)?),
        Op::Dropout { rate } => {
            if training && *rate > 0.0 {
                let mask = kernels::dropout_mask::<T>(ins[0].len(), *rate, rng)?;
                Ok((kernels::apply_mask(ins[0], &mask), Saved::Mask(mask)))
            } else {
                plain(kernels::dropout(ins[0], *rate, false, rng)?)
            }
        }
    }
}

struct BackStep<T> {
    inputs: Vec<Option<Tensor<T>>>,
    params: Vec<Vec<T>>,
}

fn backward_node<T: Real>(
    op: &Op<T>,
    ins: &[&Tensor<T>],
    _out: &Tensor<T>,
    saved: &Saved<T>,
    gy: &Tensor<T>,
) -> Result<BackStep<T>> {
    let only = |g: Tensor<T>| BackStep { inputs: vec![Some(g)], params: Vec::new() };
    Ok(match op {
        Op::Input { .. } => BackStep { inputs: Vec::new(), params: Vec::new() },
        Op::AvgPool { factor } => only(kernels::avg_pool_backward(gy, *factor)),
        Op::Conv(p) | Op::DepthwiseConv(p) => {
            let g = if matches!(op, Op::Conv(_)) {
                kernels::conv2d_backward(ins[0], p, gy, true)?
            } else {
                kernels::depthwise_conv2d_backward(ins[0], p, gy, true)?
            };
            let mut params = vec![g.kernel.into_vec()];
            if let Some(b) = g.bias {
                params.push(b);
            }
            BackStep { inputs: vec![g.input], params }
        }
        Op::BatchNorm(p) => {
            let stats = match saved {
                Saved::Stats(s) => Some(s),
                _ => None,
            };
            let g = kernels::batch_norm_backward(ins[0], p, stats, gy)?;
            BackStep { inputs: vec![Some(g.input)], params: vec![g.gamma, g.beta] }
        }
        Op::Relu6 => only(kernels::relu6_backward(ins[0], gy)),
        Op::Add => BackStep { inputs: vec![Some(gy.clone()), Some(gy.clone())], params: Vec::new() },
        Op::Concat => {
            let widths: Vec<usize> = ins.iter().map(|t| t.c()).collect();
            BackStep {
                inputs: kernels::split_channels(gy, &widths).into_iter().map(Some).collect(),
                params: Vec::new(),
            }
        }
        Op::Upsample { .. } => only(kernels::bilinear_resize_backward(gy, ins[0].h(), ins[0].w())),
        Op::ResizeLike => BackStep {
            inputs: vec![Some(kernels::bilinear_resize_backward(gy, ins[0].h(), ins[0].w())), None],
            params: Vec::new(),
        },
        Op::PoolToBins { .. } => only(kernels::avg_pool_to_bins_backward(gy, ins[0].h(), ins[0].w())),
        Op::Dropout { .. } => match saved {
            Saved::Mask(m) => only(kernels::apply_mask(gy, m)),
            _ => only(gy.clone()),
        },
    })
}
