//! Static compute graphs.
//!
//! A [`Graph`] is an ordered list of [`Node`]s; every node only reads nodes
//! that precede it, so the node order is a topological order and doubles as
//! the autodiff tape. Parameters are owned by the op that uses them.

mod accounting;
mod exec;
mod fold;

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{axis_geometry, BatchNormParams, ConvParams};
use crate::{Error, Real, Result};

pub use accounting::{count_flops, count_flops_for_dims, count_params, CostReport, LayerCost};
pub use exec::{Activations, ForwardOptions, Gradients, NodeHook};
pub use fold::fold_batch_norm;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum Op<T = f32> {
    /// Graph input `index`, with its declared per-sample shape.
    Input { index: usize, height: usize, width: usize, channels: usize },
    /// Block average pooling by an integer factor.
    AvgPool { factor: usize },
    Conv(ConvParams<T>),
    DepthwiseConv(ConvParams<T>),
    BatchNorm(BatchNormParams<T>),
    Relu6,
    Add,
    /// Channel concatenation of all inputs, in order.
    Concat,
    /// Bilinear upsampling by an integer factor.
    Upsample { factor: usize },
    /// Bilinear resize of input 0 to the spatial size of input 1.
    ResizeLike,
    PoolToBins { bins: usize },
    Dropout { rate: f64 },
}

/// Name, shape and role of one parameter tensor owned by an op.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: &'static str,
    pub dims: Vec<usize>,
    /// `false` for batch-norm running statistics.
    pub trainable: bool,
}

impl<T: Real> Op<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::AvgPool { .. } => "avg_pool",
            Op::Conv(p) if p.kh() == 1 && p.kw() == 1 => "pointwise_conv",
            Op::Conv(_) => "conv2d",
            Op::DepthwiseConv(_) => "depthwise_conv",
            Op::BatchNorm(_) => "batch_norm",
            Op::Relu6 => "relu6",
            Op::Add => "add",
            Op::Concat => "concat",
            Op::Upsample { .. } => "upsample",
            Op::ResizeLike => "resize",
            Op::PoolToBins { .. } => "pool_to_bins",
            Op::Dropout { .. } => "dropout",
        }
    }

    pub fn arity(&self) -> Option<usize> {
        match self {
            Op::Input { .. } => Some(0),
            Op::Add | Op::ResizeLike => Some(2),
            Op::Concat => None,
            _ => Some(1),
        }
    }

    /// Parameter metadata, trainable tensors first.
    pub fn param_info(&self) -> Vec<ParamInfo> {
        let v = |name, dims: &[usize], trainable| ParamInfo { name, dims: dims.to_vec(), trainable };
        match self {
            Op::Conv(p) | Op::DepthwiseConv(p) => {
                let mut out = vec![v("weight", &p.kernel.dims(), true)];
                if let Some(b) = &p.bias {
                    out.push(v("bias", &[b.len()], true));
                }
                out
            }
            Op::BatchNorm(p) => {
                let c = [p.channels()];
                vec![v("gamma", &c, true), v("beta", &c, true), v("running_mean", &c, false), v("running_var", &c, false)]
            }
            _ => Vec::new(),
        }
    }

    /// Parameter values in [`Op::param_info`] order.
    pub fn param_values(&self) -> Vec<&[T]> {
        match self {
            Op::Conv(p) | Op::DepthwiseConv(p) => {
                let mut out = vec![p.kernel.data()];
                if let Some(b) = &p.bias {
                    out.push(b.as_slice());
                }
                out
            }
            Op::BatchNorm(p) => vec![&p.gamma, &p.beta, &p.running_mean, &p.running_var],
            _ => Vec::new(),
        }
    }

    pub fn param_values_mut(&mut self) -> Vec<&mut [T]> {
        match self {
            Op::Conv(p) | Op::DepthwiseConv(p) => {
                let mut out = vec![p.kernel.data_mut()];
                if let Some(b) = &mut p.bias {
                    out.push(b.as_mut_slice());
                }
                out
            }
            Op::BatchNorm(p) => vec![&mut p.gamma, &mut p.beta, &mut p.running_mean, &mut p.running_var],
            _ => Vec::new(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.param_info().iter().filter(|p| p.trainable).count()
    }

    pub fn cast<U: Real>(&self) -> Op<U> {
        match self {
            Op::Input { index, height, width, channels } => {
                Op::Input { index: *index, height: *height, width: *width, channels: *channels }
            }
            Op::AvgPool { factor } => Op::AvgPool { factor: *factor },
            Op::Conv(p) => Op::Conv(p.cast()),
            Op::DepthwiseConv(p) => Op::DepthwiseConv(p.cast()),
            Op::BatchNorm(p) => Op::BatchNorm(p.cast()),
            Op::Relu6 => Op::Relu6,
            Op::Add => Op::Add,
            Op::Concat => Op::Concat,
            Op::Upsample { factor } => Op::Upsample { factor: *factor },
            Op::ResizeLike => Op::ResizeLike,
            Op::PoolToBins { bins } => Op::PoolToBins { bins: *bins },
            Op::Dropout { rate } => Op::Dropout { rate: *rate },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node<T = f32> {
    pub name: String,
    pub op: Op<T>,
    pub inputs: Vec<NodeId>,
}

/// Role of a node the caller cares about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mark {
    /// Classifier logits at fused-feature resolution.
    Logits,
    /// Classifier logits upsampled to input resolution.
    FullLogits,
    /// Auxiliary classifier on the context branch.
    AuxLogits,
    /// Context features as they enter the fusion unit.
    ContextOut,
    /// Detail-branch features as they enter the fusion unit.
    DetailOut,
    /// Generic output of a fragment.
    Output,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    marks: Vec<(Mark, NodeId)>,
}

impl<T: Real> Graph<T> {
    /// Validates wiring (inputs precede consumers, arities, unique names).
    pub fn new(nodes: Vec<Node<T>>, marks: Vec<(Mark, NodeId)>) -> Result<Self> {
        let mut names = BTreeSet::new();
        for (id, node) in nodes.iter().enumerate() {
            if !names.insert(node.name.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate node name `{}`", node.name)));
            }
            if let Some(&bad) = node.inputs.iter().find(|&&i| i >= id) {
                return Err(Error::InvalidArgument(format!(
                    "node `{}` reads node {bad}, which does not precede it",
                    node.name
                )));
            }
            let ok = match node.op.arity() {
                Some(a) => node.inputs.len() == a,
                None => !node.inputs.is_empty(),
            };
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "node `{}` ({}) has {} inputs",
                    node.name,
                    node.op.kind(),
                    node.inputs.len()
                )));
            }
        }
        if let Some(&(m, id)) = marks.iter().find(|(_, id)| *id >= nodes.len()) {
            return Err(Error::InvalidArgument(format!("mark {m:?} points at missing node {id}")));
        }
        Ok(Graph { nodes, marks })
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut Node<T> {
        &mut self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn marks(&self) -> &[(Mark, NodeId)] {
        &self.marks
    }

    pub fn mark(&self, mark: Mark) -> Option<NodeId> {
        self.marks.iter().find(|(m, _)| *m == mark).map(|&(_, id)| id)
    }

    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        (id + 1..self.nodes.len()).filter(|&c| self.nodes[c].inputs.contains(&id)).collect()
    }

    /// Input node ids ordered by their input index.
    pub fn input_nodes(&self) -> Vec<NodeId> {
        let mut ins: Vec<(usize, NodeId)> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| match n.op {
                Op::Input { index, .. } => Some((index, id)),
                _ => None,
            })
            .collect();
        ins.sort();
        ins.into_iter().map(|(_, id)| id).collect()
    }

    /// Declared `(n, h, w, c)` of every input for batch size `n`.
    pub fn input_dims(&self, n: usize) -> Vec<[usize; 4]> {
        self.input_nodes()
            .into_iter()
            .map(|id| match self.nodes[id].op {
                Op::Input { height, width, channels, .. } => [n, height, width, channels],
                _ => unreachable!(),
            })
            .collect()
    }

    /// Output dims of every node for the given input dims.
    pub fn infer_dims(&self, inputs: &[[usize; 4]]) -> Result<Vec<[usize; 4]>> {
        let mut dims: Vec<[usize; 4]> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<[usize; 4]> = node.inputs.iter().map(|&i| dims[i]).collect();
            let d = node_dims(&node.op, &ins, inputs).map_err(|e| e.at_node(&node.name))?;
            dims.push(d);
        }
        Ok(dims)
    }

    /// Output dims of every node at the declared input sizes, batch 1.
    pub fn shapes(&self) -> Result<Vec<[usize; 4]>> {
        self.infer_dims(&self.input_dims(1))
    }

    pub fn channels(&self, id: NodeId) -> Result<usize> {
        Ok(self.shapes()?[id][3])
    }

    /// Same graph with every scalar converted to `U`.
    pub fn cast<U: Real>(&self) -> Graph<U> {
        Graph {
            nodes: self
                .nodes
                .iter()
                .map(|n| Node { name: n.name.clone(), op: n.op.cast(), inputs: n.inputs.clone() })
                .collect(),
            marks: self.marks.clone(),
        }
    }

    /// Removes nodes with `keep[i] == false`; reads of a removed node `i`
    /// are redirected to `alias[i]`, which must be kept.
    pub(crate) fn compact(self, keep: &[bool], alias: &[NodeId]) -> Result<Self> {
        let resolve = |mut id: NodeId| {
            while !keep[id] {
                id = alias[id];
            }
            id
        };
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut next = 0;
        for (i, &k) in keep.iter().enumerate() {
            if k {
                remap[i] = next;
                next += 1;
            }
        }
        let marks = self.marks.iter().map(|&(m, id)| (m, remap[resolve(id)])).collect();
        let nodes = self
            .nodes
            .into_iter()
            .enumerate()
            .filter(|(i, _)| keep[*i])
            .map(|(_, mut n)| {
                n.inputs = n.inputs.iter().map(|&i| remap[resolve(i)]).collect();
                n
            })
            .collect();
        Graph::new(nodes, marks)
    }
}

pub(crate) fn node_dims<T: Real>(op: &Op<T>, ins: &[[usize; 4]], graph_inputs: &[[usize; 4]]) -> Result<[usize; 4]> {
    let first = ins.first().copied().unwrap_or_default();
    let [n, h, w, c] = first;
    match op {
        Op::Input { index, channels, .. } => {
            let d = *graph_inputs
                .get(*index)
                .ok_or_else(|| Error::InvalidArgument(format!("graph input {index} not supplied")))?;
            if d[3] != *channels {
                return Err(Error::dim("input", format!("{} channels supplied, {channels} declared", d[3])));
            }
            Ok(d)
        }
        Op::AvgPool { factor } => {
            if *factor == 0 || h % factor != 0 || w % factor != 0 {
                return Err(Error::dim("avg_pool", format!("{h}x{w} not divisible by {factor}")));
            }
            Ok([n, h / factor, w / factor, c])
        }
        Op::Conv(p) => {
            let [_, _, ci, co] = p.kernel.dims();
            if c != ci {
                return Err(Error::dim("conv2d", format!("input has {c} channels, kernel expects {ci}")));
            }
            let (oh, _) = axis_geometry(h, p.kh(), p.stride, p.dilation, p.padding)?;
            let (ow, _) = axis_geometry(w, p.kw(), p.stride, p.dilation, p.padding)?;
            Ok([n, oh, ow, co])
        }
        Op::DepthwiseConv(p) => {
            let kc = p.kernel.dims()[2];
            if c != kc || p.kernel.dims()[3] != 1 {
                return Err(Error::dim(
                    "depthwise_conv2d",
                    format!("input has {c} channels, kernel {:?}", p.kernel.dims()),
                ));
            }
            let (oh, _) = axis_geometry(h, p.kh(), p.stride, p.dilation, p.padding)?;
            let (ow, _) = axis_geometry(w, p.kw(), p.stride, p.dilation, p.padding)?;
            Ok([n, oh, ow, c])
        }
        Op::BatchNorm(p) => {
            if c != p.channels() {
                return Err(Error::dim("batch_norm", format!("input has {c} channels, parameters {}", p.channels())));
            }
            Ok(first)
        }
        Op::Relu6 | Op::Dropout { .. } => Ok(first),
        Op::Add => {
            if ins[0] != ins[1] {
                return Err(Error::dim("add", format!("{:?} vs {:?}", ins[0], ins[1])));
            }
            Ok(first)
        }
        Op::Concat => {
            if ins.iter().any(|d| d[..3] != first[..3]) {
                return Err(Error::dim("concat", format!("inputs {ins:?}")));
            }
            Ok([n, h, w, ins.iter().map(|d| d[3]).sum()])
        }
        Op::Upsample { factor } => {
            if *factor == 0 {
                return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
            }
            Ok([n, h * factor, w * factor, c])
        }
        Op::ResizeLike => {
            if ins[1][0] != n {
                return Err(Error::dim("resize", format!("batch {n} vs reference {}", ins[1][0])));
            }
            Ok([n, ins[1][1], ins[1][2], c])
        }
        Op::PoolToBins { bins } => {
            if *bins == 0 || *bins > h.min(w) {
                return Err(Error::dim("avg_pool_to_bins", format!("{bins} bins for a {h}x{w} map")));
            }
            Ok([n, *bins, *bins, c])
        }
    }
}
