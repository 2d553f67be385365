//! Structured ℓ1 filter pruning.
//!
//! Every output channel of every node is traced back to the convolution
//! filter (or graph input channel) that produced it. Removing filters then
//! amounts to deleting the matching channel positions everywhere they flow:
//! batch-norm vectors, depthwise filters, and input slices of consuming
//! convolutions. Convolutions whose outputs meet at an `Add` form a residual
//! group and must share one keep-set.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::arch::{build_contextnet, ContextNetConfig};
use crate::graph::count_params;
use crate::kernels::ConvParams;
use crate::{Error, Graph, Mark, Node, NodeId, Op, Real, Result, Tensor};

/// Per-filter ℓ1 norms of one kernel and the filters in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRank {
    pub layer: String,
    pub norms: Vec<f64>,
    pub order: Vec<usize>,
}

/// `norm_j = Σ|w[·,·,·,j]|`, summed in kernel order in f64.
pub fn filter_l1_norms<T: Real>(kernel: &Tensor<T>) -> Vec<f64> {
    let c_out = kernel.dims()[3];
    let mut norms = alloc::vec![0.0; c_out];
    for row in kernel.data().chunks_exact(c_out) {
        for (n, w) in norms.iter_mut().zip(row) {
            *n += w.as_f64().abs();
        }
    }
    norms
}

/// Ascending order of `norms`; ties go to the lower index.
pub fn ascending_order(norms: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    order
}

pub fn rank_filters_l1<T: Real>(layer: &str, kernel: &Tensor<T>) -> FilterRank {
    let norms = filter_l1_norms(kernel);
    FilterRank { layer: layer.into(), order: ascending_order(&norms), norms }
}

/// Indices of the `keep` largest-norm filters, sorted ascending by index.
pub fn top_filters(norms: &[f64], keep: usize) -> Vec<usize> {
    let order = ascending_order(norms);
    let mut kept: Vec<usize> = order[order.len() - keep.min(order.len())..].to_vec();
    kept.sort_unstable();
    kept
}

/// `(producer, filter)` for every output channel of every node.
type Origins = Vec<Vec<(NodeId, usize)>>;

fn channel_origins<T: Real>(graph: &Graph<T>) -> Result<Origins> {
    let mut origins: Origins = Vec::with_capacity(graph.len());
    for (id, node) in graph.nodes().iter().enumerate() {
        let o = match &node.op {
            Op::Input { channels, .. } => (0..*channels).map(|j| (id, j)).collect(),
            Op::Conv(p) => (0..p.kernel.dims()[3]).map(|j| (id, j)).collect(),
            Op::Concat => node.inputs.iter().flat_map(|&i| origins[i].iter().copied()).collect(),
            _ => origins[node.inputs[0]].clone(),
        };
        origins.push(o);
    }
    Ok(origins)
}

fn find_root(parent: &mut BTreeMap<NodeId, NodeId>, x: NodeId) -> NodeId {
    let p = *parent.get(&x).unwrap_or(&x);
    if p == x {
        return x;
    }
    let r = find_root(parent, p);
    parent.insert(x, r);
    r
}

/// Convolutions whose filters can be removed, partitioned into groups
/// that must share a keep-set.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneGroups {
    pub groups: Vec<Vec<NodeId>>,
    /// Convolutions that can never be pruned: class heads and anything
    /// tied to a graph input or a generic output by a residual add.
    pub locked: Vec<NodeId>,
}

impl PruneGroups {
    pub fn group_of(&self, id: NodeId) -> Option<&[NodeId]> {
        self.groups.iter().find(|g| g.contains(&id)).map(|g| g.as_slice())
    }
}

pub fn prune_groups<T: Real>(graph: &Graph<T>) -> Result<PruneGroups> {
    let origins = channel_origins(graph)?;
    let mut parent = BTreeMap::new();
    let mut misaligned = Vec::new();
    for node in graph.nodes() {
        if let Op::Add = node.op {
            let (a, b) = (&origins[node.inputs[0]], &origins[node.inputs[1]]);
            for (&(sa, ja), &(sb, jb)) in a.iter().zip(b) {
                if ja != jb {
                    misaligned.extend([sa, sb]);
                }
                let (ra, rb) = (find_root(&mut parent, sa), find_root(&mut parent, sb));
                if ra != rb {
                    parent.insert(ra.max(rb), ra.min(rb));
                }
            }
        }
    }
    let mut locked_sources: Vec<NodeId> = misaligned;
    for &(mark, id) in graph.marks() {
        if matches!(mark, Mark::Logits | Mark::FullLogits | Mark::AuxLogits | Mark::Output) {
            locked_sources.extend(origins[id].iter().map(|o| o.0));
        }
    }
    for (id, node) in graph.nodes().iter().enumerate() {
        if let Op::Input { .. } = node.op {
            locked_sources.push(id);
        }
    }
    let locked_roots: Vec<NodeId> = locked_sources.iter().map(|&s| find_root(&mut parent, s)).collect();

    let mut by_root: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    let mut locked = Vec::new();
    for (id, node) in graph.nodes().iter().enumerate() {
        if let Op::Conv(_) = node.op {
            let r = find_root(&mut parent, id);
            if locked_roots.contains(&r) {
                locked.push(id);
            } else {
                by_root.entry(r).or_default().push(id);
            }
        }
    }
    Ok(PruneGroups { groups: by_root.into_values().collect(), locked })
}

fn select<T: Copy>(v: &[T], keep: &[usize]) -> Vec<T> {
    keep.iter().map(|&i| v[i]).collect()
}

/// Kernel `(kh, kw, ci, co)` restricted to the given input and output channels.
fn select_kernel<T: Real>(k: &Tensor<T>, keep_in: &[usize], keep_out: &[usize]) -> Tensor<T> {
    let [kh, kw, ci, co] = k.dims();
    let mut data = Vec::with_capacity(kh * kw * keep_in.len() * keep_out.len());
    for tap in 0..kh * kw {
        for &i in keep_in {
            let row = &k.data()[(tap * ci + i) * co..(tap * ci + i + 1) * co];
            data.extend(keep_out.iter().map(|&o| row[o]));
        }
    }
    Tensor::from_vec([kh, kw, keep_in.len(), keep_out.len()], data).expect("selection keeps dims consistent")
}

fn resized_conv<T: Real>(p: &ConvParams<T>, keep_in: &[usize], keep_out: &[usize]) -> ConvParams<T> {
    ConvParams {
        kernel: select_kernel(&p.kernel, keep_in, keep_out),
        bias: p.bias.as_ref().map(|b| select(b, keep_out)),
        ..p.clone()
    }
}

/// Removes filters according to `keep` (convolution id → kept filter
/// indices). Convolutions absent from `keep` keep every filter.
pub fn apply_pruning<T: Real>(graph: &Graph<T>, keep: &BTreeMap<NodeId, Vec<usize>>) -> Result<Graph<T>> {
    let locked = prune_groups(graph)?.locked;
    for (&id, k) in keep {
        let name = &graph.nodes().get(id).ok_or_else(|| Error::Prune(format!("no node {id}")))?.name;
        let Op::Conv(p) = &graph.node(id).op else {
            return Err(Error::Prune(format!("`{name}` is not a standard convolution")));
        };
        let co = p.kernel.dims()[3];
        if k.is_empty() || k.windows(2).any(|w| w[0] >= w[1]) || k[k.len() - 1] >= co {
            return Err(Error::Prune(format!(
                "keep-set for `{name}` must be non-empty, strictly increasing and below {co}"
            )));
        }
        if k.len() < co && locked.contains(&id) {
            return Err(Error::Prune(format!(
                "`{name}` is locked: it produces class scores or is tied to the input channels"
            )));
        }
    }
    let origins = channel_origins(graph)?;
    let survives = |&(src, j): &(NodeId, usize)| keep.get(&src).map_or(true, |k| k.binary_search(&j).is_ok());
    let kept: Vec<Vec<usize>> = origins
        .iter()
        .map(|o| o.iter().enumerate().filter(|(_, s)| survives(s)).map(|(p, _)| p).collect())
        .collect();

    let mut nodes: Vec<Node<T>> = Vec::with_capacity(graph.len());
    for (id, node) in graph.nodes().iter().enumerate() {
        let keep_in = node.inputs.first().map(|&i| kept[i].as_slice()).unwrap_or(&[]);
        let op = match &node.op {
            Op::Input { .. } => {
                if kept[id].len() != origins[id].len() {
                    return Err(Error::Prune(format!("cannot remove channels of input `{}`", node.name)));
                }
                node.op.clone()
            }
            Op::Conv(p) => Op::Conv(resized_conv(p, keep_in, &kept[id])),
            Op::DepthwiseConv(p) => {
                let mut q = p.clone();
                let [kh, kw, c, _] = p.kernel.dims();
                let mut data = Vec::with_capacity(kh * kw * keep_in.len());
                for tap in 0..kh * kw {
                    data.extend(keep_in.iter().map(|&i| p.kernel.data()[tap * c + i]));
                }
                q.kernel = Tensor::from_vec([kh, kw, keep_in.len(), 1], data)?;
                q.bias = p.bias.as_ref().map(|b| select(b, keep_in));
                Op::DepthwiseConv(q)
            }
            Op::BatchNorm(p) => {
                let mut q = p.clone();
                q.gamma = select(&p.gamma, keep_in);
                q.beta = select(&p.beta, keep_in);
                q.running_mean = select(&p.running_mean, keep_in);
                q.running_var = select(&p.running_var, keep_in);
                Op::BatchNorm(q)
            }
            Op::Add => {
                if kept[node.inputs[0]] != kept[node.inputs[1]] {
                    return Err(Error::Prune(format!(
                        "residual add `{}` would receive different channel sets; prune its group with one keep-set",
                        node.name
                    )));
                }
                Op::Add
            }
            other => other.clone(),
        };
        nodes.push(Node { name: node.name.clone(), op, inputs: node.inputs.clone() });
    }
    let out = Graph::new(nodes, graph.marks().to_vec())?;
    out.shapes()?;
    Ok(out)
}

/// Prunes a single named convolution. Fails when the layer is coupled to
/// others through a residual add; use [`prune_group`] for those.
pub fn prune_filters<T: Real>(graph: &Graph<T>, layer: &str, keep: &[usize]) -> Result<Graph<T>> {
    let id = graph.find(layer).ok_or_else(|| Error::Prune(format!("no layer `{layer}`")))?;
    apply_pruning(graph, &BTreeMap::from([(id, keep.to_vec())]))
}

/// Prunes every listed convolution with the same keep-set.
pub fn prune_group<T: Real>(graph: &Graph<T>, layers: &[&str], keep: &[usize]) -> Result<Graph<T>> {
    let mut plan = BTreeMap::new();
    for layer in layers {
        let id = graph.find(layer).ok_or_else(|| Error::Prune(format!("no layer `{layer}`")))?;
        plan.insert(id, keep.to_vec());
    }
    apply_pruning(graph, &plan)
}

/// Kept/removed filter counts for one group in one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPrune {
    pub layers: Vec<String>,
    pub before: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub multiplier: f64,
    pub params: usize,
    pub layers: Vec<LayerPrune>,
    /// Filled in by the caller after fine-tuning, if it evaluates.
    pub miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub initial_params: usize,
    pub stages: Vec<StageReport>,
}

/// Multiplier sequence, strictly decreasing and ending at 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneSchedule {
    pub multipliers: Vec<f64>,
    pub finetune_epochs: usize,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule { multipliers: alloc::vec![2.0, 1.5, 1.25, 1.0], finetune_epochs: 1 }
    }
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        let m = &self.multipliers;
        if m.len() < 2 || m.windows(2).any(|w| w[1].partial_cmp(&w[0]) != Some(core::cmp::Ordering::Less)) || m[m.len() - 1] != 1.0 || m[0] <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "prune schedule {m:?} must be strictly decreasing and end at 1.0"
            )));
        }
        Ok(())
    }
}

/// Target output width per convolution name for a given multiplier.
pub trait WidthTargets {
    fn widths(&self, multiplier: f64) -> Result<BTreeMap<String, usize>>;
}

/// Every prunable width scales by the ratio of consecutive multipliers,
/// relative to the widths of `reference` (built at `reference_multiplier`).
/// Locked layers keep their width.
pub struct UniformTargets {
    pub reference: BTreeMap<String, usize>,
    pub reference_multiplier: f64,
    pub locked: Vec<String>,
}

impl UniformTargets {
    pub fn new<T: Real>(graph: &Graph<T>, multiplier: f64) -> Result<Self> {
        let locked = prune_groups(graph)?.locked.iter().map(|&id| graph.node(id).name.clone()).collect();
        Ok(UniformTargets { reference: conv_out_widths(graph), reference_multiplier: multiplier, locked })
    }
}

impl WidthTargets for UniformTargets {
    fn widths(&self, multiplier: f64) -> Result<BTreeMap<String, usize>> {
        let f = multiplier / self.reference_multiplier;
        Ok(self
            .reference
            .iter()
            .map(|(k, &w)| {
                let t = if self.locked.contains(k) { w } else { (num_traits::Float::round(w as f64 * f) as usize).max(1) };
                (k.clone(), t)
            })
            .collect())
    }
}

/// Widths of a natively built ContextNet at each multiplier.
pub struct ContextNetTargets(pub ContextNetConfig);

impl WidthTargets for ContextNetTargets {
    fn widths(&self, multiplier: f64) -> Result<BTreeMap<String, usize>> {
        let cfg = self.0.clone().with_width(multiplier);
        Ok(conv_out_widths(&build_contextnet::<f32>(&cfg, 0)?))
    }
}

/// Output width of every standard convolution by name.
pub fn conv_out_widths<T: Real>(graph: &Graph<T>) -> BTreeMap<String, usize> {
    graph
        .nodes()
        .iter()
        .filter_map(|n| match &n.op {
            Op::Conv(p) => Some((n.name.clone(), p.kernel.dims()[3])),
            _ => None,
        })
        .collect()
}

/// One pruning stage: every group shrinks to its target width, keeping the
/// filters with the largest summed ℓ1 norm across the group.
pub fn prune_to_widths<T: Real>(graph: &Graph<T>, targets: &BTreeMap<String, usize>) -> Result<(Graph<T>, Vec<LayerPrune>)> {
    let groups = prune_groups(graph)?;
    let mut plan = BTreeMap::new();
    let mut report = Vec::new();
    for group in &groups.groups {
        let names: Vec<String> = group.iter().map(|&id| graph.node(id).name.clone()).collect();
        let mut target = None;
        for name in &names {
            let t = *targets
                .get(name)
                .ok_or_else(|| Error::Prune(format!("no target width for `{name}`")))?;
            if target.is_some_and(|x| x != t) {
                return Err(Error::Prune(format!("residual group {names:?} has conflicting target widths")));
            }
            target = Some(t);
        }
        let target = target.expect("groups are non-empty");
        let width = match &graph.node(group[0]).op {
            Op::Conv(p) => p.kernel.dims()[3],
            _ => unreachable!("groups hold convolutions"),
        };
        if target > width || target == 0 {
            return Err(Error::Prune(format!("cannot prune {names:?} from {width} to {target} filters")));
        }
        let mut norms = alloc::vec![0.0; width];
        for &id in group {
            if let Op::Conv(p) = &graph.node(id).op {
                norms.iter_mut().zip(filter_l1_norms(&p.kernel)).for_each(|(a, b)| *a += b);
            }
        }
        let keep = top_filters(&norms, target);
        for &id in group {
            plan.insert(id, keep.clone());
        }
        report.push(LayerPrune { layers: names, before: width, kept: target });
    }
    for &id in &groups.locked {
        let name = &graph.node(id).name;
        if let (Some(&t), Op::Conv(p)) = (targets.get(name), &graph.node(id).op) {
            if t != p.kernel.dims()[3] {
                return Err(Error::Prune(format!("`{name}` cannot be pruned but its target width changes")));
            }
        }
    }
    Ok((apply_pruning(graph, &plan)?, report))
}

/// Runs the schedule: before each stage after the first, prune to the
/// next multiplier's widths, then call `finetune`.
pub fn progressive_prune<T: Real>(
    graph: Graph<T>,
    schedule: &PruneSchedule,
    targets: &dyn WidthTargets,
    mut finetune: impl FnMut(&mut Graph<T>, &mut StageReport) -> Result<()>,
) -> Result<(Graph<T>, PruneReport)> {
    schedule.validate()?;
    let start = targets.widths(schedule.multipliers[0])?;
    for (name, w) in conv_out_widths(&graph) {
        if start.get(&name).is_some_and(|&t| t != w) {
            return Err(Error::Prune(format!(
                "`{name}` has {w} filters, expected {} at multiplier {}",
                start[&name], schedule.multipliers[0]
            )));
        }
    }
    let mut report = PruneReport { initial_params: count_params(&graph), stages: Vec::new() };
    let mut graph = graph;
    for &m in &schedule.multipliers[1..] {
        let (mut next, layers) = prune_to_widths(&graph, &targets.widths(m)?)?;
        let mut stage = StageReport { multiplier: m, params: count_params(&next), layers, miou: None };
        finetune(&mut next, &mut stage)?;
        report.stages.push(stage);
        graph = next;
    }
    Ok((graph, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{bottleneck_graph, BottleneckSpec, GraphBuilder};
    use crate::graph::ForwardOptions;

    #[test]
    fn ranking_examples() {
        let k = Tensor::<f32>::from_vec([1, 1, 1, 3], alloc::vec![3.0, -1.0, 2.0]).unwrap();
        assert_eq!(rank_filters_l1("k", &k).order, [1, 2, 0]);
        let k = Tensor::<f32>::from_vec([1, 1, 2, 3], alloc::vec![1.0, 0.0, 1.0, -1.0, 0.0, 1.0]).unwrap();
        assert_eq!(rank_filters_l1("k", &k).order, [1, 0, 2]);
    }

    #[test]
    fn groups_follow_residual_adds() {
        let mut b = GraphBuilder::<f32>::new(0);
        let x = b.input("x", 6, 6, 3).unwrap();
        let s = b.conv_bn("stem", x, 3, 16, 1, true).unwrap();
        let y = crate::arch::build_bottleneck(&mut b, s, &BottleneckSpec::new(16, 16, 2, 1, 2), "blk").unwrap();
        let h = b.conv("head", y, 1, 4, 1, true).unwrap();
        b.mark(Mark::Logits, h);
        let g = b.finish().unwrap();
        let groups = prune_groups(&g).unwrap();
        let id = |n: &str| g.find(n).unwrap();
        let mut residual = alloc::vec![id("stem"), id("blk.0.project"), id("blk.1.project")];
        residual.sort();
        assert_eq!(groups.group_of(id("stem")).unwrap(), residual.as_slice());
        assert_eq!(groups.group_of(id("blk.0.expand")).unwrap(), &[id("blk.0.expand")]);
        assert_eq!(groups.locked, [id("head")]);

        assert!(matches!(prune_filters(&g, "stem", &[0, 1]), Err(Error::Prune(_))));
        let p = prune_group(&g, &["stem", "blk.0.project", "blk.1.project"], &[0, 3, 5]).unwrap();
        assert_eq!(p.shapes().unwrap()[p.find("blk.1.add").unwrap()], [1, 6, 6, 3]);
    }

    #[test]
    fn input_coupled_block_is_locked() {
        let g: Graph = bottleneck_graph(&BottleneckSpec::new(8, 8, 2, 1, 1), 4, 4, 0).unwrap();
        let groups = prune_groups(&g).unwrap();
        assert_eq!(groups.locked, [g.find("block.0.project").unwrap()]);
        assert!(prune_filters(&g, "block.0.project", &[0]).is_err());
        let p = prune_filters(&g, "block.0.expand", &[1, 4, 9]).unwrap();
        assert_eq!(p.shapes().unwrap()[p.find("block.0.dw").unwrap()][3], 3);
        let mut rng = crate::seeded_rng(0);
        let x = Tensor::random_normal([1, 4, 4, 8], 1.0, &mut rng);
        p.run(&x, &ForwardOptions::inference(), p.mark(Mark::Output).unwrap(), &mut rng).unwrap();
    }

    #[test]
    fn invalid_keep_sets() {
        let g: Graph = bottleneck_graph(&BottleneckSpec::new(8, 8, 2, 1, 1), 4, 4, 0).unwrap();
        assert!(prune_filters(&g, "block.0.expand", &[]).is_err());
        assert!(prune_filters(&g, "block.0.expand", &[3, 1]).is_err());
        assert!(prune_filters(&g, "block.0.expand", &[16]).is_err());
        assert!(prune_filters(&g, "block.0.dw", &[0]).is_err());
        assert!(prune_filters(&g, "missing", &[0]).is_err());
        let all: Vec<usize> = (0..16).collect();
        assert_eq!(prune_filters(&g, "block.0.expand", &all).unwrap(), g);
    }

    #[test]
    fn schedule_validation() {
        assert!(PruneSchedule::default().validate().is_ok());
        for m in [alloc::vec![2.0], alloc::vec![2.0, 2.0, 1.0], alloc::vec![2.0, 1.5], alloc::vec![1.0, 1.5, 1.0]] {
            assert!(PruneSchedule { multipliers: m, finetune_epochs: 0 }.validate().is_err());
        }
    }
}
