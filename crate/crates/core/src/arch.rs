//! ContextNet builders: bottleneck residual blocks, the deep low-resolution
//! context branch, the shallow full-resolution detail branch, the fusion
//! unit, classifier heads and whole-network assembly.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::graph::{node_dims, Graph, Mark, Node, NodeId, Op};
use crate::kernels::{BatchNormParams, ConvParams};
use crate::{Error, Real, Result, Rng, Tensor};

/// Context-branch stages after the stem: `(t, c', repeats, stride)`.
pub const CONTEXT_STAGES: [(usize, usize, usize, usize); 6] =
    [(1, 32, 1, 1), (6, 32, 1, 1), (6, 48, 3, 2), (6, 64, 3, 2), (6, 96, 2, 1), (6, 128, 2, 1)];

/// Detail-branch widths: the standard stem, then three separable layers.
pub const DETAIL_WIDTHS: [usize; 4] = [32, 64, 128, 128];
pub const DETAIL_STRIDES: [usize; 4] = [2, 2, 2, 1];

pub const STEM_WIDTH: usize = 32;
pub const FEATURE_WIDTH: usize = 128;
pub const PPM_BINS: [usize; 4] = [1, 2, 3, 6];
/// Fused features sit at 1/8 of the input resolution.
pub const OUTPUT_STRIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu6,
}

/// One row of a bottleneck stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BottleneckSpec {
    pub c: usize,
    pub c_prime: usize,
    /// Expansion factor of the first 1×1 convolution.
    pub t: usize,
    pub s: usize,
    pub f: Nonlinearity,
    pub repeats: usize,
}

impl BottleneckSpec {
    pub fn new(c: usize, c_prime: usize, t: usize, s: usize, repeats: usize) -> Self {
        BottleneckSpec { c, c_prime, t, s, f: Nonlinearity::Relu6, repeats }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t < 1 || !(1..=2).contains(&self.s) || self.repeats < 1 || self.c == 0 || self.c_prime == 0 {
            return Err(Error::InvalidConfig(format!("invalid bottleneck {self:?}")));
        }
        Ok(())
    }

    /// Width after the expansion convolution of block `i`.
    pub fn expanded(&self, i: usize) -> usize {
        self.t * if i == 0 { self.c } else { self.c_prime }
    }

    /// Residual add on block `i`.
    pub fn has_residual(&self, i: usize) -> bool {
        if i == 0 {
            self.s == 1 && self.c == self.c_prime
        } else {
            true
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextNetConfig {
    pub num_classes: usize,
    /// Full-resolution input `(height, width)`.
    pub input_size: (usize, usize),
    /// 2 → cn12, 4 → cn14, 8 → cn18.
    pub context_downsample: usize,
    pub width_multiplier: f64,
    pub use_ppm: bool,
    pub dropout_rate: f64,
}

impl ContextNetConfig {
    pub fn cn14(num_classes: usize, height: usize, width: usize) -> Self {
        ContextNetConfig {
            num_classes,
            input_size: (height, width),
            context_downsample: 4,
            width_multiplier: 1.0,
            use_ppm: false,
            dropout_rate: 0.1,
        }
    }

    pub fn cn12(num_classes: usize, height: usize, width: usize) -> Self {
        ContextNetConfig { context_downsample: 2, ..Self::cn14(num_classes, height, width) }
    }

    pub fn cn18(num_classes: usize, height: usize, width: usize) -> Self {
        ContextNetConfig { context_downsample: 8, ..Self::cn14(num_classes, height, width) }
    }

    pub fn with_width(mut self, multiplier: f64) -> Self {
        self.width_multiplier = multiplier;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        let unit = OUTPUT_STRIDE * self.context_downsample;
        if ![2, 4, 8].contains(&self.context_downsample) {
            return Err(Error::InvalidConfig(format!(
                "context_downsample must be 2, 4 or 8, got {}",
                self.context_downsample
            )));
        }
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return Err(Error::InvalidConfig(format!("input {h}x{w} must be divisible by {unit}")));
        }
        if self.num_classes < 1 {
            return Err(Error::InvalidConfig("num_classes must be >= 1".into()));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::InvalidConfig(format!("width_multiplier {} must be positive", self.width_multiplier)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// `base` scaled by the width multiplier and rounded to a multiple of 8
    /// (never below 8, never more than 10% under the exact value).
    pub fn width(&self, base: usize) -> usize {
        scaled_width(base, self.width_multiplier)
    }
}

pub fn scaled_width(base: usize, multiplier: f64) -> usize {
    let v = base as f64 * multiplier;
    let mut w = (((v + 4.0) as usize) / 8 * 8).max(8);
    if (w as f64) < 0.9 * v {
        w += 8;
    }
    w
}

/// Incremental graph construction with shape tracking and seeded weight
/// initialisation.
pub struct GraphBuilder<T: Real = f32> {
    nodes: Vec<Node<T>>,
    dims: Vec<[usize; 4]>,
    marks: Vec<(Mark, NodeId)>,
    inputs: Vec<[usize; 4]>,
    rng: Rng,
}

impl<T: Real> GraphBuilder<T> {
    pub fn new(seed: u64) -> Self {
        GraphBuilder { nodes: Vec::new(), dims: Vec::new(), marks: Vec::new(), inputs: Vec::new(), rng: crate::seeded_rng(seed) }
    }

    pub fn input(&mut self, name: &str, height: usize, width: usize, channels: usize) -> Result<NodeId> {
        let index = self.inputs.len();
        self.inputs.push([1, height, width, channels]);
        self.push(name, Op::Input { index, height, width, channels }, &[])
    }

    pub fn push(&mut self, name: &str, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        let ins: Vec<[usize; 4]> = inputs.iter().map(|&i| self.dims[i]).collect();
        let d = node_dims(&op, &ins, &self.inputs).map_err(|e| e.at_node(name))?;
        self.nodes.push(Node { name: name.to_string(), op, inputs: inputs.to_vec() });
        self.dims.push(d);
        Ok(self.nodes.len() - 1)
    }

    pub fn dims(&self, id: NodeId) -> [usize; 4] {
        self.dims[id]
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.dims[id][3]
    }

    pub fn mark(&mut self, mark: Mark, id: NodeId) {
        self.marks.push((mark, id));
    }

    fn init_kernel(&mut self, dims: [usize; 4], fan_in: usize, gain: f64) -> Tensor<T> {
        let std = num_traits::Float::sqrt(gain / fan_in as f64);
        Tensor::random_normal(dims, std, &mut self.rng)
    }

    /// Standard (or pointwise, for `k = 1`) convolution, He-initialised.
    pub fn conv(&mut self, name: &str, input: NodeId, k: usize, out: usize, stride: usize, bias: bool) -> Result<NodeId> {
        let ci = self.channels(input);
        let kernel = self.init_kernel([k, k, ci, out], k * k * ci, 2.0);
        let mut p = ConvParams::new(kernel, stride);
        if bias {
            p = p.with_bias(alloc::vec![T::zero(); out]);
        }
        self.push(name, Op::Conv(p), &[input])
    }

    pub fn depthwise(&mut self, name: &str, input: NodeId, k: usize, stride: usize, dilation: usize) -> Result<NodeId> {
        let c = self.channels(input);
        let kernel = self.init_kernel([k, k, c, 1], k * k, 2.0);
        self.push(name, Op::DepthwiseConv(ConvParams::new(kernel, stride).with_dilation(dilation)), &[input])
    }

    pub fn batch_norm(&mut self, name: &str, input: NodeId) -> Result<NodeId> {
        let c = self.channels(input);
        self.push(name, Op::BatchNorm(BatchNormParams::new(c)), &[input])
    }

    pub fn relu6(&mut self, name: &str, input: NodeId) -> Result<NodeId> {
        self.push(name, Op::Relu6, &[input])
    }

    /// Bias-free convolution, batch norm and optional ReLU6 named
    /// `name`, `name.bn`, `name.act`.
    pub fn conv_bn(&mut self, name: &str, input: NodeId, k: usize, out: usize, stride: usize, act: bool) -> Result<NodeId> {
        let c = self.conv(name, input, k, out, stride, false)?;
        let b = self.batch_norm(&format!("{name}.bn"), c)?;
        if act {
            self.relu6(&format!("{name}.act"), b)
        } else {
            Ok(b)
        }
    }

    pub fn finish(self) -> Result<Graph<T>> {
        Graph::new(self.nodes, self.marks)
    }
}

/// Appends a bottleneck stack: per block a 1×1 expansion to `t·c` with BN
/// and ReLU6, a 3×3 depthwise convolution (stride `s` on the first block)
/// with BN and ReLU6, and a linear 1×1 projection to `c'` with BN; the
/// input is added back when the block keeps stride 1 and width.
pub fn build_bottleneck<T: Real>(
    b: &mut GraphBuilder<T>,
    input: NodeId,
    spec: &BottleneckSpec,
    name: &str,
) -> Result<NodeId> {
    spec.validate()?;
    if b.channels(input) != spec.c {
        return Err(Error::InvalidConfig(format!(
            "{name}: input has {} channels, spec expects {}",
            b.channels(input),
            spec.c
        )));
    }
    let mut x = input;
    for i in 0..spec.repeats {
        let stride = if i == 0 { spec.s } else { 1 };
        let p = format!("{name}.{i}");
        let e = b.conv_bn(&format!("{p}.expand"), x, 1, spec.expanded(i), 1, true)?;
        let d = b.depthwise(&format!("{p}.dw"), e, 3, stride, 1)?;
        let d = b.batch_norm(&format!("{p}.dw.bn"), d)?;
        let d = b.relu6(&format!("{p}.dw.act"), d)?;
        let proj = b.conv_bn(&format!("{p}.project"), d, 1, spec.c_prime, 1, false)?;
        x = if spec.has_residual(i) { b.push(&format!("{p}.add"), Op::Add, &[proj, x])? } else { proj };
    }
    Ok(x)
}

/// Deep branch on the already downsampled input: a strided 3×3 stem,
/// twelve bottleneck blocks and a 1×1 output convolution.
pub fn build_context_branch<T: Real>(b: &mut GraphBuilder<T>, compressed: NodeId, cfg: &ContextNetConfig) -> Result<NodeId> {
    cfg.validate()?;
    let mut x = b.conv_bn("context.stem", compressed, 3, cfg.width(STEM_WIDTH), 2, true)?;
    for (k, &(t, c, n, s)) in CONTEXT_STAGES.iter().enumerate() {
        let spec = BottleneckSpec::new(b.channels(x), cfg.width(c), t, s, n);
        x = build_bottleneck(b, x, &spec, &format!("context.stage{}", k + 1))?;
    }
    b.conv_bn("context.head", x, 1, cfg.width(FEATURE_WIDTH), 1, true)
}

/// Shallow full-resolution branch: a strided 3×3 stem then three
/// depthwise-separable layers with no nonlinearity between depthwise and
/// pointwise parts.
pub fn build_detail_branch<T: Real>(b: &mut GraphBuilder<T>, image: NodeId, cfg: &ContextNetConfig) -> Result<NodeId> {
    cfg.validate()?;
    let mut x = b.conv_bn("detail.stem", image, 3, cfg.width(DETAIL_WIDTHS[0]), DETAIL_STRIDES[0], true)?;
    for k in 1..DETAIL_WIDTHS.len() {
        let p = format!("detail.sep{k}");
        let d = b.depthwise(&format!("{p}.dw"), x, 3, DETAIL_STRIDES[k], 1)?;
        let d = b.batch_norm(&format!("{p}.dw.bn"), d)?;
        x = b.conv_bn(&format!("{p}.pw"), d, 1, cfg.width(DETAIL_WIDTHS[k]), 1, true)?;
    }
    Ok(x)
}

/// Merges the branches: the context path is upsampled by the downsample
/// factor, passed through a dilation-4 depthwise 3×3 (BN, ReLU6) and a
/// linear 1×1; the detail path through a linear 1×1; the sum goes through
/// ReLU6.
pub fn build_fusion_unit<T: Real>(
    b: &mut GraphBuilder<T>,
    context: NodeId,
    detail: NodeId,
    cfg: &ContextNetConfig,
) -> Result<NodeId> {
    let factor = cfg.context_downsample;
    let [_, ch, cw, _] = b.dims(context);
    let [_, dh, dw, _] = b.dims(detail);
    if ch * factor != dh || cw * factor != dw {
        return Err(Error::dim(
            "fusion",
            format!("context {ch}x{cw} upsampled x{factor} does not match detail {dh}x{dw}"),
        ));
    }
    let width = cfg.width(FEATURE_WIDTH);
    let up = b.push("fusion.upsample", Op::Upsample { factor }, &[context])?;
    let d = b.depthwise("fusion.dw", up, 3, 1, 4)?;
    let d = b.batch_norm("fusion.dw.bn", d)?;
    let d = b.relu6("fusion.dw.act", d)?;
    let c = b.conv_bn("fusion.context_proj", d, 1, width, 1, false)?;
    let t = b.conv_bn("fusion.detail_proj", detail, 1, width, 1, false)?;
    let sum = b.push("fusion.add", Op::Add, &[c, t])?;
    b.relu6("fusion.act", sum)
}

/// Dropout and a 1×1 classifier; marks the logits and their ×8 bilinear
/// upsampling to input resolution.
pub fn build_classifier<T: Real>(b: &mut GraphBuilder<T>, fused: NodeId, cfg: &ContextNetConfig) -> Result<NodeId> {
    let d = b.push("classifier.dropout", Op::Dropout { rate: cfg.dropout_rate }, &[fused])?;
    let logits = b.conv("classifier.conv", d, 1, cfg.num_classes, 1, true)?;
    b.mark(Mark::Logits, logits);
    let full = b.push("classifier.upsample", Op::Upsample { factor: OUTPUT_STRIDE }, &[logits])?;
    b.mark(Mark::FullLogits, full);
    Ok(full)
}

/// Training-only 1×1 classifier on the context-branch features.
pub fn build_aux_head<T: Real>(b: &mut GraphBuilder<T>, context: NodeId, cfg: &ContextNetConfig) -> Result<NodeId> {
    let aux = b.conv("aux.conv", context, 1, cfg.num_classes, 1, true)?;
    b.mark(Mark::AuxLogits, aux);
    Ok(aux)
}

/// Pyramid pooling: bins {1, 2, 3, 6}, each reduced to a quarter of the
/// feature width, resized back and concatenated with the input, then fused
/// back to the feature width.
pub fn build_pyramid_pooling<T: Real>(b: &mut GraphBuilder<T>, x: NodeId, cfg: &ContextNetConfig) -> Result<NodeId> {
    let width = cfg.width(FEATURE_WIDTH);
    let reduced = (width / 4).max(8);
    let mut parts = Vec::from([x]);
    for bins in PPM_BINS {
        let p = format!("ppm.bins{bins}");
        let pooled = b.push(&format!("{p}.pool"), Op::PoolToBins { bins }, &[x])?;
        let r = b.conv_bn(&format!("{p}.reduce"), pooled, 1, reduced, 1, true)?;
        parts.push(b.push(&format!("{p}.resize"), Op::ResizeLike, &[r, x])?);
    }
    let cat = b.push("ppm.concat", Op::Concat, &parts)?;
    b.conv_bn("ppm.fuse", cat, 1, width, 1, true)
}

/// Whole two-branch network for a `(1, h, w, 3)` image input.
pub fn build_contextnet<T: Real>(cfg: &ContextNetConfig, seed: u64) -> Result<Graph<T>> {
    cfg.validate()?;
    let (h, w) = cfg.input_size;
    let mut b = GraphBuilder::<T>::new(seed);
    let image = b.input("image", h, w, 3)?;
    let pooled = b.push("context.pool", Op::AvgPool { factor: cfg.context_downsample }, &[image])?;
    let context = build_context_branch(&mut b, pooled, cfg)?;
    build_aux_head(&mut b, context, cfg)?;
    let context = if cfg.use_ppm { build_pyramid_pooling(&mut b, context, cfg)? } else { context };
    b.mark(Mark::ContextOut, context);
    let detail = build_detail_branch(&mut b, image, cfg)?;
    b.mark(Mark::DetailOut, detail);
    let fused = build_fusion_unit(&mut b, context, detail, cfg)?;
    build_classifier(&mut b, fused, cfg)?;
    b.finish()
}

/// Standalone bottleneck stack on an `h × w × c` input, marked `Output`.
pub fn bottleneck_graph<T: Real>(spec: &BottleneckSpec, height: usize, width: usize, seed: u64) -> Result<Graph<T>> {
    let mut b = GraphBuilder::new(seed);
    let x = b.input("x", height, width, spec.c)?;
    let y = build_bottleneck(&mut b, x, spec, "block")?;
    b.mark(Mark::Output, y);
    b.finish()
}

/// Standalone fusion unit with inputs `(context, detail)`.
pub fn fusion_graph<T: Real>(
    cfg: &ContextNetConfig,
    context_hw: (usize, usize),
    channels: usize,
    seed: u64,
) -> Result<Graph<T>> {
    let f = cfg.context_downsample;
    let mut b = GraphBuilder::new(seed);
    let c = b.input("context", context_hw.0, context_hw.1, channels)?;
    let d = b.input("detail", context_hw.0 * f, context_hw.1 * f, channels)?;
    let y = build_fusion_unit(&mut b, c, d, cfg)?;
    b.mark(Mark::Output, y);
    b.finish()
}

/// Standalone context branch on a `height × width` input that has
/// already been downsampled.
pub fn context_branch_graph<T: Real>(cfg: &ContextNetConfig, height: usize, width: usize, seed: u64) -> Result<Graph<T>> {
    let mut b = GraphBuilder::new(seed);
    let x = b.input("compressed", height, width, 3)?;
    let y = build_context_branch(&mut b, x, cfg)?;
    b.mark(Mark::Output, y);
    b.finish()
}

pub fn detail_branch_graph<T: Real>(cfg: &ContextNetConfig, seed: u64) -> Result<Graph<T>> {
    let mut b = GraphBuilder::new(seed);
    let image = b.input("image", cfg.input_size.0, cfg.input_size.1, 3)?;
    let y = build_detail_branch(&mut b, image, cfg)?;
    b.mark(Mark::Output, y);
    b.finish()
}

/// Output widths of every standard/pointwise convolution, by node name.
pub fn conv_widths<T: Real>(graph: &Graph<T>) -> Vec<(String, usize)> {
    graph
        .nodes()
        .iter()
        .filter_map(|n| match &n.op {
            Op::Conv(p) => Some((n.name.clone(), p.kernel.dims()[3])),
            Op::DepthwiseConv(p) => Some((n.name.clone(), p.kernel.dims()[2])),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{count_params, ForwardOptions};

    #[test]
    fn width_rounding() {
        assert_eq!(scaled_width(32, 1.0), 32);
        assert_eq!(scaled_width(48, 1.25), 64);
        assert_eq!(scaled_width(32, 1.25), 40);
        assert_eq!(scaled_width(48, 1.5), 72);
        assert_eq!(scaled_width(128, 2.0), 256);
        assert_eq!(scaled_width(32, 0.1), 8);
    }

    #[test]
    fn bottleneck_widths_and_residuals() {
        let g: Graph = bottleneck_graph(&BottleneckSpec::new(32, 32, 1, 1, 1), 8, 8, 0).unwrap();
        assert_eq!(g.channels(g.find("block.0.expand").unwrap()).unwrap(), 32);
        assert!(g.find("block.0.add").is_some());

        let g: Graph = bottleneck_graph(&BottleneckSpec::new(32, 32, 6, 1, 1), 8, 8, 0).unwrap();
        assert_eq!(g.channels(g.find("block.0.expand").unwrap()).unwrap(), 192);
        assert_eq!(count_params(&g) - 2 * (192 + 192 + 32), 32 * 192 + 9 * 192 + 192 * 32);

        let g: Graph = bottleneck_graph(&BottleneckSpec::new(32, 48, 6, 2, 3), 8, 8, 0).unwrap();
        assert!(g.find("block.0.add").is_none());
        assert!(g.find("block.1.add").is_some() && g.find("block.2.add").is_some());
        assert_eq!(g.shapes().unwrap()[g.mark(Mark::Output).unwrap()], [1, 4, 4, 48]);

        assert!(bottleneck_graph::<f32>(&BottleneckSpec::new(32, 32, 6, 3, 1), 8, 8, 0).is_err());
        assert!(bottleneck_graph::<f32>(&BottleneckSpec::new(32, 32, 0, 1, 1), 8, 8, 0).is_err());
    }

    #[test]
    fn zero_weight_block_is_residual_passthrough() {
        let mut g: Graph = bottleneck_graph(&BottleneckSpec::new(8, 8, 1, 1, 1), 5, 5, 3).unwrap();
        for id in 0..g.len() {
            if let Op::Conv(p) | Op::DepthwiseConv(p) = &mut g.node_mut(id).op {
                p.kernel.data_mut().iter_mut().for_each(|w| *w = 0.0);
            }
        }
        let mut rng = crate::seeded_rng(1);
        let x = Tensor::<f32>::random_normal([2, 5, 5, 8], 1.0, &mut rng);
        let out = g.mark(Mark::Output).unwrap();
        for opts in [ForwardOptions::inference(), ForwardOptions::training()] {
            assert_eq!(g.run(&x, &opts, out, &mut rng).unwrap(), x);
        }
    }

    #[test]
    fn config_validation() {
        assert!(ContextNetConfig::cn14(19, 256, 512).validate().is_ok());
        assert!(ContextNetConfig::cn14(19, 100, 512).validate().is_err());
        assert!(ContextNetConfig { context_downsample: 3, ..ContextNetConfig::cn14(4, 96, 96) }.validate().is_err());
        assert!(ContextNetConfig::cn14(4, 128, 256).with_width(0.0).validate().is_err());
        assert!(build_contextnet::<f32>(&ContextNetConfig::cn18(4, 64, 128), 0).is_ok());
    }

    #[test]
    fn fusion_rejects_misaligned_branches() {
        let cfg = ContextNetConfig::cn14(4, 128, 256);
        let mut b = GraphBuilder::<f32>::new(0);
        let c = b.input("c", 4, 8, 128).unwrap();
        let d = b.input("d", 8, 16, 128).unwrap();
        assert!(build_fusion_unit(&mut b, c, d, &cfg).is_err());
    }

    #[test]
    fn ppm_adds_one_subgraph() {
        let base = ContextNetConfig::cn14(19, 1024, 2048);
        let without: Graph = build_contextnet(&base, 0).unwrap();
        let with: Graph = build_contextnet(&ContextNetConfig { use_ppm: true, ..base }, 0).unwrap();
        let extra: Vec<&str> = with
            .nodes()
            .iter()
            .map(|n| n.name.as_str())
            .filter(|n| without.find(n).is_none())
            .collect();
        assert!(!extra.is_empty());
        assert!(extra.iter().all(|n| n.starts_with("ppm.")));
        assert_eq!(with.len() - without.len(), extra.len());
        assert!(with.shapes().is_ok());
    }
}
