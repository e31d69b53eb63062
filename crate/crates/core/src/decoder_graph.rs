//! Compilation of decoder configurations into executable node lists.
//!
//! Node ids are a topological order: every node only reads lower ids, FPN
//! nodes come before head nodes, and head nodes are replicated once per
//! pyramid level. Weight sharing is expressed purely through parameter
//! names: a shared head layer uses the same name at all five levels.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nfcs_tensor::{Conv2dOptions, ParamStore, ParamVars, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search_space::{
    self, AggregationKind, DecoderConfig, FpnConfig, HeadConfig, OperationKind, HEAD_LAYERS, NUM_BLOCKS,
    NUM_INPUTS,
};

pub const PYRAMID_LEVELS: usize = 5;
pub const PYRAMID_STRIDES: [usize; PYRAMID_LEVELS] = [8, 16, 32, 64, 128];
pub const INPUT_STRIDES: [usize; NUM_INPUTS] = [8, 16, 32];
/// Prior probability used to initialise the classification bias.
const CLS_PRIOR: f64 = 0.01;
const BN_MOMENTUM: f64 = 0.1;
/// Regression logits are clamped before `exp` so a diverging candidate
/// produces large but finite boxes.
const REG_LOGIT_MAX: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub stride: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureSpec {
    pub fn with_channels(self, channels: usize) -> Self {
        Self { channels, ..self }
    }

    pub fn elements(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Specs of c3, c4, c5 for an image of `h x w` and the given channels.
    pub fn inputs_for(h: usize, w: usize, channels: [usize; NUM_INPUTS]) -> [FeatureSpec; NUM_INPUTS] {
        std::array::from_fn(|i| FeatureSpec {
            stride: INPUT_STRIDES[i],
            channels: channels[i],
            height: h.div_ceil(INPUT_STRIDES[i]),
            width: w.div_ceil(INPUT_STRIDES[i]),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormKind {
    Batch,
    Group,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderOptions {
    pub fpn_width: usize,
    pub head_width: usize,
    pub num_classes: usize,
    pub fpn_norm: NormKind,
    /// Group count for every group norm.
    pub groups: usize,
}

impl DecoderOptions {
    pub fn new(fpn_width: usize, head_width: usize, num_classes: usize) -> Self {
        Self {
            fpn_width,
            head_width,
            num_classes,
            fpn_norm: NormKind::Batch,
            groups: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeOp {
    Input { index: usize },
    Conv {
        param: String,
        kernel: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
    },
    /// Deformable 3x3 conv; input 0 is the feature, input 1 the offsets.
    DeformConv { param: String },
    Norm { param: String, kind: NormKind, groups: usize },
    Relu,
    Resize,
    Add,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Section {
    Fpn,
    /// Head node replicated for pyramid level index `0..5` (p3..p7).
    Head(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub op: NodeOp,
    pub inputs: Vec<usize>,
    pub spec: FeatureSpec,
    pub section: Section,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Uniform(f64),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Parameters with the same group start from identical values.
    pub init_group: String,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadOutputs {
    pub stride: usize,
    pub cls: usize,
    pub reg: usize,
    pub ctr: usize,
}

/// A dangling block output added onto p3, p4 and p5.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalMerge {
    /// 1-based block number.
    pub block: usize,
    pub source: usize,
    pub targets: [usize; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FpnKind {
    Searched(FpnConfig),
    /// Top-down FPN with lateral 1x1 and output 3x3 convs.
    Original,
    /// Original FPN with its 3x3 output convs made deformable.
    Deformable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    Searched(HeadConfig),
    /// Two shared 4-layer conv3x3 towers with 3x3 projections.
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderGraph {
    pub fpn: FpnKind,
    pub head: HeadKind,
    pub options: DecoderOptions,
    pub nodes: Vec<Node>,
    pub inputs: [usize; NUM_INPUTS],
    /// Output node of each block, FPN searched graphs only.
    pub block_outputs: Vec<usize>,
    pub pyramid: [usize; PYRAMID_LEVELS],
    pub global_merges: Vec<GlobalMerge>,
    /// Per head layer: `true` when shared across levels.
    pub head_partition: Vec<bool>,
    pub head_start: usize,
    pub outputs: Vec<HeadOutputs>,
    pub params: Vec<ParamSpec>,
    /// Batch-norm running statistics (not learnable).
    pub buffers: Vec<ParamSpec>,
}

struct Builder {
    nodes: Vec<Node>,
    params: Vec<ParamSpec>,
    buffers: Vec<ParamSpec>,
    names: BTreeSet<String>,
    section: Section,
    opts: DecoderOptions,
}

impl Builder {
    fn new(opts: DecoderOptions) -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            buffers: Vec::new(),
            names: BTreeSet::new(),
            section: Section::Fpn,
            opts,
        }
    }

    fn spec(&self, id: usize) -> FeatureSpec {
        self.nodes[id].spec
    }

    fn push(&mut self, op: NodeOp, inputs: Vec<usize>, spec: FeatureSpec, label: impl Into<String>) -> usize {
        self.nodes.push(Node {
            op,
            inputs,
            spec,
            section: self.section,
            label: label.into(),
        });
        self.nodes.len() - 1
    }

    fn param(&mut self, name: String, shape: Vec<usize>, init: Init, group: &str) {
        if self.names.insert(name.clone()) {
            self.params.push(ParamSpec {
                name,
                shape,
                init,
                init_group: group.to_owned(),
            });
        }
    }

    fn buffer(&mut self, name: String, shape: Vec<usize>, init: Init) {
        if self.names.insert(name.clone()) {
            self.buffers.push(ParamSpec {
                init_group: name.clone(),
                name,
                shape,
                init,
            });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        x: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        depthwise: bool,
        key: &str,
        group: &str,
        w_init: Init,
        b_init: Init,
    ) -> usize {
        let s = self.spec(x);
        let groups = if depthwise { s.channels } else { 1 };
        let cout = if depthwise { s.channels } else { cout };
        self.param(format!("{key}.w"), vec![cout, s.channels / groups, kernel, kernel], w_init, &format!("{group}.w"));
        self.param(format!("{key}.b"), vec![cout], b_init, &format!("{group}.b"));
        let spec = FeatureSpec {
            stride: s.stride * stride,
            channels: cout,
            height: s.height.div_ceil(stride),
            width: s.width.div_ceil(stride),
        };
        self.push(
            NodeOp::Conv {
                param: key.to_owned(),
                kernel,
                stride,
                dilation,
                groups,
            },
            vec![x],
            spec,
            format!("{key} conv{kernel}x{kernel}"),
        )
    }

    fn he(fan_in: usize) -> Init {
        Init::Uniform((6.0 / fan_in as f64).sqrt())
    }

    fn plain_conv(&mut self, x: usize, cout: usize, kernel: usize, stride: usize, key: &str, group: &str) -> usize {
        let fan_in = self.spec(x).channels * kernel * kernel;
        self.conv(x, cout, kernel, stride, 1, false, key, group, Self::he(fan_in), Init::Const(0.0))
    }

    fn deform(&mut self, x: usize, cout: usize, key: &str, group: &str) -> usize {
        let s = self.spec(x);
        let off_key = format!("{key}.offset");
        let off = self.conv(
            x,
            18,
            3,
            1,
            1,
            false,
            &off_key,
            &format!("{group}.offset"),
            Init::Const(0.0),
            Init::Const(0.0),
        );
        self.param(format!("{key}.w"), vec![cout, s.channels, 3, 3], Self::he(s.channels * 9), &format!("{group}.w"));
        self.param(format!("{key}.b"), vec![cout], Init::Const(0.0), &format!("{group}.b"));
        self.push(
            NodeOp::DeformConv { param: key.to_owned() },
            vec![x, off],
            s.with_channels(cout),
            format!("{key} dconv3x3"),
        )
    }

    fn norm(&mut self, x: usize, kind: NormKind, key: &str, group: &str) -> usize {
        let s = self.spec(x);
        let c = s.channels;
        let nkey = format!("{key}.norm");
        self.param(format!("{nkey}.g"), vec![c], Init::Const(1.0), &format!("{group}.norm.g"));
        self.param(format!("{nkey}.b"), vec![c], Init::Const(0.0), &format!("{group}.norm.b"));
        if kind == NormKind::Batch {
            self.buffer(format!("{nkey}.mean"), vec![c], Init::Const(0.0));
            self.buffer(format!("{nkey}.var"), vec![c], Init::Const(1.0));
        }
        let groups = match kind {
            NormKind::Group => self.opts.groups,
            NormKind::Batch => 1,
        };
        let label = match kind {
            NormKind::Group => "gn",
            NormKind::Batch => "bn",
        };
        self.push(
            NodeOp::Norm {
                param: nkey.clone(),
                kind,
                groups,
            },
            vec![x],
            s,
            format!("{nkey} {label}"),
        )
    }

    fn relu(&mut self, x: usize) -> usize {
        let s = self.spec(x);
        self.push(NodeOp::Relu, vec![x], s, "relu")
    }

    fn norm_relu(&mut self, x: usize, kind: NormKind, key: &str, group: &str) -> usize {
        let n = self.norm(x, kind, key, group);
        self.relu(n)
    }

    /// One searchable operation followed (unless Skip) by norm and ReLU.
    fn unit(&mut self, op: OperationKind, x: usize, width: usize, norm: NormKind, key: &str, group: &str) -> usize {
        use OperationKind::*;
        let cin = self.spec(x).channels;
        let body = match op {
            Skip => return x,
            SepConv3x3 | SepConv3x3Dil3 | SepConv5x5Dil6 => {
                let (k, d) = match op {
                    SepConv3x3 => (3, 1),
                    SepConv3x3Dil3 => (3, 3),
                    _ => (5, 6),
                };
                let dw = self.conv(
                    x,
                    cin,
                    k,
                    1,
                    d,
                    true,
                    &format!("{key}.dw"),
                    &format!("{group}.dw"),
                    Self::he(k * k),
                    Init::Const(0.0),
                );
                self.plain_conv(dw, width, 1, 1, &format!("{key}.pw"), &format!("{group}.pw"))
            }
            DeformConv3x3 => self.deform(x, width, key, group),
            Conv1x1 => self.plain_conv(x, width, 1, 1, key, group),
            Conv3x3 => self.plain_conv(x, width, 3, 1, key, group),
        };
        self.norm_relu(body, norm, key, group)
    }

    fn resize_to(&mut self, x: usize, target: FeatureSpec) -> usize {
        let s = self.spec(x);
        if s.height == target.height && s.width == target.width {
            return x;
        }
        let spec = FeatureSpec {
            stride: target.stride,
            channels: s.channels,
            height: target.height,
            width: target.width,
        };
        self.push(NodeOp::Resize, vec![x], spec, format!("resize s{}->s{}", s.stride, target.stride))
    }

    fn add(&mut self, inputs: Vec<usize>, label: impl Into<String>) -> usize {
        let s = self.spec(inputs[0]);
        self.push(NodeOp::Add, inputs, s, label)
    }
}

fn validate_inputs(inputs: &[FeatureSpec; NUM_INPUTS], opts: &DecoderOptions) -> Result<()> {
    for (spec, &stride) in inputs.iter().zip(&INPUT_STRIDES) {
        if spec.stride != stride {
            return Err(Error::InvalidConfig(format!(
                "backbone feature has stride {}, expected {stride}",
                spec.stride
            )));
        }
        if spec.channels == 0 || spec.height == 0 || spec.width == 0 {
            return Err(Error::InvalidConfig(format!("zero-sized backbone feature {spec:?}")));
        }
    }
    if opts.fpn_width == 0 || opts.head_width == 0 || opts.num_classes == 0 {
        return Err(Error::InvalidConfig("widths and class count must be positive".into()));
    }
    let gn_widths = [Some(opts.head_width), (opts.fpn_norm == NormKind::Group).then_some(opts.fpn_width)];
    for w in gn_widths.into_iter().flatten() {
        if opts.groups == 0 || w % opts.groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "width {w} is not divisible into {} norm groups",
                opts.groups
            )));
        }
    }
    Ok(())
}

pub fn compile(config: &DecoderConfig, inputs: [FeatureSpec; NUM_INPUTS], opts: DecoderOptions) -> Result<DecoderGraph> {
    search_space::validate(config)?;
    compile_parts(FpnKind::Searched(config.fpn), HeadKind::Searched(config.head), inputs, opts)
}

/// The FCOS baseline: original FPN plus the original two-tower head.
pub fn original_fcos_decoder(inputs: [FeatureSpec; NUM_INPUTS], opts: DecoderOptions) -> Result<DecoderGraph> {
    compile_parts(FpnKind::Original, HeadKind::Original, inputs, opts)
}

pub fn compile_parts(
    fpn: FpnKind,
    head: HeadKind,
    inputs: [FeatureSpec; NUM_INPUTS],
    opts: DecoderOptions,
) -> Result<DecoderGraph> {
    validate_inputs(&inputs, &opts)?;
    if let FpnKind::Searched(f) = &fpn {
        for (i, blk) in f.blocks.iter().enumerate() {
            let pool = search_space::pool_size(i + 1);
            if blk.id1 >= pool || blk.id2 >= pool || !blk.op1.fpn_valid() || !blk.op2.fpn_valid() {
                return Err(Error::InvalidConfig(format!("block {} is malformed: {blk}", i + 1)));
            }
        }
    }
    if let HeadKind::Searched(h) = &head {
        if h.share_from > HEAD_LAYERS {
            return Err(Error::InvalidConfig(format!("share_from={} exceeds 6", h.share_from)));
        }
    }
    let mut b = Builder::new(opts);
    let input_ids: [usize; NUM_INPUTS] =
        std::array::from_fn(|i| b.push(NodeOp::Input { index: i }, vec![], inputs[i], format!("c{}", i + 3)));
    let canonical: [FeatureSpec; NUM_INPUTS] = std::array::from_fn(|i| inputs[i].with_channels(opts.fpn_width));

    let (p345, block_outputs, global_merges) = match &fpn {
        FpnKind::Searched(cfg) => build_searched_fpn(&mut b, cfg, input_ids, &canonical),
        FpnKind::Original => (build_original_fpn(&mut b, input_ids, false), Vec::new(), Vec::new()),
        FpnKind::Deformable => (build_original_fpn(&mut b, input_ids, true), Vec::new(), Vec::new()),
    };
    let p6 = b.plain_conv(p345[2], opts.fpn_width, 3, 2, "fpn.p6", "fpn.p6");
    let p6r = b.relu(p6);
    let p7 = b.plain_conv(p6r, opts.fpn_width, 3, 2, "fpn.p7", "fpn.p7");
    let pyramid = [p345[0], p345[1], p345[2], p6, p7];

    let head_start = b.nodes.len();
    let mut outputs = Vec::with_capacity(PYRAMID_LEVELS);
    let head_partition = match &head {
        HeadKind::Searched(h) => h.ops.iter().enumerate().map(|(j, _)| h.layer_shared(j)).collect(),
        HeadKind::Original => vec![true; 8],
    };
    for (lvl, &p) in pyramid.iter().enumerate() {
        b.section = Section::Head(lvl);
        let outs = match &head {
            HeadKind::Searched(h) => build_searched_head(&mut b, h, p, lvl),
            HeadKind::Original => build_original_head(&mut b, p),
        };
        outputs.push(outs);
    }
    Ok(DecoderGraph {
        fpn,
        head,
        options: opts,
        nodes: b.nodes,
        inputs: input_ids,
        block_outputs,
        pyramid,
        global_merges,
        head_partition,
        head_start,
        outputs,
        params: b.params,
        buffers: b.buffers,
    })
}

fn build_searched_fpn(
    b: &mut Builder,
    cfg: &FpnConfig,
    inputs: [usize; NUM_INPUTS],
    canonical: &[FeatureSpec; NUM_INPUTS],
) -> ([usize; 3], Vec<usize>, Vec<GlobalMerge>) {
    let w = b.opts.fpn_width;
    let norm = b.opts.fpn_norm;
    let mut pool: Vec<usize> = inputs
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let key = format!("fpn.lat{}", i + 3);
            b.plain_conv(c, w, 1, 1, &key, &key)
        })
        .collect();
    for (i, blk) in cfg.blocks.iter().enumerate() {
        let t = i + 1;
        let k1 = format!("fpn.b{t}.op1");
        let k2 = format!("fpn.b{t}.op2");
        let mut y1 = b.unit(blk.op1, pool[blk.id1], w, norm, &k1, &k1);
        let mut y2 = b.unit(blk.op2, pool[blk.id2], w, norm, &k2, &k2);
        let (s1, s2) = (b.spec(y1), b.spec(y2));
        if s1.stride > s2.stride {
            y1 = b.resize_to(y1, s2);
        } else if s2.stride > s1.stride {
            y2 = b.resize_to(y2, s1);
        }
        let out = match blk.agg {
            AggregationKind::Sum => b.add(vec![y1, y2], format!("bb{t} sum")),
            AggregationKind::ConcatProj => {
                let s = b.spec(y1);
                let cat = b.push(NodeOp::Concat, vec![y1, y2], s.with_channels(2 * w), format!("bb{t} concat"));
                let key = format!("fpn.b{t}.proj");
                let proj = b.plain_conv(cat, w, 1, 1, &key, &key);
                b.norm_relu(proj, norm, &key, &key)
            }
        };
        pool.push(out);
    }
    let block_outputs: Vec<usize> = pool[NUM_INPUTS..].to_vec();
    let mut p: [usize; 3] = std::array::from_fn(|i| b.resize_to(block_outputs[NUM_BLOCKS - 3 + i], canonical[i]));

    let dangling = dangling_blocks(cfg);
    let mut global_merges = Vec::new();
    if !dangling.is_empty() {
        let mut targets = [0usize; 3];
        let mut resized: Vec<Vec<usize>> = vec![Vec::new(); 3];
        for &t in &dangling {
            for (i, r) in resized.iter_mut().enumerate() {
                let x = b.resize_to(block_outputs[t - 1], canonical[i]);
                r.push(x);
            }
        }
        for i in 0..3 {
            let mut ins = vec![p[i]];
            ins.extend(&resized[i]);
            targets[i] = b.add(ins, format!("p{} global merge", i + 3));
            p[i] = targets[i];
        }
        for &t in &dangling {
            global_merges.push(GlobalMerge {
                block: t,
                source: block_outputs[t - 1],
                targets,
            });
        }
    }
    (p, block_outputs, global_merges)
}

/// 1-based blocks among 1..=4 whose output no later block consumes.
pub fn dangling_blocks(cfg: &FpnConfig) -> Vec<usize> {
    (1..=NUM_BLOCKS - 3)
        .filter(|&t| {
            let idx = NUM_INPUTS + t - 1;
            !cfg.blocks[t..].iter().any(|b| b.id1 == idx || b.id2 == idx)
        })
        .collect()
}

fn build_original_fpn(b: &mut Builder, inputs: [usize; NUM_INPUTS], deformable: bool) -> [usize; 3] {
    let w = b.opts.fpn_width;
    let lat: Vec<usize> = inputs
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let key = format!("fpn.lat{}", i + 3);
            b.plain_conv(c, w, 1, 1, &key, &key)
        })
        .collect();
    let mut merged = [0usize; 3];
    merged[2] = lat[2];
    for i in (0..2).rev() {
        let target = b.spec(lat[i]);
        let up = b.resize_to(merged[i + 1], target);
        merged[i] = b.add(vec![lat[i], up], format!("top-down p{}", i + 3));
    }
    std::array::from_fn(|i| {
        let key = format!("fpn.out{}", i + 3);
        if deformable {
            b.deform(merged[i], w, &key, &key)
        } else {
            b.plain_conv(merged[i], w, 3, 1, &key, &key)
        }
    })
}

fn head_input(b: &mut Builder, p: usize) -> usize {
    if b.spec(p).channels == b.opts.head_width {
        p
    } else {
        let w = b.opts.head_width;
        b.plain_conv(p, w, 1, 1, "head.adapt", "head.adapt")
    }
}

fn projections(b: &mut Builder, cls_x: usize, reg_x: usize, ctr_x: usize, kernel: usize) -> HeadOutputs {
    let k = b.opts.num_classes;
    let proj = Init::Uniform(0.01 * 3f64.sqrt());
    let prior = Init::Const(-((1.0 - CLS_PRIOR) / CLS_PRIOR).ln());
    let cls = b.conv(cls_x, k, kernel, 1, 1, false, "head.cls", "head.cls", proj, prior);
    let reg = b.conv(reg_x, 4, kernel, 1, 1, false, "head.reg", "head.reg", proj, Init::Const(0.0));
    let ctr = b.conv(ctr_x, 1, kernel, 1, 1, false, "head.ctr", "head.ctr", proj, Init::Const(0.0));
    HeadOutputs {
        stride: b.spec(cls_x).stride,
        cls,
        reg,
        ctr,
    }
}

fn build_searched_head(b: &mut Builder, h: &HeadConfig, p: usize, lvl: usize) -> HeadOutputs {
    let mut x = head_input(b, p);
    let w = b.opts.head_width;
    for (j, &op) in h.ops.iter().enumerate() {
        let group = format!("head.l{j}");
        let key = if h.layer_shared(j) {
            group.clone()
        } else {
            format!("head.l{j}.lvl{}", lvl + 3)
        };
        x = b.unit(op, x, w, NormKind::Group, &key, &group);
    }
    projections(b, x, x, x, 1)
}

fn build_original_head(b: &mut Builder, p: usize) -> HeadOutputs {
    let x = head_input(b, p);
    let w = b.opts.head_width;
    let mut towers = [x, x];
    for (t, name) in ["cls", "reg"].iter().enumerate() {
        for j in 0..4 {
            let key = format!("head.{name}_tower.{j}");
            towers[t] = b.unit(OperationKind::Conv3x3, towers[t], w, NormKind::Group, &key, &key);
        }
    }
    projections(b, towers[0], towers[1], towers[0], 3)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-level predictions. `reg` already holds positive distances in pixels.
#[derive(Clone, Copy)]
pub struct LevelOutput<'g, T: Scalar> {
    pub stride: usize,
    pub cls: Var<'g, T>,
    pub reg: Var<'g, T>,
    pub ctr: Var<'g, T>,
}

/// Batch statistics observed by one batch-norm node in training mode.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub param: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl DecoderGraph {
    pub fn num_classes(&self) -> usize {
        self.options.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(ParamSpec::numel).sum()
    }

    /// Parameter names used by head layer `layer` (searched heads only).
    pub fn head_layer_params(&self, layer: usize) -> BTreeSet<String> {
        let prefix = format!("head.l{layer}.");
        let exact = format!("head.l{layer}");
        self.params
            .iter()
            .filter(|p| p.name.starts_with(&prefix) || p.name == exact)
            .map(|p| p.name.clone())
            .collect()
    }

    /// Fresh parameters and batch-norm buffers.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> (ParamStore<T>, ParamStore<T>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut drawn: std::collections::HashMap<&str, Tensor<T>> = Default::default();
        let mut params = ParamStore::new();
        for p in &self.params {
            let t = drawn
                .entry(p.init_group.as_str())
                .or_insert_with(|| draw(&mut rng, &p.shape, p.init))
                .clone();
            params.insert(p.name.clone(), t);
        }
        let mut buffers = ParamStore::new();
        for p in &self.buffers {
            buffers.insert(p.name.clone(), draw(&mut rng, &p.shape, p.init));
        }
        (params, buffers)
    }

    fn check_input<T: Scalar>(&self, i: usize, x: &Var<'_, T>) -> Result<()> {
        let s = self.nodes[self.inputs[i]].spec;
        let shape = x.shape();
        if shape.len() != 4 || shape[1..] != [s.channels, s.height, s.width] {
            return Err(Error::Tensor(nfcs_tensor::TensorError::ShapeMismatch {
                op: "decoder input",
                expected: format!("[N, {}, {}, {}]", s.channels, s.height, s.width),
                got: format!("{shape:?}"),
            }));
        }
        Ok(())
    }

    fn eval_range<'g, T: Scalar>(
        &self,
        range: std::ops::Range<usize>,
        memo: &mut [Option<Var<'g, T>>],
        params: &ParamVars<'g, T>,
        buffers: &ParamStore<T>,
        mode: Mode,
        stats: &mut Vec<BnStats<T>>,
    ) -> Result<()> {
        for id in range {
            if memo[id].is_some() {
                continue;
            }
            let node = &self.nodes[id];
            let arg = |k: usize| -> Result<Var<'g, T>> {
                memo[node.inputs[k]]
                    .ok_or_else(|| Error::InvalidConfig(format!("node {id} reads unevaluated node {}", node.inputs[k])))
            };
            let out = match &node.op {
                NodeOp::Input { index } => {
                    return Err(Error::InvalidConfig(format!("input c{} was not supplied", index + 3)));
                }
                NodeOp::Conv {
                    param,
                    stride,
                    dilation,
                    groups,
                    ..
                } => {
                    let w = params.get(&format!("{param}.w"))?;
                    let b = params.get(&format!("{param}.b"))?;
                    let opts = Conv2dOptions {
                        stride: *stride,
                        dilation: *dilation,
                        groups: *groups,
                    };
                    arg(0)?.conv2d(w, Some(b), opts)?
                }
                NodeOp::DeformConv { param } => {
                    let w = params.get(&format!("{param}.w"))?;
                    let b = params.get(&format!("{param}.b"))?;
                    arg(0)?.deform_conv2d(arg(1)?, w, Some(b))?
                }
                NodeOp::Norm { param, kind, groups } => {
                    let g = params.get(&format!("{param}.g"))?;
                    let b = params.get(&format!("{param}.b"))?;
                    match (kind, mode) {
                        (NormKind::Group, _) => arg(0)?.group_norm(g, b, *groups)?,
                        (NormKind::Batch, Mode::Train) => {
                            let (y, s) = arg(0)?.batch_norm_train(g, b)?;
                            stats.push(BnStats {
                                param: param.clone(),
                                mean: s.mean,
                                var: s.var,
                            });
                            y
                        }
                        (NormKind::Batch, Mode::Eval) => {
                            let mean = buffer(buffers, &format!("{param}.mean"))?;
                            let var = buffer(buffers, &format!("{param}.var"))?;
                            arg(0)?.batch_norm_eval(g, b, mean, var)?
                        }
                    }
                }
                NodeOp::Relu => arg(0)?.relu(),
                NodeOp::Resize => arg(0)?.bilinear_resize(node.spec.height, node.spec.width)?,
                NodeOp::Add => {
                    let xs = (0..node.inputs.len()).map(arg).collect::<Result<Vec<_>>>()?;
                    Var::add_n(&xs)?
                }
                NodeOp::Concat => {
                    let xs = (0..node.inputs.len()).map(arg).collect::<Result<Vec<_>>>()?;
                    Var::concat(&xs, 1)?
                }
            };
            memo[id] = Some(out);
        }
        Ok(())
    }

    /// Runs the FPN part and returns p3..p7.
    pub fn forward_fpn<'g, T: Scalar>(
        &self,
        params: &ParamVars<'g, T>,
        buffers: &ParamStore<T>,
        inputs: [Var<'g, T>; NUM_INPUTS],
        mode: Mode,
        stats: &mut Vec<BnStats<T>>,
    ) -> Result<[Var<'g, T>; PYRAMID_LEVELS]> {
        let mut memo: Vec<Option<Var<'g, T>>> = vec![None; self.head_start];
        for (i, x) in inputs.iter().enumerate() {
            self.check_input(i, x)?;
            memo[self.inputs[i]] = Some(*x);
        }
        self.eval_range(0..self.head_start, &mut memo, params, buffers, mode, stats)?;
        Ok(self.pyramid.map(|id| memo[id].expect("pyramid evaluated")))
    }

    /// Runs the head on a precomputed pyramid.
    pub fn forward_head<'g, T: Scalar>(
        &self,
        params: &ParamVars<'g, T>,
        buffers: &ParamStore<T>,
        pyramid: &[Var<'g, T>; PYRAMID_LEVELS],
        mode: Mode,
        stats: &mut Vec<BnStats<T>>,
    ) -> Result<Vec<LevelOutput<'g, T>>> {
        let mut memo: Vec<Option<Var<'g, T>>> = vec![None; self.nodes.len()];
        for (lvl, (&id, p)) in self.pyramid.iter().zip(pyramid).enumerate() {
            let s = self.nodes[id].spec;
            let shape = p.shape();
            if shape.len() != 4 || shape[1..] != [s.channels, s.height, s.width] {
                return Err(Error::Tensor(nfcs_tensor::TensorError::ShapeMismatch {
                    op: "head input",
                    expected: format!("p{} [N, {}, {}, {}]", lvl + 3, s.channels, s.height, s.width),
                    got: format!("{shape:?}"),
                }));
            }
            memo[id] = Some(*p);
        }
        self.eval_range(self.head_start..self.nodes.len(), &mut memo, params, buffers, mode, stats)?;
        let mut out = Vec::with_capacity(PYRAMID_LEVELS);
        for o in &self.outputs {
            let get = |id: usize| memo[id].expect("head output evaluated");
            let stride = T::c(o.stride as f64);
            let reg = get(o.reg)
                .clamp(T::c(-REG_LOGIT_MAX), T::c(REG_LOGIT_MAX))
                .exp()
                .scale(stride);
            out.push(LevelOutput {
                stride: o.stride,
                cls: get(o.cls),
                reg,
                ctr: get(o.ctr),
            });
        }
        Ok(out)
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        params: &ParamVars<'g, T>,
        buffers: &ParamStore<T>,
        inputs: [Var<'g, T>; NUM_INPUTS],
        mode: Mode,
        stats: &mut Vec<BnStats<T>>,
    ) -> Result<Vec<LevelOutput<'g, T>>> {
        let p = self.forward_fpn(params, buffers, inputs, mode, stats)?;
        self.forward_head(params, buffers, &p, mode, stats)
    }

    /// Graphviz rendering with one cluster per section.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph decoder {\n  rankdir=BT;\n  node [shape=box, fontsize=10];\n");
        let mut sections: Vec<Section> = Vec::new();
        for n in &self.nodes {
            if !sections.contains(&n.section) {
                sections.push(n.section);
            }
        }
        for sec in sections {
            let (name, title) = match sec {
                Section::Fpn => ("fpn".to_string(), "FPN".to_string()),
                Section::Head(l) => (format!("head{}", l + 3), format!("head @ p{}", l + 3)),
            };
            let _ = writeln!(s, "  subgraph cluster_{name} {{\n    label=\"{title}\";");
            for (id, n) in self.nodes.iter().enumerate().filter(|(_, n)| n.section == sec) {
                let _ = writeln!(
                    s,
                    "    n{id} [label=\"{}\\n{}x{}x{} /{}\"];",
                    n.label.replace('"', "'"),
                    n.spec.channels,
                    n.spec.height,
                    n.spec.width,
                    n.spec.stride
                );
            }
            s.push_str("  }\n");
        }
        for (id, n) in self.nodes.iter().enumerate() {
            for &i in &n.inputs {
                let _ = writeln!(s, "  n{i} -> n{id};");
            }
        }
        for (lvl, &p) in self.pyramid.iter().enumerate() {
            let _ = writeln!(s, "  p{} [shape=ellipse];\n  n{p} -> p{};", lvl + 3, lvl + 3);
        }
        s.push_str("}\n");
        s
    }
}

fn buffer<'a, T: Scalar>(buffers: &'a ParamStore<T>, name: &str) -> Result<&'a Tensor<T>> {
    buffers
        .get(name)
        .ok_or_else(|| Error::InvalidConfig(format!("missing batch-norm buffer `{name}`")))
}

fn draw<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], init: Init) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Const(v) => vec![T::c(v); n],
        Init::Uniform(b) => (0..n).map(|_| T::c(rng.random_range(-b..=b))).collect(),
    };
    Tensor::from_parts(shape.to_vec(), data)
}

/// Folds training-mode batch statistics into running buffers.
pub fn apply_bn_stats<T: Scalar>(buffers: &mut ParamStore<T>, stats: &[BnStats<T>]) -> Result<()> {
    let m = T::c(BN_MOMENTUM);
    let keep = T::one() - m;
    for s in stats {
        for (suffix, batch) in [("mean", &s.mean), ("var", &s.var)] {
            let name = format!("{}.{suffix}", s.param);
            let old = buffer(buffers, &name)?;
            let next: Vec<T> = old.data().iter().zip(batch).map(|(&o, &b)| keep * o + m * b).collect();
            buffers.set(&name, Tensor::from_parts(old.shape().to_vec(), next))?;
        }
    }
    Ok(())
}
