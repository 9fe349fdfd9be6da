use serde::Serialize;
use thiserror::Error;

use super::{BufId, InferType, Instruction, MachineConfig, Opcode, Program, StreamSpec};
use crate::blockflow::BlockPlan;
use crate::modelir::{Activation, LayerCodes, LayerKind, QuantizedModel, LANE};
use crate::paramcodec::{encode_params, CodecError, EncodeReport, LeafParams, ParamContainer, Segment, SegmentKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CompileError {
    #[error("layer {layer}: {msg}")]
    Unsupported { layer: usize, msg: String },
    #[error("layer {layer}: needs more than {count} block buffers live at once")]
    Buffers { layer: usize, count: usize },
    #[error("layer {layer}: {extent}-pixel feature does not fit a {x_i}-pixel block buffer")]
    Extent { layer: usize, extent: usize, x_i: usize },
    #[error("layer {layer}: missing quantized parameters")]
    Codes { layer: usize },
    #[error("plan does not match the model: {0}")]
    Plan(String),
    #[error("{0} parameter segments for {1} instructions")]
    Bind(usize, usize),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CompileOptions {
    pub infer: InferType,
}

/// Where one leaf-module's parameters come from in its layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LeafSource {
    /// Input group `in_group` to output group `out_group`; biases only
    /// when `bias` (the last instruction of a partial-sum chain).
    Conv { in_group: usize, out_group: usize, bias: bool },
    /// Output channels of pixel-shuffle sub-position `sub`.
    Upx2 { sub: usize },
    /// Expansion group `group`; the reduction bias rides on group 0.
    Er { group: usize },
}

/// Parameters of one instruction: the source layer and its leaf-modules in
/// execution order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SegmentLayout {
    pub layer: usize,
    pub kind: SegmentKind,
    pub leaves: Vec<LeafSource>,
}

/// One segment per instruction, in program order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ParamLayout {
    pub segments: Vec<SegmentLayout>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpKind {
    Conv,
    Er,
    Upx2,
    Dnx2(crate::modelir::PoolKind),
}

/// A fused group of layers executed as one or more instructions.
#[derive(Debug, Clone)]
struct Op {
    kind: OpKind,
    /// Layer holding the parameters.
    layer: usize,
    /// Layer whose output this op produces.
    feature: usize,
    /// Feature read as `src` (`None` for the block input).
    input: Option<usize>,
    /// Feature added through `srcS`.
    skip: Option<Option<usize>>,
    act: Activation,
}

fn groups(ch: usize) -> usize {
    ch.div_ceil(LANE).max(1)
}

fn fuse(qm: &QuantizedModel, start: usize) -> Result<Vec<Op>, CompileError> {
    let m = &qm.model;
    let mut ops = Vec::new();
    let mut i = start;
    let mut input: Option<usize> = None;
    let unsupported = |layer: usize, msg: &str| CompileError::Unsupported { layer, msg: msg.into() };
    while i < m.layers.len() {
        let l = &m.layers[i];
        let next = m.layers.get(i + 1).map(|n| n.kind);
        let mut op = Op { kind: OpKind::Conv, layer: i, feature: i, input, skip: None, act: l.activation };
        match l.kind {
            LayerKind::ERModule { .. } => op.kind = OpKind::Er,
            LayerKind::Conv3x3 => match next {
                Some(LayerKind::ResidualAdd) => {
                    let src = m.skip_source(i + 1).ok_or_else(|| unsupported(i + 1, "ResidualAdd without a link"))?;
                    op.skip = Some(if src < start { None } else { Some(src) });
                    op.feature = i + 1;
                    if m.layers[i + 1].activation == Activation::ReLU {
                        op.act = Activation::ReLU;
                    }
                }
                Some(LayerKind::PixelShuffleUp2) => {
                    op.kind = OpKind::Upx2;
                    op.feature = i + 1;
                }
                Some(LayerKind::Downsample2(pool)) => {
                    op.kind = OpKind::Dnx2(pool);
                    op.feature = i + 1;
                }
                _ => {}
            },
            LayerKind::Conv1x1 => return Err(unsupported(i, "standalone 1x1 convolutions have no opcode")),
            _ => return Err(unsupported(i, "layer must follow a 3x3 convolution")),
        }
        if qm.codes.get(op.layer).and_then(Option::as_ref).is_none() {
            return Err(CompileError::Codes { layer: op.layer });
        }
        input = Some(op.feature);
        i = op.feature + 1;
        ops.push(op);
    }
    if ops.is_empty() {
        return Err(unsupported(start, "model has no block layers"));
    }
    Ok(ops)
}

fn tiles(extent: usize) -> (u16, u16) {
    (extent.div_ceil(4) as u16, extent.div_ceil(2) as u16)
}

struct Allocator {
    free: Vec<BufId>,
}

impl Allocator {
    fn take(&mut self, layer: usize) -> Result<BufId, CompileError> {
        if self.free.is_empty() {
            return Err(CompileError::Buffers { layer, count: BufId::BLOCK_BUFFERS.len() });
        }
        Ok(self.free.remove(0))
    }

    fn give(&mut self, b: BufId) {
        if b.is_block_buffer() && !self.free.contains(&b) {
            self.free.push(b);
            self.free.sort();
        }
    }
}

/// Translates a quantized model into a block program.
///
/// Each fused op becomes one instruction per 32-channel output group; an
/// input wider than 32 channels is split into a chain of instructions that
/// hand requantized partial sums along through `dstS`/`srcS`. Parameter
/// addresses are left at zero until [`bind_params`].
pub fn compile(
    qm: &QuantizedModel,
    plan: &BlockPlan,
    opts: CompileOptions,
) -> Result<(Program, ParamLayout), CompileError> {
    let m = &qm.model;
    let start = usize::from(m.unshuffles_input());
    let chain_len = m.layers.len() - start;
    if plan.layer_extents.len() != chain_len || plan.input_unshuffled != m.unshuffles_input() {
        return Err(CompileError::Plan(format!(
            "{} layer extents for a {chain_len}-layer block chain",
            plan.layer_extents.len()
        )));
    }
    let x_i = plan.x_i;
    let config = MachineConfig::default();
    let capacity = config.x_i as usize;
    let extent = |layer: usize| -> usize {
        match opts.infer {
            InferType::Truncated => plan.layer_extents[layer - start],
            InferType::ZeroPadded => {
                let level = m.layers[layer].out_level() - m.layers[start].scale_level;
                if level >= 0 {
                    x_i << level
                } else {
                    x_i >> -level
                }
            }
        }
    };

    let ops = fuse(qm, start)?;
    let mut last_use = vec![0usize; m.layers.len()];
    for (t, op) in ops.iter().enumerate() {
        for f in [op.input, op.skip.flatten()].into_iter().flatten() {
            last_use[f] = last_use[f].max(t);
        }
    }

    let mut alloc = Allocator { free: BufId::BLOCK_BUFFERS.to_vec() };
    let mut loc: Vec<Vec<BufId>> = vec![Vec::new(); m.layers.len()];
    let input_bufs = vec![BufId::DI];
    let mut instructions = Vec::new();
    let mut layout = ParamLayout::default();
    let last_op = ops.len() - 1;

    for (t, op) in ops.iter().enumerate() {
        let spec = &m.layers[op.layer];
        let codes = qm.codes[op.layer].as_ref().expect("checked in fuse");
        let src_bufs = match op.input {
            None => input_bufs.clone(),
            Some(f) => loc[f].clone(),
        };
        let skip_bufs = op.skip.map(|s| match s {
            None => input_bufs.clone(),
            Some(f) => loc[f].clone(),
        });
        let gi = groups(spec.in_ch);
        let qo = qm.out_fmt[op.feature];
        let conv_ext = extent(op.layer);
        let out_ext = extent(op.feature);
        let unsupported = |msg: &str| CompileError::Unsupported { layer: op.layer, msg: msg.into() };
        if src_bufs.len() != gi {
            return Err(unsupported("input feature groups do not match the layer width"));
        }
        if gi > 4 {
            return Err(unsupported("inputs wider than 128 channels"));
        }
        let go = match op.kind {
            OpKind::Upx2 => {
                if !spec.out_ch.is_multiple_of(4) || spec.out_ch / 4 > LANE || gi != 1 {
                    return Err(unsupported("UPX2 needs a single 32-channel input and output group"));
                }
                1
            }
            OpKind::Er | OpKind::Dnx2(_) => {
                if gi != 1 || spec.out_ch > LANE {
                    return Err(unsupported("ER and DNX2 operate on a single 32-channel group"));
                }
                1
            }
            OpKind::Conv => groups(spec.out_ch),
        };
        if t == last_op && go != 1 {
            return Err(unsupported("the output layer must produce at most 32 channels"));
        }
        if op.input.is_none() && go != 1 {
            return Err(unsupported("the input stream can feed only one 32-channel output group"));
        }
        if op.skip.is_some() && gi != 1 {
            return Err(unsupported("a residual join cannot also chain partial sums"));
        }
        if let Some(s) = &skip_bufs {
            if s.len() != go {
                return Err(unsupported("residual source width differs from the output"));
            }
        }
        let out_bufs: Vec<BufId> = if t == last_op {
            vec![BufId::DO]
        } else {
            if out_ext > capacity {
                return Err(CompileError::Extent { layer: op.feature, extent: out_ext, x_i: capacity });
            }
            (0..go).map(|_| alloc.take(op.layer)).collect::<Result<_, _>>()?
        };
        let partial = if gi > 1 { Some(alloc.take(op.layer)?) } else { None };
        if partial.is_some() && codes.qs.is_none() {
            return Err(unsupported("chained partial sums need a qs format"));
        }

        let base = Instruction {
            opcode: Opcode::Conv,
            lm: 1,
            out: tiles(conv_ext),
            src: src_bufs[0],
            dst: None,
            src_s: None,
            dst_s: None,
            param: 0,
            qw: codes.qw,
            qb: codes.qb,
            qo,
            qs: None,
            infer: opts.infer,
            pool: None,
            act: op.act,
        };
        match op.kind {
            OpKind::Er => {
                let expand = spec.kind_expand();
                instructions.push(Instruction {
                    opcode: Opcode::Er,
                    lm: expand as u8,
                    dst: Some(out_bufs[0]),
                    qs: codes.qs,
                    ..base
                });
                layout.segments.push(SegmentLayout {
                    layer: op.layer,
                    kind: SegmentKind::Er,
                    leaves: (0..expand).map(|group| LeafSource::Er { group }).collect(),
                });
            }
            OpKind::Upx2 => {
                instructions.push(Instruction { opcode: Opcode::Upx2, lm: 4, dst: Some(out_bufs[0]), ..base });
                layout.segments.push(SegmentLayout {
                    layer: op.layer,
                    kind: SegmentKind::Conv,
                    leaves: (0..4).map(|sub| LeafSource::Upx2 { sub }).collect(),
                });
            }
            OpKind::Dnx2(pool) => {
                instructions.push(Instruction {
                    opcode: Opcode::Dnx2,
                    dst: Some(out_bufs[0]),
                    pool: Some(pool),
                    ..base
                });
                layout.segments.push(SegmentLayout {
                    layer: op.layer,
                    kind: SegmentKind::Conv,
                    leaves: vec![LeafSource::Conv { in_group: 0, out_group: 0, bias: true }],
                });
            }
            OpKind::Conv => {
                for (og, &dst) in out_bufs.iter().enumerate() {
                    for ig in 0..gi {
                        let last = ig + 1 == gi;
                        let ins = Instruction {
                            src: src_bufs[ig],
                            dst: last.then_some(dst),
                            src_s: if ig > 0 { partial } else { skip_bufs.as_ref().map(|s| s[og]) },
                            dst_s: if last { None } else { partial },
                            qs: if last { None } else { codes.qs },
                            act: if last { op.act } else { Activation::None },
                            ..base.clone()
                        };
                        instructions.push(ins);
                        layout.segments.push(SegmentLayout {
                            layer: op.layer,
                            kind: SegmentKind::Conv,
                            leaves: vec![LeafSource::Conv { in_group: ig, out_group: og, bias: last }],
                        });
                    }
                }
            }
        }
        if let Some(b) = partial {
            alloc.give(b);
        }
        for f in [op.input, op.skip.flatten()].into_iter().flatten() {
            if last_use[f] == t {
                for &b in &loc[f] {
                    alloc.give(b);
                }
            }
        }
        loc[op.feature] = out_bufs;
    }

    let last = ops.last().expect("nonempty");
    let out_spec = &m.layers[last.layer];
    let output_channels = if last.kind == OpKind::Upx2 { out_spec.out_ch / 4 } else { out_spec.out_ch };
    let program = Program {
        config,
        input: StreamSpec {
            fmt: qm.input_fmt,
            channels: m.layers[start].in_ch as u16,
            unshuffle: m.unshuffles_input(),
        },
        output_channels: output_channels as u16,
        instructions,
        submodels: Vec::new(),
    };
    Ok((program, layout))
}

trait ExpandRatio {
    fn kind_expand(&self) -> usize;
}

impl ExpandRatio for crate::modelir::LayerSpec {
    fn kind_expand(&self) -> usize {
        match self.kind {
            LayerKind::ERModule { expand } => expand as usize,
            _ => 1,
        }
    }
}

fn leaf(codes: &LayerCodes, in_ch: usize, out_ch: usize, src: LeafSource, kind: SegmentKind) -> LeafParams {
    let mut p = LeafParams::zeros(kind);
    let c = |v: &[i32], k: usize| v.get(k).copied().unwrap_or(0);
    match src {
        LeafSource::Conv { in_group, out_group, bias } => {
            for o in 0..LANE {
                let oc = out_group * LANE + o;
                if oc >= out_ch {
                    break;
                }
                for i in 0..LANE {
                    let ic = in_group * LANE + i;
                    if ic >= in_ch {
                        break;
                    }
                    for k in 0..9 {
                        p.w3[(o * LANE + i) * 9 + k] = codes.w3[(oc * in_ch + ic) * 9 + k];
                    }
                }
                if bias {
                    p.bias[o] = c(&codes.b3, oc);
                }
            }
        }
        LeafSource::Upx2 { sub } => {
            let per = out_ch / 4;
            for o in 0..per {
                let oc = sub * per + o;
                for i in 0..in_ch {
                    for k in 0..9 {
                        p.w3[(o * LANE + i) * 9 + k] = codes.w3[(oc * in_ch + i) * 9 + k];
                    }
                }
                p.bias[o] = c(&codes.b3, oc);
            }
        }
        LeafSource::Er { group } => {
            let e_ch = codes.b3.len();
            for o in 0..LANE {
                let e = group * LANE + o;
                for i in 0..in_ch {
                    for k in 0..9 {
                        p.w3[(o * LANE + i) * 9 + k] = codes.w3[(e * in_ch + i) * 9 + k];
                    }
                }
                p.bias[o] = c(&codes.b3, e);
            }
            for o in 0..out_ch {
                for i in 0..LANE {
                    p.w1[o * LANE + i] = codes.w1[o * e_ch + group * LANE + i];
                }
                if group == 0 {
                    p.bias[LANE + o] = c(&codes.b1, o);
                }
            }
        }
    }
    p
}

/// Integer leaf-modules for every instruction, ready for the encoder.
pub fn gather_segments(layout: &ParamLayout, qm: &QuantizedModel) -> Result<Vec<Segment>, CompileError> {
    layout
        .segments
        .iter()
        .map(|s| {
            let codes = qm.codes.get(s.layer).and_then(Option::as_ref).ok_or(CompileError::Codes { layer: s.layer })?;
            let spec = &qm.model.layers[s.layer];
            let leaves = s.leaves.iter().map(|&src| leaf(codes, spec.in_ch, spec.out_ch, src, s.kind)).collect();
            Ok(Segment { kind: s.kind, leaves })
        })
        .collect()
}

/// Writes each segment's restart address into its instruction.
pub fn bind_params(p: &mut Program, c: &ParamContainer) -> Result<(), CompileError> {
    if c.directory.len() != p.instructions.len() {
        return Err(CompileError::Bind(c.directory.len(), p.instructions.len()));
    }
    for (ins, e) in p.instructions.iter_mut().zip(&c.directory) {
        ins.param = e.bias_addr;
    }
    Ok(())
}

/// Largest block input side, at most `cap`, for which every feature the
/// program keeps in a block buffer fits in `cap` pixels. Models that
/// upsample before their output need a smaller input block than `cap`.
pub fn max_block_input(m: &crate::modelir::ModelIR, frame: (usize, usize), cap: usize) -> Option<BlockPlan> {
    (1..=cap).rev().find_map(|x_i| {
        let plan = crate::blockflow::plan_blocks(m, frame, x_i).ok()?;
        let stored = plan.layer_extents.len().saturating_sub(1);
        plan.layer_extents[..stored].iter().all(|&e| e <= cap).then_some(plan)
    })
}

/// A compiled program together with its bound parameter container.
#[derive(Debug, Clone)]
pub struct Build {
    pub program: Program,
    pub layout: ParamLayout,
    pub container: ParamContainer,
    pub report: EncodeReport,
}

/// Compiles, encodes the parameters within `budget` bytes and binds the
/// restart addresses.
pub fn build(qm: &QuantizedModel, plan: &BlockPlan, opts: CompileOptions, budget: usize) -> Result<Build, CompileError> {
    let (mut program, layout) = compile(qm, plan, opts)?;
    let segments = gather_segments(&layout, qm)?;
    let bits = if qm.codes.iter().flatten().all(|c| c.qw.width == 7) { 7 } else { 8 };
    let (container, report) = encode_params(&segments, bits, budget)?;
    bind_params(&mut program, &container)?;
    Ok(Build { program, layout, container, report })
}
