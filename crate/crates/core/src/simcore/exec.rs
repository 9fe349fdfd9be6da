use super::banks::{Access, AccessKind};
use super::{bias_shift, buf_name, fmt_err, ParamStore, SimError};
use crate::blockflow::{stitch, BlockPlan, Span};
use crate::fbisa::{BufId, InferType, Instruction, Opcode, Program};
use crate::fixedpoint::{requantize_code, Accumulator, QFormat};
use crate::modelir::{Activation, PoolKind, LANE};
use crate::paramcodec::LeafParams;
use crate::tensor::Tensor;

const TAPS: usize = 9 * LANE;

/// A feature block in a buffer, addressed by absolute pixel coordinates at
/// its stratum. Always holds one 32-channel group.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub x: Span,
    pub y: Span,
    pub fmt: QFormat,
    pub data: Tensor,
}

impl Feature {
    fn zeros(x: Span, y: Span, fmt: QFormat) -> Self {
        Feature { x, y, fmt, data: Tensor::zeros(x.len as usize, y.len as usize, LANE) }
    }

    #[inline]
    fn offset(&self, ax: i64, ay: i64) -> usize {
        self.data.index((ax - self.x.start) as usize, (ay - self.y.start) as usize, 0)
    }

    #[inline]
    fn inside(&self, ax: i64, ay: i64) -> bool {
        ax >= self.x.start && ax < self.x.end() && ay >= self.y.start && ay < self.y.end()
    }

    /// The 32 channels at an absolute position.
    pub fn at(&self, ax: i64, ay: i64) -> &[i32] {
        let o = self.offset(ax, ay);
        &self.data.data[o..o + LANE]
    }

    fn covers(&self, x: Span, y: Span) -> bool {
        self.x.contains(&x) && self.y.contains(&y)
    }

    /// Copies the absolute window `x`, `y` keeping `channels` channels.
    pub fn window(&self, x: Span, y: Span, channels: usize) -> Tensor {
        Tensor::from_fn(x.len as usize, y.len as usize, channels, |i, j, c| {
            self.at(x.start + i as i64, y.start + j as i64)[c]
        })
    }
}

/// One block of input codes and where it sits in the frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockInput {
    /// Absolute coordinates of the block's top-left input pixel.
    pub origin: (i64, i64),
    pub fmt: QFormat,
    pub data: Tensor,
}

/// `acc[o] += sum_j w[o][j] * nb[j]` over one 32x32x3x3 leaf-module, with
/// `nb` laid out as `[in][tap]` to match the weight layout. With 8-bit
/// weights and features one leaf's sum stays below 2^24, so it is formed in
/// 32 bits and widened.
#[inline]
pub(crate) fn conv_leaf(w3: &[i32], nb: &[i32; TAPS], acc: &mut [i64; LANE]) {
    for (o, a) in acc.iter_mut().enumerate() {
        let row = &w3[o * TAPS..(o + 1) * TAPS];
        let s: i32 = row.iter().zip(nb.iter()).map(|(w, x)| w * x).sum();
        *a += s as i64;
    }
}

fn gather(src: &Feature, ax: i64, ay: i64, zero_pad: bool, nb: &mut [i32; TAPS]) {
    for ky in 0..3 {
        for kx in 0..3 {
            let (px, py) = (ax + kx - 1, ay + ky - 1);
            let k = (ky * 3 + kx) as usize;
            if zero_pad && !src.inside(px, py) {
                for i in 0..LANE {
                    nb[i * 9 + k] = 0;
                }
                continue;
            }
            let o = src.offset(px, py);
            for i in 0..LANE {
                nb[i * 9 + k] = src.data.data[o + i];
            }
        }
    }
}

fn shrink(s: Span) -> Span {
    Span::new(s.start + 1, s.len - 2)
}

fn relu(v: i64, act: Activation) -> i64 {
    if act == Activation::ReLU {
        v.max(0)
    } else {
        v
    }
}

struct Ctx<'a> {
    k: usize,
    ins: &'a Instruction,
    leaves: &'a [LeafParams],
    src: &'a Feature,
    src_s: Option<&'a Feature>,
    conv_x: Span,
    conv_y: Span,
    cycle: u64,
    trace: Option<&'a mut Vec<Access>>,
}

impl Ctx<'_> {
    fn record(&mut self, buf: BufId, kind: AccessKind, tile: (i64, i64)) {
        if let Some(t) = self.trace.as_deref_mut() {
            if buf.is_block_buffer() {
                t.push(Access { cycle: self.cycle, instr: self.k, opcode: self.ins.opcode, buf, kind, tile });
            }
        }
    }

    /// Visits the instruction's output tiles in raster order; `f` gets the
    /// tile index and the absolute pixels of the tile inside the valid span.
    fn for_tiles(&mut self, mut f: impl FnMut(&mut Self, (i64, i64), &[(i64, i64)])) {
        let (tw, th) = (self.ins.out.0 as i64, self.ins.out.1 as i64);
        let mut px = Vec::with_capacity(8);
        for ty in 0..th {
            for tx in 0..tw {
                px.clear();
                for dy in 0..2 {
                    for dx in 0..4 {
                        let (x, y) = (tx * 4 + dx, ty * 2 + dy);
                        if x < self.conv_x.len && y < self.conv_y.len {
                            px.push((self.conv_x.start + x, self.conv_y.start + y));
                        }
                    }
                }
                let in_tile = (
                    (self.conv_x.start + tx * 4 - self.src.x.start).max(0) / 4,
                    (self.conv_y.start + ty * 2 - self.src.y.start).max(0) / 2,
                );
                for _ in 0..self.leaves.len() {
                    self.record(self.ins.src, AccessKind::Read, in_tile);
                    if let Some(s) = self.ins.src_s {
                        self.record(s, AccessKind::Read, (tx, ty));
                    }
                    self.cycle += 1;
                }
                self.cycle -= 1;
                f(self, (tx, ty), &px);
                self.cycle += 1;
            }
        }
    }
}

/// Output of CONV (and the convolution stage of DNX2) at one pixel.
fn conv_pixel(c: &Ctx<'_>, ax: i64, ay: i64, out_fmt: QFormat, shift: u32, nb: &mut [i32; TAPS]) -> [i32; LANE] {
    gather(c.src, ax, ay, c.ins.infer == InferType::ZeroPadded, nb);
    let mut acc = [0i64; LANE];
    for leaf in c.leaves {
        conv_leaf(&leaf.w3, nb, &mut acc);
    }
    let scale = c.src.fmt.frac_bits + c.ins.qw.frac_bits;
    let bias = &c.leaves[c.leaves.len() - 1].bias;
    let skip = c.src_s.map(|s| (s.at(ax, ay), s.fmt.frac_bits));
    let mut out = [0i32; LANE];
    for o in 0..LANE {
        let mut a = Accumulator { value: acc[o] + ((bias[o] as i64) << shift), scale };
        if let Some((v, n)) = skip {
            a.add_aligned(v[o] as i64, n);
        }
        out[o] = requantize_code(relu(a.value, c.ins.act), a.scale, out_fmt) as i32;
    }
    out
}

fn exec_conv(c: &mut Ctx<'_>, out_fmt: QFormat) -> Result<Feature, SimError> {
    let scale = c.src.fmt.frac_bits + c.ins.qw.frac_bits;
    let shift = bias_shift(c.k, scale, c.ins.qb)?;
    let mut out = Feature::zeros(c.conv_x, c.conv_y, out_fmt);
    let mut nb = [0i32; TAPS];
    let target = c.ins.dst.or(c.ins.dst_s).expect("validated destination");
    c.for_tiles(|c, tile, px| {
        for &(ax, ay) in px {
            let v = conv_pixel(c, ax, ay, out_fmt, shift, &mut nb);
            let o = out.offset(ax, ay);
            out.data.data[o..o + LANE].copy_from_slice(&v);
        }
        c.record(target, AccessKind::Write, tile);
    });
    Ok(out)
}

fn exec_upx2(c: &mut Ctx<'_>) -> Result<Feature, SimError> {
    let scale = c.src.fmt.frac_bits + c.ins.qw.frac_bits;
    let shift = bias_shift(c.k, scale, c.ins.qb)?;
    let ox = Span::new(2 * c.conv_x.start, 2 * c.conv_x.len);
    let oy = Span::new(2 * c.conv_y.start, 2 * c.conv_y.len);
    let mut out = Feature::zeros(ox, oy, c.ins.qo);
    let mut nb = [0i32; TAPS];
    let dst = c.ins.dst.expect("validated destination");
    c.for_tiles(|c, (tx, ty), px| {
        for &(ax, ay) in px {
            gather(c.src, ax, ay, c.ins.infer == InferType::ZeroPadded, &mut nb);
            for (g, leaf) in c.leaves.iter().enumerate() {
                let mut acc = [0i64; LANE];
                conv_leaf(&leaf.w3, &nb, &mut acc);
                let o = out.offset(2 * ax + (g % 2) as i64, 2 * ay + (g / 2) as i64);
                for (ch, &a) in acc.iter().enumerate() {
                    let v = relu(a + ((leaf.bias[ch] as i64) << shift), c.ins.act);
                    out.data.data[o + ch] = requantize_code(v, scale, c.ins.qo) as i32;
                }
            }
        }
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            c.record(dst, AccessKind::Write, (2 * tx + dx, 2 * ty + dy));
        }
    });
    Ok(out)
}

fn pool_span(s: Span) -> Span {
    let start = (s.start + 1).div_euclid(2);
    let end = s.end().div_euclid(2);
    Span::new(start, (end - start).max(0))
}

fn exec_dnx2(c: &mut Ctx<'_>) -> Result<Feature, SimError> {
    let conv = exec_conv(c, c.ins.qo)?;
    let (ox, oy) = (pool_span(conv.x), pool_span(conv.y));
    let mut out = Feature::zeros(ox, oy, c.ins.qo);
    let max = c.ins.pool == Some(PoolKind::Max);
    for y in oy.start..oy.end() {
        for x in ox.start..ox.end() {
            let o = out.offset(x, y);
            for ch in 0..LANE {
                let tl = conv.at(2 * x, 2 * y)[ch];
                out.data.data[o + ch] = if max {
                    tl.max(conv.at(2 * x + 1, 2 * y)[ch])
                        .max(conv.at(2 * x, 2 * y + 1)[ch])
                        .max(conv.at(2 * x + 1, 2 * y + 1)[ch])
                } else {
                    tl
                };
            }
        }
    }
    Ok(out)
}

fn exec_er(c: &mut Ctx<'_>) -> Result<Feature, SimError> {
    let qs = c.ins.qs.ok_or_else(|| fmt_err(c.k, "ER without an intermediate format"))?;
    let scale1 = c.src.fmt.frac_bits + c.ins.qw.frac_bits;
    let scale2 = qs.frac_bits + c.ins.qw.frac_bits;
    let shift1 = bias_shift(c.k, scale1, c.ins.qb)?;
    let shift2 = bias_shift(c.k, scale2, c.ins.qb)?;
    let mut out = Feature::zeros(c.conv_x, c.conv_y, c.ins.qo);
    let mut nb = [0i32; TAPS];
    let dst = c.ins.dst.expect("validated destination");
    c.for_tiles(|c, tile, px| {
        for &(ax, ay) in px {
            gather(c.src, ax, ay, c.ins.infer == InferType::ZeroPadded, &mut nb);
            let mut acc2 = [0i64; LANE];
            for leaf in c.leaves {
                let mut acc1 = [0i64; LANE];
                conv_leaf(&leaf.w3, &nb, &mut acc1);
                let mut t = [0i64; LANE];
                for e in 0..LANE {
                    let v = (acc1[e] + ((leaf.bias[e] as i64) << shift1)).max(0);
                    t[e] = requantize_code(v, scale1, qs);
                }
                for (o, a) in acc2.iter_mut().enumerate() {
                    let row = &leaf.w1[o * LANE..(o + 1) * LANE];
                    *a += row.iter().zip(&t).map(|(w, x)| *w as i64 * x).sum::<i64>();
                }
            }
            let b1 = &c.leaves[0].bias[LANE..];
            let res = c.src.at(ax, ay);
            let o = out.offset(ax, ay);
            for ch in 0..LANE {
                let mut a = Accumulator { value: acc2[ch] + ((b1[ch] as i64) << shift2), scale: scale2 };
                a.add_aligned(res[ch] as i64, c.src.fmt.frac_bits);
                out.data.data[o + ch] = requantize_code(relu(a.value, c.ins.act), a.scale, c.ins.qo) as i32;
            }
        }
        c.record(dst, AccessKind::Write, tile);
    });
    Ok(out)
}

fn execute(
    p: &Program,
    params: &ParamStore,
    input: &BlockInput,
    mut trace: Option<&mut Vec<Access>>,
) -> Result<Feature, SimError> {
    if input.data.channels > LANE {
        return Err(SimError::Frame(format!("{} input channels exceed one group", input.data.channels)));
    }
    let mut bufs: [Option<Feature>; 5] = Default::default();
    bufs[BufId::DI.index()] = Some(Feature {
        x: Span::new(input.origin.0, input.data.width as i64),
        y: Span::new(input.origin.1, input.data.height as i64),
        fmt: input.fmt,
        data: input.data.with_channels(LANE),
    });
    let cap = p.config.x_i as usize;
    let mut cycle = 0u64;
    let mut output = None;
    for (k, ins) in p.instructions.iter().enumerate() {
        let read = |b: BufId| -> Result<&Feature, SimError> {
            if b == BufId::DO {
                return Err(SimError::Operand { instr: k, msg: "DO cannot be read".into() });
            }
            bufs[b.index()].as_ref().ok_or(SimError::Unwritten { instr: k, buf: buf_name(b) })
        };
        let src = read(ins.src)?;
        let src_s = ins.src_s.map(read).transpose()?;
        let seg = params.get(ins.param)?;
        if seg.leaves.len() != ins.lm as usize || ins.lm == 0 {
            return Err(SimError::Operand {
                instr: k,
                msg: format!("lm={} but the segment holds {} leaf-modules", ins.lm, seg.leaves.len()),
            });
        }
        let (conv_x, conv_y) = match ins.infer {
            InferType::Truncated => (shrink(src.x), shrink(src.y)),
            InferType::ZeroPadded => (src.x, src.y),
        };
        if conv_x.len <= 0 || conv_y.len <= 0 {
            return Err(SimError::Operand { instr: k, msg: "source block is too small to convolve".into() });
        }
        let expected = ((conv_x.len as u16).div_ceil(4), (conv_y.len as u16).div_ceil(2));
        if expected != ins.out {
            return Err(SimError::Tiles { instr: k, expected, found: ins.out });
        }
        if ins.opcode == Opcode::Upx2 && src_s.is_some() {
            return Err(SimError::Operand { instr: k, msg: "UPX2 takes no srcS".into() });
        }
        if let Some(s) = src_s {
            if !s.covers(conv_x, conv_y) {
                return Err(SimError::Operand { instr: k, msg: "srcS does not cover the output region".into() });
            }
        }
        let mut c = Ctx { k, ins, leaves: &seg.leaves, src, src_s, conv_x, conv_y, cycle, trace: trace.as_deref_mut() };
        let result = match ins.opcode {
            Opcode::Conv => {
                let fmt = if ins.dst_s.is_some() {
                    ins.qs.ok_or_else(|| fmt_err(k, "dstS without a partial-sum format"))?
                } else {
                    ins.qo
                };
                exec_conv(&mut c, fmt)?
            }
            Opcode::Er => exec_er(&mut c)?,
            Opcode::Upx2 => exec_upx2(&mut c)?,
            Opcode::Dnx2 => exec_dnx2(&mut c)?,
        };
        cycle = c.cycle;
        let target = ins.dst.or(ins.dst_s).ok_or(SimError::Operand { instr: k, msg: "no destination".into() })?;
        match target {
            BufId::DO => output = Some(result),
            BufId::DI => return Err(SimError::Operand { instr: k, msg: "DI cannot be written".into() }),
            b => {
                let side = result.data.width.max(result.data.height);
                if side > cap {
                    return Err(SimError::Capacity { instr: k, side, cap });
                }
                bufs[b.index()] = Some(result);
            }
        }
    }
    output.ok_or(SimError::NoOutput)
}

/// Runs the program over one block and returns what it wrote to `DO`.
pub fn run_block(p: &Program, params: &ParamStore, input: &BlockInput) -> Result<Feature, SimError> {
    execute(p, params, input, None)
}

/// [`run_block`] that also records every block-buffer access.
pub fn run_block_traced(
    p: &Program,
    params: &ParamStore,
    input: &BlockInput,
) -> Result<(Feature, Vec<Access>), SimError> {
    let mut trace = Vec::new();
    let out = execute(p, params, input, Some(&mut trace))?;
    Ok((out, trace))
}

fn block_input(p: &Program, frame: &Tensor, plan: &BlockPlan, row: usize, col: usize) -> BlockInput {
    let (rb, cb) = (plan.rows[row], plan.cols[col]);
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let data = Tensor::from_fn(plan.x_i, plan.x_i, frame.channels, |x, y, c| {
        frame.get(clamp(cb.in_origin + x as i64, frame.width), clamp(rb.in_origin + y as i64, frame.height), c)
    });
    BlockInput { origin: (cb.in_origin, rb.in_origin), fmt: p.input.fmt, data }
}

fn kept_tile(
    p: &Program,
    params: &ParamStore,
    frame: &Tensor,
    plan: &BlockPlan,
    (row, col): (usize, usize),
) -> Result<((usize, usize), Tensor), SimError> {
    let out = run_block(p, params, &block_input(p, frame, plan, row, col))?;
    let (rb, cb) = (plan.rows[row], plan.cols[col]);
    let kx = Span::new(cb.keep_start as i64, cb.keep_len as i64);
    let ky = Span::new(rb.keep_start as i64, rb.keep_len as i64);
    if !out.covers(kx, ky) {
        return Err(SimError::Frame(format!("block ({row}, {col}) does not cover its output tile")));
    }
    Ok(((row, col), out.window(kx, ky, p.output_channels as usize)))
}

fn prepare(p: &Program, frame: &Tensor, plan: &BlockPlan) -> Result<Tensor, SimError> {
    let input = if plan.input_unshuffled {
        if !frame.width.is_multiple_of(2) || !frame.height.is_multiple_of(2) {
            return Err(SimError::Frame("unshuffled input needs even frame dimensions".into()));
        }
        frame.pixel_unshuffle()
    } else {
        frame.clone()
    };
    if (input.width, input.height) != plan.frame_in {
        return Err(SimError::InputShape { expected: plan.frame_in, found: (input.width, input.height) });
    }
    if input.channels != p.input.channels as usize {
        return Err(SimError::Frame(format!(
            "frame has {} channels, the program streams {}",
            input.channels, p.input.channels
        )));
    }
    Ok(input)
}

/// Runs every block of `plan` and stitches the kept tiles.
pub fn run_image(p: &Program, params: &ParamStore, frame: &Tensor, plan: &BlockPlan) -> Result<Tensor, SimError> {
    let input = prepare(p, frame, plan)?;
    let positions: Vec<_> = plan.positions().collect();
    let tiles = crate::par::map(&positions, |&pos| kept_tile(p, params, &input, plan, pos));
    let tiles = tiles.into_iter().collect::<Result<Vec<_>, _>>()?;
    stitch(tiles, plan).map_err(|e| SimError::Frame(e.to_string()))
}

/// Sequential [`run_image`] visiting blocks in `order` (indices into the
/// raster-ordered grid).
pub fn run_image_ordered(
    p: &Program,
    params: &ParamStore,
    frame: &Tensor,
    plan: &BlockPlan,
    order: &[usize],
) -> Result<Tensor, SimError> {
    let input = prepare(p, frame, plan)?;
    let positions: Vec<_> = plan.positions().collect();
    let tiles = order
        .iter()
        .map(|&i| {
            let pos = *positions.get(i).ok_or_else(|| SimError::Frame(format!("block index {i} is outside the grid")))?;
            kept_tile(p, params, &input, plan, pos)
        })
        .collect::<Result<Vec<_>, _>>()?;
    stitch(tiles, plan).map_err(|e| SimError::Frame(e.to_string()))
}

/// Block-buffer accesses of the block at raster index `index`.
pub fn trace_block(
    p: &Program,
    params: &ParamStore,
    frame: &Tensor,
    plan: &BlockPlan,
    index: usize,
) -> Result<Vec<Access>, SimError> {
    let input = prepare(p, frame, plan)?;
    let (row, col) = plan
        .positions()
        .nth(index)
        .ok_or_else(|| SimError::Frame(format!("block index {index} is outside the grid")))?;
    Ok(run_block_traced(p, params, &block_input(p, &input, plan, row, col))?.1)
}
