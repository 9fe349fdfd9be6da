//! Block partitioning, truncated-pyramid bookkeeping and DRAM traffic.
//!
//! An input frame is cut into `x_i x x_i` blocks that are processed
//! independently; every 3x3 layer shrinks the valid region by one pixel per
//! side, and the surviving output tiles are stitched back together. Frame
//! borders are handled by replicating edge pixels on input reads.

mod analytic;
pub mod geometry;
mod report;

pub use analytic::{frame_bandwidth, nbr_at, ncr_at, ncr_plain, nbr_plain};
pub use geometry::{ChainGeometry, GeoOp, Span};
pub use report::{analyze_row, AnalyzeRow, CSV_HEADER};

use serde::Serialize;
use thiserror::Error;

use crate::modelir::{layer_ops_for, CountMode, ModelIR};
use crate::tensor::Tensor;

/// Side of the square block buffer, in pixels.
pub const MAX_BLOCK: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlockFlowError {
    #[error("depth {depth} leaves no valid output pixels for {x_i}-pixel blocks")]
    NoOutput { depth: usize, x_i: usize },
    #[error("block size {0} exceeds the {MAX_BLOCK}-pixel block buffer")]
    BlockTooLarge(usize),
    #[error("block plan leaves no output tile at x_i={0}")]
    Infeasible(usize),
    #[error("frame {w}x{h} is incompatible with the model's resampling")]
    FrameShape { w: usize, h: usize },
    #[error("{0}")]
    Unsupported(String),
    #[error("block ({row}, {col}) {what}")]
    Stitch { row: usize, col: usize, what: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EdgePolicy {
    Replicate,
}

/// One block position along an axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AxisBlock {
    /// First input pixel read by the block (may be negative; reads clamp).
    pub in_origin: i64,
    /// First output pixel the block computes.
    pub out_origin: i64,
    /// Output pixels kept for the frame.
    pub keep_start: usize,
    pub keep_len: usize,
}

impl AxisBlock {
    /// Offset of the kept tile inside the block's computed output.
    pub fn keep_offset(&self) -> usize {
        (self.keep_start as i64 - self.out_origin) as usize
    }

    /// Distinct in-frame input pixels read along this axis.
    pub fn clamped_reads(&self, x_i: usize, frame: usize) -> usize {
        let lo = self.in_origin.max(0);
        let hi = (self.in_origin + x_i as i64).min(frame as i64);
        (hi - lo).max(0) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockPlan {
    pub x_i: usize,
    /// Output tile side at output resolution.
    pub x_o: usize,
    /// Frame in the block program's input domain.
    pub frame_in: (usize, usize),
    pub frame_out: (usize, usize),
    pub cols: Vec<AxisBlock>,
    pub rows: Vec<AxisBlock>,
    /// Valid extent after each layer of the block chain, for an aligned block.
    pub layer_extents: Vec<usize>,
    /// Input stratum of each layer of the block chain.
    pub layer_levels: Vec<i32>,
    pub edge_policy: EdgePolicy,
    pub align: i64,
    /// Whether the host unshuffles the frame before the block program.
    pub input_unshuffled: bool,
}

impl BlockPlan {
    pub fn block_count(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    /// Block grid positions in raster order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows.len()).flat_map(move |r| (0..self.cols.len()).map(move |c| (r, c)))
    }

    /// Output pixels computed per block along one axis.
    pub fn block_out_len(&self) -> usize {
        *self.layer_extents.last().unwrap_or(&self.x_i)
    }
}

fn axis_blocks(geo: &ChainGeometry, x_i: usize, frame_out: usize) -> Result<Vec<AxisBlock>, BlockFlowError> {
    let base = geo.output(Span::new(0, x_i as i64));
    let tile = geo.tile(x_i);
    if base.len <= 0 || tile <= 0 {
        return Err(BlockFlowError::Infeasible(x_i));
    }
    let step = geo.out_step();
    let tile = tile as usize;
    let count = frame_out.div_ceil(tile).max(1);
    Ok((0..count)
        .map(|j| {
            let keep_start = j * tile;
            let keep_len = tile.min(frame_out - keep_start);
            let k = (keep_start as i64 - base.start).div_euclid(step);
            AxisBlock {
                in_origin: k * geo.align,
                out_origin: base.start + k * step,
                keep_start,
                keep_len,
            }
        })
        .collect())
}

/// Partitions a frame (model-input pixels) into blocks of side `x_i`.
pub fn plan_blocks(m: &ModelIR, frame: (usize, usize), x_i: usize) -> Result<BlockPlan, BlockFlowError> {
    if x_i > MAX_BLOCK {
        return Err(BlockFlowError::BlockTooLarge(x_i));
    }
    let geo = ChainGeometry::of_model(m)?;
    let (w, h) = frame;
    let unshuffle = m.unshuffles_input();
    let shape_err = BlockFlowError::FrameShape { w, h };
    let frame_in = if unshuffle {
        if w % 2 != 0 || h % 2 != 0 {
            return Err(shape_err);
        }
        (w / 2, h / 2)
    } else {
        (w, h)
    };
    let unit = 1usize << (-geo.out_level).max(0);
    if frame_in.0 % unit != 0 || frame_in.1 % unit != 0 {
        return Err(shape_err);
    }
    let frame_out = (
        geometry::scale_len(frame_in.0 as i64, geo.out_level) as usize,
        geometry::scale_len(frame_in.1 as i64, geo.out_level) as usize,
    );
    let spans = geo.propagate(Span::new(0, x_i as i64));
    if spans.iter().any(|s| s.len <= 0) {
        return Err(BlockFlowError::NoOutput { depth: m.depth(), x_i });
    }
    let x_o = geo.tile(x_i);
    if x_o <= 0 {
        return Err(BlockFlowError::Infeasible(x_i));
    }
    Ok(BlockPlan {
        x_i,
        x_o: x_o as usize,
        frame_in,
        frame_out,
        cols: axis_blocks(&geo, x_i, frame_out.0)?,
        rows: axis_blocks(&geo, x_i, frame_out.1)?,
        layer_extents: spans.iter().map(|s| s.len as usize).collect(),
        layer_levels: geo.levels.clone(),
        edge_policy: EdgePolicy::Replicate,
        align: geo.align,
        input_unshuffled: unshuffle,
    })
}

/// Recomputation overhead of block-based inference at block size `x_i`,
/// from exact per-layer valid extents (hardware channel counts).
pub fn ncr_discrete(m: &ModelIR, x_i: usize) -> Result<f64, BlockFlowError> {
    ncr_discrete_with(m, x_i, CountMode::Hardware)
}

pub fn ncr_discrete_with(m: &ModelIR, x_i: usize, mode: CountMode) -> Result<f64, BlockFlowError> {
    let geo = ChainGeometry::of_model(m)?;
    let spans = geo.propagate(Span::new(0, x_i as i64));
    if spans.iter().any(|s| s.len <= 0) {
        return Err(BlockFlowError::NoOutput { depth: m.depth(), x_i });
    }
    let tile = geo.tile(x_i);
    if tile <= 0 {
        return Err(BlockFlowError::Infeasible(x_i));
    }
    let skip = usize::from(m.unshuffles_input());
    let (mut block_ops, mut frame_ops) = (0.0, 0.0);
    for (k, span) in spans.iter().enumerate() {
        let layer = k + skip;
        let ops = layer_ops_for(m, layer, mode);
        if ops == 0.0 {
            continue;
        }
        let level = geo.levels[k];
        // a conv's output sits at its input stratum
        let useful = tile as f64 * ((level - geo.out_level) as f64).exp2();
        block_ops += ops * (span.len as f64).powi(2);
        frame_ops += ops * useful * useful;
    }
    if frame_ops == 0.0 {
        return Ok(1.0);
    }
    Ok(block_ops / frame_ops)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandwidthReport {
    pub input_bytes_per_frame: f64,
    pub output_bytes_per_frame: f64,
    pub nbr: f64,
    pub gb_per_s: f64,
}

/// DRAM traffic of a block plan: every block reads its (clamped) input
/// window once and the output frame is written once.
pub fn block_bandwidth(plan: &BlockPlan, fps: f64, bytes_per_pixel_in: f64, bytes_per_pixel_out: f64) -> BandwidthReport {
    let (w, h) = plan.frame_in;
    let col_reads: usize = plan.cols.iter().map(|c| c.clamped_reads(plan.x_i, w)).sum();
    let row_reads: usize = plan.rows.iter().map(|r| r.clamped_reads(plan.x_i, h)).sum();
    let input = (col_reads * row_reads) as f64 * bytes_per_pixel_in;
    let output = (plan.frame_out.0 * plan.frame_out.1) as f64 * bytes_per_pixel_out;
    BandwidthReport {
        input_bytes_per_frame: input,
        output_bytes_per_frame: output,
        nbr: (input + output) / output,
        gb_per_s: (input + output) * fps / 1e9,
    }
}

/// Assembles kept output tiles into a frame. Each entry is a grid position
/// and that block's kept tile.
pub fn stitch(blocks: Vec<((usize, usize), Tensor)>, plan: &BlockPlan) -> Result<Tensor, BlockFlowError> {
    let channels = blocks.first().map_or(0, |(_, t)| t.channels);
    let mut out = Tensor::zeros(plan.frame_out.0, plan.frame_out.1, channels);
    let mut seen = vec![false; plan.block_count()];
    for ((row, col), tile) in blocks {
        let (Some(rb), Some(cb)) = (plan.rows.get(row), plan.cols.get(col)) else {
            return Err(BlockFlowError::Stitch { row, col, what: "is outside the grid" });
        };
        let slot = &mut seen[row * plan.cols.len() + col];
        if *slot {
            return Err(BlockFlowError::Stitch { row, col, what: "appears twice" });
        }
        *slot = true;
        if tile.width != cb.keep_len || tile.height != rb.keep_len || tile.channels != channels {
            return Err(BlockFlowError::Stitch { row, col, what: "has the wrong shape" });
        }
        for y in 0..tile.height {
            let dst = out.index(cb.keep_start, rb.keep_start + y, 0);
            let src = tile.index(0, y, 0);
            let n = tile.width * channels;
            out.data[dst..dst + n].copy_from_slice(&tile.data[src..src + n]);
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let (row, col) = (i / plan.cols.len(), i % plan.cols.len());
        return Err(BlockFlowError::Stitch { row, col, what: "is missing" });
    }
    Ok(out)
}

/// Cuts a frame at output resolution into the plan's kept tiles.
pub fn crop_tiles(frame: &Tensor, plan: &BlockPlan) -> Vec<((usize, usize), Tensor)> {
    plan.positions()
        .map(|(r, c)| {
            let (rb, cb) = (plan.rows[r], plan.cols[c]);
            ((r, c), frame.crop(cb.keep_start, rb.keep_start, cb.keep_len, rb.keep_len))
        })
        .collect()
}

/// Effect of cutting a model into two sub-models after `layer`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitReport {
    pub ncr_whole: f64,
    /// Recomputation of the two sub-models together, relative to the same
    /// intrinsic work.
    pub ncr_split: f64,
    /// Extra DRAM bytes per frame: the cut feature map written and read back.
    pub intermediate_bytes_per_frame: f64,
}

pub fn split_report(
    m: &ModelIR,
    layer: usize,
    frame: (usize, usize),
    x_i: usize,
    bits_per_feature: u32,
) -> Result<SplitReport, BlockFlowError> {
    let (head, tail) = m
        .split_at(layer)
        .map_err(|e| BlockFlowError::Unsupported(e.to_string()))?;
    let whole_ops = effective_ops(m, x_i)?;
    let head_ops = effective_ops(&head, x_i)?;
    let tail_ops = effective_ops(&tail, x_i)?;
    let intrinsic = intrinsic_ops(m);
    // per-output-pixel work of the head is measured at its own output stratum
    let head_scale = (2.0 * (head.output_level() - m.output_level()) as f64).exp2();
    let ncr_split = (head_ops * head_scale + tail_ops) / intrinsic;

    let cut = &m.layers[layer];
    let level = cut.out_level();
    let (w, h) = frame;
    let pixels = (w * h) as f64 * (2.0 * level as f64).exp2();
    let bytes = 2.0 * crate::modelir::pad_channels(cut.out_ch) as f64 * bits_per_feature as f64 / 8.0 * pixels;
    Ok(SplitReport { ncr_whole: whole_ops / intrinsic, ncr_split, intermediate_bytes_per_frame: bytes })
}

fn intrinsic_ops(m: &ModelIR) -> f64 {
    crate::modelir::intrinsic_complexity(m, CountMode::Hardware).intrinsic_kop_per_pixel
}

fn effective_ops(m: &ModelIR, x_i: usize) -> Result<f64, BlockFlowError> {
    Ok(intrinsic_ops(m) * ncr_discrete(m, x_i)?)
}

#[cfg(test)]
mod tests;
