//! One-dimensional region arithmetic for truncated-pyramid inference.
//!
//! Blocks are square, so the same [`Span`] algebra applies to both axes.
//! Coordinates are absolute pixels at the stratum of the feature.

use super::BlockFlowError;
use crate::modelir::{LayerKind, ModelIR};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: i64,
    pub len: i64,
}

impl Span {
    pub fn new(start: i64, len: i64) -> Self {
        Span { start, len }
    }

    pub fn end(&self) -> i64 {
        self.start + self.len
    }

    pub fn contains(&self, other: &Span) -> bool {
        other.start >= self.start && other.end() <= self.end()
    }

    pub fn apply(&self, op: GeoOp) -> Span {
        match op {
            GeoOp::Keep => *self,
            GeoOp::Shrink(b) => Span::new(self.start + b as i64, self.len - 2 * b as i64),
            GeoOp::Up2 => Span::new(2 * self.start, 2 * self.len),
            // output pixel k pools the absolute pair (2k, 2k+1)
            GeoOp::Down2 => {
                let start = (self.start + 1).div_euclid(2);
                let end = self.end().div_euclid(2);
                Span::new(start, (end - start).max(0))
            }
        }
    }
}

/// Effect of one layer on the valid region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeoOp {
    Keep,
    Shrink(usize),
    Up2,
    Down2,
}

impl GeoOp {
    pub fn level_delta(&self) -> i32 {
        match self {
            GeoOp::Up2 => 1,
            GeoOp::Down2 => -1,
            _ => 0,
        }
    }
}

/// Region algebra for a chain of layers, starting at the block input.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainGeometry {
    pub ops: Vec<GeoOp>,
    /// Stratum (relative to the chain input) of each op's input.
    pub levels: Vec<i32>,
    /// Block input origins must be multiples of this.
    pub align: i64,
    /// Output stratum relative to the chain input.
    pub out_level: i32,
}

impl ChainGeometry {
    pub fn new(ops: Vec<GeoOp>) -> Self {
        let mut levels = Vec::with_capacity(ops.len());
        let mut level = 0i32;
        let mut align = 1i64;
        for op in &ops {
            levels.push(level);
            if *op == GeoOp::Down2 {
                // a shift of the block origin must move this stratum by an even amount
                align = align.max(1i64 << (1 - level).max(0));
            }
            level += op.level_delta();
        }
        if level < 0 {
            align = align.max(1i64 << (-level));
        }
        ChainGeometry { ops, levels, align, out_level: level }
    }

    /// Geometry of a model's block program: a leading pixel unshuffle is
    /// done by the host and does not belong to the chain.
    pub fn of_model(m: &ModelIR) -> Result<Self, BlockFlowError> {
        let skip = usize::from(m.unshuffles_input());
        let mut ops = Vec::new();
        for (i, l) in m.layers.iter().enumerate().skip(skip) {
            ops.push(match l.kind {
                LayerKind::Conv3x3 | LayerKind::ERModule { .. } => GeoOp::Shrink(1),
                LayerKind::Conv1x1 | LayerKind::ResidualAdd => GeoOp::Keep,
                LayerKind::PixelShuffleUp2 => GeoOp::Up2,
                LayerKind::Downsample2(_) => GeoOp::Down2,
                LayerKind::PixelUnshuffleDown2 => {
                    return Err(BlockFlowError::Unsupported(format!(
                        "layer {i}: pixel unshuffle inside the block chain"
                    )))
                }
            });
        }
        Ok(ChainGeometry::new(ops))
    }

    /// Output pixels the chain advances per aligned origin step.
    pub fn out_step(&self) -> i64 {
        scale_len(self.align, self.out_level)
    }

    /// Spans after every op for a block whose input covers `input`.
    pub fn propagate(&self, input: Span) -> Vec<Span> {
        let mut cur = input;
        self.ops
            .iter()
            .map(|&op| {
                cur = cur.apply(op);
                cur
            })
            .collect()
    }

    pub fn output(&self, input: Span) -> Span {
        self.propagate(input).last().copied().unwrap_or(input)
    }

    /// Largest output tile every aligned block can produce.
    pub fn tile(&self, x_i: usize) -> i64 {
        let out = self.output(Span::new(0, x_i as i64));
        out.len - (self.out_step() - 1)
    }
}

/// `len * 2^level`, requiring an integer result.
pub fn scale_len(len: i64, level: i32) -> i64 {
    if level >= 0 {
        len << level
    } else {
        debug_assert!(len % (1 << -level) == 0);
        len >> -level
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_chain_shrinks_by_two_per_layer() {
        let g = ChainGeometry::new(vec![GeoOp::Shrink(1); 6]);
        let spans = g.propagate(Span::new(0, 128));
        assert_eq!(spans.last().unwrap(), &Span::new(6, 116));
        assert_eq!(g.tile(128), 116);
        assert_eq!(g.align, 1);
    }

    #[test]
    fn downsampling_forces_alignment() {
        let g = ChainGeometry::new(vec![GeoOp::Shrink(1), GeoOp::Down2, GeoOp::Shrink(1), GeoOp::Up2]);
        assert_eq!(g.align, 2);
        assert_eq!(g.out_level, 0);
        assert_eq!(g.out_step(), 2);
        let net_down = ChainGeometry::new(vec![GeoOp::Down2, GeoOp::Down2]);
        assert_eq!(net_down.align, 4);
        assert_eq!(net_down.out_step(), 1);
    }

    #[test]
    fn shifting_an_aligned_origin_translates_the_output() {
        let g = ChainGeometry::new(vec![GeoOp::Shrink(1), GeoOp::Down2, GeoOp::Shrink(1), GeoOp::Up2, GeoOp::Shrink(1)]);
        let base = g.output(Span::new(0, 64));
        for k in -3i64..4 {
            let moved = g.output(Span::new(k * g.align, 64));
            assert_eq!(moved.len, base.len);
            assert_eq!(moved.start - base.start, k * g.out_step());
        }
    }
}
