use serde::Serialize;

use super::EngineModel;
use crate::blockflow::{block_bandwidth, BandwidthReport, BlockPlan};
use crate::fbisa::{Opcode, Program};
use crate::paramcodec::decode_cycles;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct InstrTiming {
    /// Compute cycles: one leaf-module per tile per cycle.
    pub ciu: u64,
    /// Parameter decoding cycles.
    pub idu: u64,
    pub idu_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerfReport {
    pub instructions: Vec<InstrTiming>,
    pub cycles_per_block: u64,
    pub blocks: usize,
    pub cycles_per_frame: u64,
    pub fps: f64,
    /// Highest frame rate the clock sustains.
    pub max_fps: f64,
    pub cycles_per_second: f64,
    pub realtime: bool,
    pub dram: BandwidthReport,
    /// Computed pixel work over the work of one pass per frame pixel.
    pub ncr_effective: f64,
    /// Fraction of cycles the compute unit is busy.
    pub utilization: f64,
}

/// Two-stage pipeline: the decoder fetches instruction `i + 1`'s parameters
/// while the compute unit runs instruction `i`.
pub fn perf(p: &Program, plan: &BlockPlan, engine: &EngineModel, fps: f64) -> PerfReport {
    let instructions: Vec<InstrTiming> = p
        .instructions
        .iter()
        .map(|i| {
            let ciu = i.tiles() * i.lm as u64;
            let idu = decode_cycles(i.lm as usize);
            InstrTiming { ciu, idu, idu_bound: idu > ciu }
        })
        .collect();
    let cycles_per_block = match instructions.as_slice() {
        [] => 0,
        [first, ..] => {
            let overlap: u64 = instructions.windows(2).map(|w| w[0].ciu.max(w[1].idu)).sum();
            first.idu + overlap + instructions.last().expect("nonempty").ciu
        }
    };
    let blocks = plan.block_count();
    let cycles_per_frame = cycles_per_block * blocks as u64;
    let cycles_per_second = cycles_per_frame as f64 * fps;

    let mut level = 0i32;
    let mut levels = Vec::with_capacity(p.len());
    for i in &p.instructions {
        levels.push(level);
        level += match i.opcode {
            Opcode::Upx2 => 1,
            Opcode::Dnx2 => -1,
            _ => 0,
        };
    }
    let out_px = (plan.frame_out.0 * plan.frame_out.1) as f64;
    let ideal: f64 = p
        .instructions
        .iter()
        .zip(&levels)
        .map(|(i, &l)| i.lm as f64 * out_px * (2.0 * (l - level) as f64).exp2() / 8.0)
        .sum();
    let ciu_total: u64 = instructions.iter().map(|t| t.ciu).sum::<u64>() * blocks as u64;

    PerfReport {
        instructions,
        cycles_per_block,
        blocks,
        cycles_per_frame,
        fps,
        max_fps: if cycles_per_frame == 0 { f64::INFINITY } else { engine.clock_hz / cycles_per_frame as f64 },
        cycles_per_second,
        realtime: cycles_per_second <= engine.clock_hz,
        dram: block_bandwidth(plan, fps, p.input.channels as f64, p.output_channels as f64),
        ncr_effective: if ideal > 0.0 { ciu_total as f64 / ideal } else { 1.0 },
        utilization: if cycles_per_frame > 0 { ciu_total as f64 / cycles_per_frame as f64 } else { 0.0 },
    }
}
