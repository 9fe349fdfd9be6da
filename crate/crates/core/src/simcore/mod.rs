//! Bit-exact functional simulator, frame-level oracle and performance model.
//!
//! [`run_block`] executes a program over one block the way the datapath
//! does: per 4x2 output tile, the leaf-modules of an instruction accumulate
//! in full precision before a single requantization. [`run_image`] runs
//! every block of a plan (on a worker pool when the `parallel` feature is
//! on) and stitches the kept tiles. [`oracle_frame`] computes the same
//! network layer by layer over the whole frame, which is what block-based
//! inference must reproduce exactly.

mod banks;
mod exec;
mod io;
mod oracle;
mod perf;

pub use banks::{bank_trace_check, upx2_write_set, Access, AccessKind, BankConflict, BankMapping, BANKS, TILE_H, TILE_W};
pub use exec::{run_block, run_block_traced, run_image, run_image_ordered, trace_block, BlockInput, Feature};
pub use io::{read_feature_dump, read_pnm, to_pixels, write_feature_dump, write_pnm, write_trace_csv, IoError};
pub use oracle::{oracle_frame, oracle_macs};
pub use perf::{perf, InstrTiming, PerfReport};

use std::collections::HashMap;

use thiserror::Error;

use crate::fbisa::{BufId, Program};
use crate::fixedpoint::QFormat;
use crate::paramcodec::{CodecError, ParamContainer, Segment};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("instruction {instr}: {buf} is read before it is written")]
    Unwritten { instr: usize, buf: &'static str },
    #[error("instruction {instr}: expected {expected:?} output tiles, program says {found:?}")]
    Tiles { instr: usize, expected: (u16, u16), found: (u16, u16) },
    #[error("instruction {instr}: {what}")]
    Format { instr: usize, what: String },
    #[error("instruction {instr}: {side}-pixel feature overflows the {cap}-pixel block buffer")]
    Capacity { instr: usize, side: usize, cap: usize },
    #[error("instruction {instr}: {msg}")]
    Operand { instr: usize, msg: String },
    #[error("no parameter segment at restart address {0}")]
    MissingParams(u32),
    #[error("block input is {found:?}, the plan needs {expected:?}")]
    InputShape { expected: (usize, usize), found: (usize, usize) },
    #[error("program never writes DO")]
    NoOutput,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("{0}")]
    Frame(String),
}

/// Multiplier budget and clock of the engine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineModel {
    pub lconv3x3_multipliers: u64,
    pub lconv1x1_multipliers: u64,
    pub clock_hz: f64,
}

impl Default for EngineModel {
    fn default() -> Self {
        EngineModel {
            lconv3x3_multipliers: 32 * 32 * 9 * 8,
            lconv1x1_multipliers: 32 * 32 * 8,
            clock_hz: 250e6,
        }
    }
}

impl EngineModel {
    pub fn with_clock(clock_hz: f64) -> Self {
        EngineModel { clock_hz, ..Self::default() }
    }

    pub fn multipliers(&self) -> u64 {
        self.lconv3x3_multipliers + self.lconv1x1_multipliers
    }

    /// Peak rate in operations per second (a multiply-accumulate counts two).
    pub fn peak_ops(&self) -> f64 {
        2.0 * self.multipliers() as f64 * self.clock_hz
    }

    /// Operations per output pixel the engine affords at a frame size and rate, in thousands.
    pub fn kop_per_pixel(&self, frame: (usize, usize), fps: f64) -> f64 {
        self.peak_ops() / ((frame.0 * frame.1) as f64 * fps) / 1e3
    }
}

/// Bytes held by one block buffer: 128x128 pixels of 32 8-bit channels.
pub const BLOCK_BUFFER_BYTES: usize = 128 * 128 * 32;

/// Parameter segments decoded once and looked up by restart address.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    segments: HashMap<u32, Segment>,
}

impl ParamStore {
    /// Decodes every segment the program references.
    pub fn decode(p: &Program, c: &ParamContainer) -> Result<Self, SimError> {
        let mut addrs: Vec<u32> = p.instructions.iter().map(|i| i.param).collect();
        addrs.sort_unstable();
        addrs.dedup();
        let decoded = crate::par::map(&addrs, |&a| c.decode_segment(a));
        let mut segments = HashMap::with_capacity(addrs.len());
        for (a, s) in addrs.into_iter().zip(decoded) {
            segments.insert(a, s?);
        }
        Ok(ParamStore { segments })
    }

    /// Pairs segments with the instructions that use them, in order.
    pub fn from_segments(p: &Program, segments: Vec<Segment>) -> Self {
        ParamStore { segments: p.instructions.iter().map(|i| i.param).zip(segments).collect() }
    }

    pub fn get(&self, addr: u32) -> Result<&Segment, SimError> {
        self.segments.get(&addr).ok_or(SimError::MissingParams(addr))
    }
}

fn buf_name(b: BufId) -> &'static str {
    b.name()
}

fn fmt_err(instr: usize, what: impl Into<String>) -> SimError {
    SimError::Format { instr, what: what.into() }
}

fn bias_shift(instr: usize, scale: i32, qb: QFormat) -> Result<u32, SimError> {
    u32::try_from(scale - qb.frac_bits)
        .map_err(|_| fmt_err(instr, format!("bias {qb} is finer than the accumulator scale {scale}")))
}

#[cfg(test)]
mod tests;
