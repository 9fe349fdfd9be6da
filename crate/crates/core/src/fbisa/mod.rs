//! Coarse-grained instruction set for block-based CNN inference.
//!
//! One instruction runs one layer (or a fused layer pair) over a whole
//! feature block held in a block buffer. Operands name buffers rather than
//! addresses: three physical block buffers `BB0..BB2`, each holding one
//! 32-channel feature block, plus the virtual input stream `DI` (read-only)
//! and output stream `DO` (write-only). Parameters are referenced by the
//! restart address of their segment in the parameter container.

mod asm;
mod binary;
mod compile;
mod validate;

pub use asm::{assemble, disassemble, AsmError};
pub use binary::{decode_program, encode_program, BinaryError, RECORD_BYTES};
pub use compile::{
    bind_params, build, compile, gather_segments, max_block_input, Build, CompileError, CompileOptions, LeafSource, ParamLayout,
    SegmentLayout,
};
pub use validate::{validate, Diagnostic, DiagnosticKind};

use serde::Serialize;

use crate::fixedpoint::QFormat;
use crate::modelir::{Activation, PoolKind};
use crate::paramcodec::PARAM_MEM_BYTES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Opcode {
    /// 3x3 convolution, optionally accumulating `srcS`.
    Conv,
    /// Expansion-reduction module: 3x3, ReLU, requantize, 1x1, plus `src`.
    Er,
    /// 3x3 convolution whose four output groups are pixel-shuffled 2x up.
    Upx2,
    /// 3x3 convolution followed by 2x2 pooling.
    Dnx2,
}

impl Opcode {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            Opcode::Conv => "CONV",
            Opcode::Er => "ER",
            Opcode::Upx2 => "UPX2",
            Opcode::Dnx2 => "DNX2",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Self> {
        match s {
            "CONV" => Some(Opcode::Conv),
            "ER" => Some(Opcode::Er),
            "UPX2" => Some(Opcode::Upx2),
            "DNX2" => Some(Opcode::Dnx2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum BufId {
    BB0,
    BB1,
    BB2,
    DI,
    DO,
}

impl BufId {
    pub const BLOCK_BUFFERS: [BufId; 3] = [BufId::BB0, BufId::BB1, BufId::BB2];

    pub fn name(&self) -> &'static str {
        match self {
            BufId::BB0 => "BB0",
            BufId::BB1 => "BB1",
            BufId::BB2 => "BB2",
            BufId::DI => "DI",
            BufId::DO => "DO",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "BB0" => Some(BufId::BB0),
            "BB1" => Some(BufId::BB1),
            "BB2" => Some(BufId::BB2),
            "DI" => Some(BufId::DI),
            "DO" => Some(BufId::DO),
            _ => None,
        }
    }

    pub fn is_block_buffer(&self) -> bool {
        matches!(self, BufId::BB0 | BufId::BB1 | BufId::BB2)
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize)]
pub enum InferType {
    /// Each 3x3 stage drops one border pixel; no padding is invented.
    #[default]
    Truncated,
    /// Borders read as zero and the extent is preserved.
    ZeroPadded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Instruction {
    pub opcode: Opcode,
    /// Leaf-modules (32->32 3x3 kernels) executed per tile.
    pub lm: u8,
    /// Output tiles (4x2 pixels) of the convolution stage.
    pub out: (u16, u16),
    pub src: BufId,
    pub dst: Option<BufId>,
    /// Feature added to the accumulator before requantization.
    pub src_s: Option<BufId>,
    /// Receives the requantized partial sum instead of a finished feature.
    pub dst_s: Option<BufId>,
    /// Restart address of the parameter segment.
    pub param: u32,
    pub qw: QFormat,
    pub qb: QFormat,
    pub qo: QFormat,
    /// ER intermediate format, or the format written to `dstS`.
    pub qs: Option<QFormat>,
    pub infer: InferType,
    pub pool: Option<PoolKind>,
    pub act: Activation,
}

impl Instruction {
    pub fn tiles(&self) -> u64 {
        self.out.0 as u64 * self.out.1 as u64
    }

    /// Buffers read by this instruction.
    pub fn reads(&self) -> impl Iterator<Item = BufId> {
        std::iter::once(self.src).chain(self.src_s)
    }

    /// Buffers written by this instruction.
    pub fn writes(&self) -> impl Iterator<Item = BufId> {
        self.dst.into_iter().chain(self.dst_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MachineConfig {
    pub x_i: u16,
    pub channels: u16,
    pub bb_count: u8,
    pub param_mem_bytes: u32,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig { x_i: 128, channels: 32, bb_count: 3, param_mem_bytes: PARAM_MEM_BYTES as u32 }
    }
}

/// Format of the block input stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StreamSpec {
    pub fmt: QFormat,
    pub channels: u16,
    /// Host packs 2x2 pixels into channels before streaming.
    pub unshuffle: bool,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec { fmt: QFormat::unsigned(8), channels: 3, unshuffle: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Program {
    pub config: MachineConfig,
    pub input: StreamSpec,
    /// Meaningful channels in each group written to `DO`.
    pub output_channels: u16,
    pub instructions: Vec<Instruction>,
    /// Instruction indices where a new sub-model begins.
    pub submodels: Vec<usize>,
}

impl Program {
    pub fn new(instructions: Vec<Instruction>) -> Self {
        Program {
            config: MachineConfig::default(),
            input: StreamSpec::default(),
            output_channels: 3,
            instructions,
            submodels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn leaf_modules(&self) -> usize {
        self.instructions.iter().map(|i| i.lm as usize).sum()
    }
}
