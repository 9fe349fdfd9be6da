//! Binary program files.
//!
//! Layout (little-endian): magic `FBISA\0`, `u16` version, config block,
//! sub-model table, then fixed 16-byte instruction records:
//!
//! | byte  | content                                                     |
//! |-------|-------------------------------------------------------------|
//! | 0     | opcode (bits 0-1), type (2), pool (3-4), act (5)            |
//! | 1     | leaf-modules                                                |
//! | 2, 3  | output tiles x, y                                           |
//! | 4     | src (low nibble), dst (high nibble)                         |
//! | 5     | srcS (low nibble), dstS (high nibble)                       |
//! | 6-9   | parameter restart address                                   |
//! | 10-13 | qw, qb, qs, qo                                              |
//! | 14-15 | reserved, zero                                              |
//!
//! Buffer nibbles: 0 none, 1-3 BB0-BB2, 4 DI, 5 DO. A format byte holds
//! the signedness in bit 7, a 7-bit width flag in bit 6 and `n + 8` in
//! bits 0-5; `0xFF` marks an absent format.

use thiserror::Error;

use super::{BufId, InferType, Instruction, MachineConfig, Opcode, Program, StreamSpec};
use crate::fixedpoint::QFormat;
use crate::modelir::{Activation, PoolKind};

pub const RECORD_BYTES: usize = 16;
const MAGIC: &[u8; 6] = b"FBISA\0";
const VERSION: u16 = 1;
const NO_FORMAT: u8 = 0xFF;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BinaryError {
    #[error("not an FBISA program (bad magic)")]
    Magic,
    #[error("unsupported program version {0}")]
    Version(u16),
    #[error("file ends inside {0}")]
    Truncated(&'static str),
    #[error("instruction {index}: {msg}")]
    Record { index: usize, msg: String },
    #[error("format {0} cannot be encoded (width must be 7 or 8, n in -8..=55)")]
    Format(QFormat),
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

fn fmt_byte(q: Option<QFormat>) -> Result<u8, BinaryError> {
    let Some(q) = q else { return Ok(NO_FORMAT) };
    if !(7..=8).contains(&q.width) || !(-8..=55).contains(&q.frac_bits) {
        return Err(BinaryError::Format(q));
    }
    Ok((u8::from(q.signed) << 7) | (u8::from(q.width == 7) << 6) | (q.frac_bits + 8) as u8)
}

fn byte_fmt(b: u8) -> Option<QFormat> {
    if b == NO_FORMAT {
        return None;
    }
    let width = if b & 0x40 != 0 { 7 } else { 8 };
    Some(QFormat { signed: b & 0x80 != 0, frac_bits: (b & 0x3F) as i32 - 8, width })
}

fn buf_nibble(b: Option<BufId>) -> u8 {
    match b {
        None => 0,
        Some(BufId::BB0) => 1,
        Some(BufId::BB1) => 2,
        Some(BufId::BB2) => 3,
        Some(BufId::DI) => 4,
        Some(BufId::DO) => 5,
    }
}

fn nibble_buf(n: u8) -> Result<Option<BufId>, String> {
    Ok(match n {
        0 => None,
        1 => Some(BufId::BB0),
        2 => Some(BufId::BB1),
        3 => Some(BufId::BB2),
        4 => Some(BufId::DI),
        5 => Some(BufId::DO),
        _ => return Err(format!("unknown buffer code {n}")),
    })
}

fn encode_record(ins: &Instruction) -> Result<[u8; RECORD_BYTES], BinaryError> {
    let mut r = [0u8; RECORD_BYTES];
    let op = match ins.opcode {
        Opcode::Conv => 0,
        Opcode::Er => 1,
        Opcode::Upx2 => 2,
        Opcode::Dnx2 => 3,
    };
    let pool = match ins.pool {
        None => 0,
        Some(PoolKind::Stride) => 1,
        Some(PoolKind::Max) => 2,
    };
    let ty = u8::from(ins.infer == InferType::ZeroPadded);
    let act = u8::from(ins.act == Activation::ReLU);
    r[0] = op | (ty << 2) | (pool << 3) | (act << 5);
    r[1] = ins.lm;
    let tiles = |v: u16| u8::try_from(v).map_err(|_| BinaryError::Record { index: 0, msg: format!("{v} tiles") });
    r[2] = tiles(ins.out.0)?;
    r[3] = tiles(ins.out.1)?;
    r[4] = buf_nibble(Some(ins.src)) | (buf_nibble(ins.dst) << 4);
    r[5] = buf_nibble(ins.src_s) | (buf_nibble(ins.dst_s) << 4);
    r[6..10].copy_from_slice(&ins.param.to_le_bytes());
    r[10] = fmt_byte(Some(ins.qw))?;
    r[11] = fmt_byte(Some(ins.qb))?;
    r[12] = fmt_byte(ins.qs)?;
    r[13] = fmt_byte(Some(ins.qo))?;
    Ok(r)
}

fn decode_record(r: &[u8]) -> Result<Instruction, String> {
    let opcode = match r[0] & 3 {
        0 => Opcode::Conv,
        1 => Opcode::Er,
        2 => Opcode::Upx2,
        _ => Opcode::Dnx2,
    };
    let pool = match (r[0] >> 3) & 3 {
        0 => None,
        1 => Some(PoolKind::Stride),
        2 => Some(PoolKind::Max),
        _ => return Err("unknown pool code".into()),
    };
    if r[0] >> 6 != 0 || r[14] != 0 || r[15] != 0 {
        return Err("reserved bits set".into());
    }
    let q = |b: u8, what: &str| byte_fmt(b).ok_or_else(|| format!("{what} format missing"));
    Ok(Instruction {
        opcode,
        lm: r[1],
        out: (r[2] as u16, r[3] as u16),
        src: nibble_buf(r[4] & 15)?.ok_or("missing src")?,
        dst: nibble_buf(r[4] >> 4)?,
        src_s: nibble_buf(r[5] & 15)?,
        dst_s: nibble_buf(r[5] >> 4)?,
        param: u32::from_le_bytes(r[6..10].try_into().expect("4 bytes")),
        qw: q(r[10], "qw")?,
        qb: q(r[11], "qb")?,
        qs: byte_fmt(r[12]),
        qo: q(r[13], "qo")?,
        infer: if (r[0] >> 2) & 1 == 1 { InferType::ZeroPadded } else { InferType::Truncated },
        pool,
        act: if (r[0] >> 5) & 1 == 1 { Activation::ReLU } else { Activation::None },
    })
}

pub fn encode_program(p: &Program) -> Result<Vec<u8>, BinaryError> {
    let mut out = Vec::with_capacity(32 + p.instructions.len() * RECORD_BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&p.config.x_i.to_le_bytes());
    out.extend_from_slice(&p.config.channels.to_le_bytes());
    out.push(p.config.bb_count);
    out.extend_from_slice(&p.config.param_mem_bytes.to_le_bytes());
    out.push(fmt_byte(Some(p.input.fmt))?);
    out.extend_from_slice(&p.input.channels.to_le_bytes());
    out.push(u8::from(p.input.unshuffle));
    out.extend_from_slice(&p.output_channels.to_le_bytes());
    out.extend_from_slice(&(p.submodels.len() as u32).to_le_bytes());
    for &b in &p.submodels {
        out.extend_from_slice(&(b as u32).to_le_bytes());
    }
    out.extend_from_slice(&(p.instructions.len() as u32).to_le_bytes());
    for (index, ins) in p.instructions.iter().enumerate() {
        let r = encode_record(ins).map_err(|e| match e {
            BinaryError::Record { msg, .. } => BinaryError::Record { index, msg },
            e => e,
        })?;
        out.extend_from_slice(&r);
    }
    Ok(out)
}

pub fn decode_program(bytes: &[u8]) -> Result<Program, BinaryError> {
    let mut at = 0usize;
    let mut take = |n: usize, what: &'static str| -> Result<&[u8], BinaryError> {
        let s = bytes.get(at..at + n).ok_or(BinaryError::Truncated(what))?;
        at += n;
        Ok(s)
    };
    if take(6, "header")? != MAGIC {
        return Err(BinaryError::Magic);
    }
    let u16_at = |s: &[u8]| u16::from_le_bytes(s.try_into().expect("2 bytes"));
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let version = u16_at(take(2, "header")?);
    if version != VERSION {
        return Err(BinaryError::Version(version));
    }
    let config = MachineConfig {
        x_i: u16_at(take(2, "config")?),
        channels: u16_at(take(2, "config")?),
        bb_count: take(1, "config")?[0],
        param_mem_bytes: u32_at(take(4, "config")?),
    };
    let fmt = byte_fmt(take(1, "config")?[0]).ok_or(BinaryError::Truncated("input format"))?;
    let channels = u16_at(take(2, "config")?);
    let unshuffle = take(1, "config")?[0] != 0;
    let output_channels = u16_at(take(2, "config")?);
    let nsub = u32_at(take(4, "sub-model table")?) as usize;
    let mut submodels = Vec::with_capacity(nsub.min(1024));
    for _ in 0..nsub {
        submodels.push(u32_at(take(4, "sub-model table")?) as usize);
    }
    let count = u32_at(take(4, "instruction count")?) as usize;
    let mut instructions = Vec::with_capacity(count.min(4096));
    for index in 0..count {
        let r = take(RECORD_BYTES, "instruction records")?;
        instructions.push(decode_record(r).map_err(|msg| BinaryError::Record { index, msg })?);
    }
    if at != bytes.len() {
        return Err(BinaryError::Trailing(bytes.len() - at));
    }
    Ok(Program {
        config,
        input: StreamSpec { fmt, channels, unshuffle },
        output_channels,
        instructions,
        submodels,
    })
}
