//! Eight-bank block buffer layout.
//!
//! A block buffer is addressed in 4x2-pixel tiles, each stored whole in one
//! of eight banks. Accesses issued in the same cycle to one buffer must hit
//! distinct banks.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::fbisa::{BufId, Opcode};

pub const BANKS: usize = 8;
pub const TILE_W: usize = 4;
pub const TILE_H: usize = 2;
const TILES_PER_ROW: i64 = (128 / TILE_W) as i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BankMapping {
    /// Raster tile order modulo the bank count.
    Normal,
    /// Every other tile row pair is rotated so a 2x2 tile square spans four
    /// banks.
    Interleaved,
}

impl BankMapping {
    pub fn bank(&self, (tx, ty): (i64, i64)) -> usize {
        let b = match self {
            BankMapping::Normal => tx + TILES_PER_ROW * ty,
            BankMapping::Interleaved => tx + 2 * ty + ty.div_euclid(2),
        };
        b.rem_euclid(BANKS as i64) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AccessKind {
    Read,
    Write,
}

/// One tile access to a block buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Access {
    pub cycle: u64,
    pub instr: usize,
    pub opcode: Opcode,
    pub buf: BufId,
    pub kind: AccessKind,
    /// Tile coordinates inside the buffer.
    pub tile: (i64, i64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BankConflict {
    pub cycle: u64,
    pub buf: BufId,
    pub bank: usize,
    pub tiles: Vec<(i64, i64)>,
}

/// Tiles written in one cycle when UPX2 shuffles the conv tile `(tx, ty)`:
/// a 2x2 square of output tiles.
pub fn upx2_write_set((tx, ty): (i64, i64)) -> [(i64, i64); 4] {
    [(2 * tx, 2 * ty), (2 * tx + 1, 2 * ty), (2 * tx, 2 * ty + 1), (2 * tx + 1, 2 * ty + 1)]
}

/// Cycles where distinct tiles of one buffer land in the same bank.
pub fn bank_trace_check(trace: &[Access], mapping: BankMapping) -> Vec<BankConflict> {
    let mut groups: BTreeMap<(u64, BufId), Vec<(i64, i64)>> = BTreeMap::new();
    for a in trace {
        let tiles = groups.entry((a.cycle, a.buf)).or_default();
        if !tiles.contains(&a.tile) {
            tiles.push(a.tile);
        }
    }
    let mut out = Vec::new();
    for ((cycle, buf), tiles) in groups {
        let mut by_bank: BTreeMap<usize, Vec<(i64, i64)>> = BTreeMap::new();
        for t in tiles {
            by_bank.entry(mapping.bank(t)).or_default().push(t);
        }
        for (bank, tiles) in by_bank {
            if tiles.len() > 1 {
                out.push(BankConflict { cycle, buf, bank, tiles });
            }
        }
    }
    out
}
