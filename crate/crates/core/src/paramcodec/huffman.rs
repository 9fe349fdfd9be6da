use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::bits::{BitReader, BitWriter};

/// Number of magnitude categories (values up to 15 bits).
pub const CATEGORIES: usize = 16;
const MAX_CODE_LEN: usize = 16;

/// Bit length of `|v|`, the JPEG DC "SSSS" category.
pub fn category(v: i32) -> u32 {
    32 - v.unsigned_abs().leading_zeros()
}

/// Value bits following the category code: `v` itself when positive,
/// the one's complement of `|v|` when negative.
pub fn value_bits(v: i32, cat: u32) -> u32 {
    if v >= 0 {
        v as u32
    } else {
        (v + (1 << cat) - 1) as u32
    }
}

pub fn value_from_bits(bits: u32, cat: u32) -> i32 {
    if cat == 0 {
        0
    } else if bits >> (cat - 1) == 1 {
        bits as i32
    } else {
        bits as i32 - (1 << cat) + 1
    }
}

/// Canonical prefix code over magnitude categories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffTable {
    /// `counts[l]` codes of length `l + 1`.
    pub counts: [u8; MAX_CODE_LEN],
    /// Symbols in canonical order.
    pub symbols: Vec<u8>,
    lengths: [u8; CATEGORIES],
    codes: [u16; CATEGORIES],
}

impl HuffTable {
    /// Optimal code for the histogram; a lone symbol gets a 1-bit code.
    /// Categories with zero count get no code.
    pub fn build(histogram: &[u64; CATEGORIES]) -> Self {
        let mut lengths = [0u8; CATEGORIES];
        let used: Vec<usize> = (0..CATEGORIES).filter(|&s| histogram[s] > 0).collect();
        match used.len() {
            0 => {}
            1 => lengths[used[0]] = 1,
            _ => {
                // classic merge on (weight, node id); leaves record their depth
                let mut parent = vec![usize::MAX; 2 * CATEGORIES];
                let mut heap: BinaryHeap<Reverse<(u64, usize)>> =
                    used.iter().map(|&s| Reverse((histogram[s], s))).collect();
                let mut next = CATEGORIES;
                while heap.len() > 1 {
                    let Reverse((wa, a)) = heap.pop().expect("two nodes");
                    let Reverse((wb, b)) = heap.pop().expect("two nodes");
                    parent[a] = next;
                    parent[b] = next;
                    heap.push(Reverse((wa + wb, next)));
                    next += 1;
                }
                for &s in &used {
                    let mut depth = 0;
                    let mut node = s;
                    while parent[node] != usize::MAX {
                        node = parent[node];
                        depth += 1;
                    }
                    lengths[s] = depth;
                }
            }
        }
        Self::from_lengths(lengths)
    }

    fn from_lengths(lengths: [u8; CATEGORIES]) -> Self {
        let mut order: Vec<usize> = (0..CATEGORIES).filter(|&s| lengths[s] > 0).collect();
        order.sort_by_key(|&s| (lengths[s], s));
        let mut counts = [0u8; MAX_CODE_LEN];
        for &s in &order {
            counts[lengths[s] as usize - 1] += 1;
        }
        let symbols: Vec<u8> = order.iter().map(|&s| s as u8).collect();
        Self::from_jpeg(counts, symbols).expect("lengths from a valid code")
    }

    /// Rebuilds the canonical code from JPEG-style length counts.
    pub fn from_jpeg(counts: [u8; MAX_CODE_LEN], symbols: Vec<u8>) -> Option<Self> {
        let total: usize = counts.iter().map(|&c| c as usize).sum();
        if total != symbols.len() || symbols.iter().any(|&s| s as usize >= CATEGORIES) {
            return None;
        }
        let mut lengths = [0u8; CATEGORIES];
        let mut codes = [0u16; CATEGORIES];
        let mut code: u32 = 0;
        let mut k = 0;
        for (l, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                let s = symbols[k] as usize;
                if lengths[s] != 0 || code >= 1 << (l + 1) {
                    return None;
                }
                lengths[s] = l as u8 + 1;
                codes[s] = code as u16;
                code += 1;
                k += 1;
            }
            code <<= 1;
        }
        Some(HuffTable { counts, symbols, lengths, codes })
    }

    pub fn code_len(&self, cat: u32) -> u32 {
        self.lengths[cat as usize] as u32
    }

    /// Serialized size: 16 count bytes plus one byte per symbol.
    pub fn header_len(&self) -> usize {
        MAX_CODE_LEN + self.symbols.len()
    }

    pub fn write_header(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.counts);
        out.extend_from_slice(&self.symbols);
    }

    /// Encodes one value; `None` if its category has no code.
    pub fn encode(&self, v: i32, w: &mut BitWriter) -> Option<()> {
        let cat = category(v);
        let len = *self.lengths.get(cat as usize)?;
        if len == 0 {
            return None;
        }
        w.put(self.codes[cat as usize] as u32, len as u32);
        w.put(value_bits(v, cat), cat);
        Some(())
    }

    /// Decodes one value. `Err(true)` on a prefix matching no code,
    /// `Err(false)` when the input ends.
    pub fn decode(&self, r: &mut BitReader<'_>) -> Result<i32, bool> {
        let mut code: u32 = 0;
        let mut first: u32 = 0;
        let mut index = 0usize;
        for &count in &self.counts {
            code = (code << 1) | r.bit().ok_or(false)?;
            let count = count as u32;
            if code < first + count {
                let cat = self.symbols[index + (code - first) as usize] as u32;
                let bits = r.take(cat).ok_or(false)?;
                return Ok(value_from_bits(bits, cat));
            }
            index += count as usize;
            first = (first + count) << 1;
        }
        Err(true)
    }

    /// Entropy-coded bits for a histogram (category codes only).
    pub fn coded_bits(&self, histogram: &[u64; CATEGORIES]) -> u64 {
        (0..CATEGORIES).map(|s| histogram[s] * self.lengths[s] as u64).sum()
    }
}

/// Shannon entropy of the category distribution in bits (total).
pub fn entropy_bits(histogram: &[u64; CATEGORIES]) -> f64 {
    let n: u64 = histogram.iter().sum();
    if n == 0 {
        return 0.0;
    }
    histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -(c as f64) * p.log2()
        })
        .sum()
}

pub fn histogram(values: &[i32]) -> [u64; CATEGORIES] {
    let mut h = [0u64; CATEGORIES];
    for &v in values {
        h[category(v) as usize] += 1;
    }
    h
}
