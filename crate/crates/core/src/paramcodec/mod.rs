//! Entropy-coded parameter container.
//!
//! Parameters of one instruction form a restart segment holding up to four
//! leaf-modules. Each segment is spread over 21 streams: 18 carry the 3x3
//! weights (one per filter position and 16-output-channel half), two carry
//! the 1x1 weights of ER leaf-modules, and one carries biases. Every stream
//! segment starts with its own JPEG-style Huffman table followed by
//! category codes and raw value bits, MSB first.
//!
//! A segment is addressed by its bias-stream byte offset `A`; its weight
//! streams start at `8A`. Shorter streams are zero-padded so every stream
//! of the next segment again starts at the synchronized offset.

mod bits;
mod huffman;

pub use bits::{BitReader, BitWriter};
pub use huffman::{category, entropy_bits, histogram, HuffTable, CATEGORIES};

use serde::Serialize;
use thiserror::Error;

use crate::par;

pub const STREAMS: usize = 21;
pub const W3_STREAMS: usize = 18;
pub const W1_STREAMS: [usize; 2] = [18, 19];
pub const BIAS_STREAM: usize = 20;
/// Coefficients each weight stream receives per leaf-module.
pub const COEFFS_PER_STREAM: usize = 512;
/// Weight-stream offsets are this multiple of the bias-stream offset.
pub const WEIGHT_ADDR_SCALE: usize = 8;
/// 1288 KB of on-chip parameter memory.
pub const PARAM_MEM_BYTES: usize = 1_318_912;
/// Coefficients each stream decoder emits per cycle.
pub const DECODE_RATE: usize = 2;
pub const LANE: usize = 32;

const MAGIC: &[u8; 4] = b"FBPC";
const VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("stream {stream}: bit pattern matches no Huffman code")]
    CorruptPrefix { stream: usize },
    #[error("stream {stream}: data ends before the segment is complete")]
    Truncated { stream: usize },
    #[error("leaf-module {index} requested but segment holds {count}")]
    LeafIndex { index: usize, count: usize },
    #[error("no restart segment at address {0}")]
    UnknownRestart(u32),
    #[error("container is {size} bytes, {overflow} over the {budget}-byte parameter memory")]
    Capacity { size: usize, budget: usize, overflow: usize },
    #[error("leaf-module shape: {0}")]
    Shape(String),
    #[error("malformed container: {0}")]
    Container(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SegmentKind {
    /// 3x3 weights and 32 biases per leaf-module.
    Conv,
    /// 3x3 and 1x1 weights and 64 biases per leaf-module.
    Er,
}

impl SegmentKind {
    pub fn bias_per_leaf(self) -> usize {
        match self {
            SegmentKind::Conv => LANE,
            SegmentKind::Er => 2 * LANE,
        }
    }
}

/// Integer parameters of one leaf-module.
///
/// `w3` is `[out 32][in 32][ky][kx]`, `w1` is `[out 32][in 32]` (ER only).
/// ER biases are the 32 expansion biases followed by the 32 reduction
/// biases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LeafParams {
    pub w3: Vec<i32>,
    pub w1: Vec<i32>,
    pub bias: Vec<i32>,
}

impl LeafParams {
    pub fn zeros(kind: SegmentKind) -> Self {
        LeafParams {
            w3: vec![0; 9 * LANE * LANE],
            w1: if kind == SegmentKind::Er { vec![0; LANE * LANE] } else { Vec::new() },
            bias: vec![0; kind.bias_per_leaf()],
        }
    }

    fn check(&self, kind: SegmentKind) -> Result<(), CodecError> {
        let want = LeafParams::zeros(kind);
        if self.w3.len() != want.w3.len() || self.w1.len() != want.w1.len() || self.bias.len() != want.bias.len() {
            return Err(CodecError::Shape(format!(
                "{:?} leaf needs {}+{}+{} values, got {}+{}+{}",
                kind,
                want.w3.len(),
                want.w1.len(),
                want.bias.len(),
                self.w3.len(),
                self.w1.len(),
                self.bias.len()
            )));
        }
        let all = self.w3.iter().chain(&self.w1).chain(&self.bias);
        if let Some(v) = all.into_iter().find(|v| v.unsigned_abs() >= 1 << 15) {
            return Err(CodecError::Shape(format!("value {v} exceeds 15 magnitude bits")));
        }
        Ok(())
    }

    /// The values this leaf contributes to stream `s`.
    fn stream_values(&self, s: usize) -> Vec<i32> {
        match s {
            0..W3_STREAMS => {
                let (pos, half) = (s / 2, s % 2);
                let mut v = Vec::with_capacity(COEFFS_PER_STREAM);
                for o in half * 16..half * 16 + 16 {
                    for i in 0..LANE {
                        v.push(self.w3[(o * LANE + i) * 9 + pos]);
                    }
                }
                v
            }
            18 | 19 if !self.w1.is_empty() => {
                let half = s - 18;
                self.w1[half * 16 * LANE..(half + 1) * 16 * LANE].to_vec()
            }
            BIAS_STREAM => self.bias.clone(),
            _ => Vec::new(),
        }
    }

    fn set_stream_values(&mut self, s: usize, v: &[i32]) {
        match s {
            0..W3_STREAMS => {
                let (pos, half) = (s / 2, s % 2);
                let mut k = 0;
                for o in half * 16..half * 16 + 16 {
                    for i in 0..LANE {
                        self.w3[(o * LANE + i) * 9 + pos] = v[k];
                        k += 1;
                    }
                }
            }
            18 | 19 => {
                let half = s - 18;
                self.w1[half * 16 * LANE..(half + 1) * 16 * LANE].copy_from_slice(v);
            }
            _ => self.bias.copy_from_slice(v),
        }
    }
}

/// Parameters of one instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub leaves: Vec<LeafParams>,
}

impl Segment {
    fn symbols_per_leaf(&self, s: usize) -> usize {
        match s {
            0..W3_STREAMS => COEFFS_PER_STREAM,
            18 | 19 if self.kind == SegmentKind::Er => COEFFS_PER_STREAM,
            BIAS_STREAM => self.kind.bias_per_leaf(),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DirEntry {
    /// Bias-stream byte offset; the instruction's restart attribute.
    pub bias_addr: u32,
    pub leaf_count: u8,
    pub kind: SegmentKind,
}

impl DirEntry {
    pub fn weight_addr(&self) -> usize {
        self.bias_addr as usize * WEIGHT_ADDR_SCALE
    }

    fn stream_offset(&self, s: usize) -> usize {
        if s == BIAS_STREAM {
            self.bias_addr as usize
        } else {
            self.weight_addr()
        }
    }

    fn symbols(&self, s: usize) -> usize {
        let seg = Segment { kind: self.kind, leaves: Vec::new() };
        seg.symbols_per_leaf(s) * self.leaf_count as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamContainer {
    pub streams: Vec<Vec<u8>>,
    pub directory: Vec<DirEntry>,
}

/// Size accounting of one stream segment.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StreamStats {
    pub symbols: usize,
    pub entropy_bits: f64,
    pub code_bits: u64,
    pub value_bits: u64,
    pub table_bytes: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct EncodeReport {
    /// Parameters at their raw bit width.
    pub raw_bytes: usize,
    /// Coded bytes before synchronization padding.
    pub payload_bytes: usize,
    /// Total container stream bytes including padding.
    pub container_bytes: usize,
    pub entropy_bits: f64,
    pub code_bits: u64,
    pub value_bits: u64,
    pub segments: Vec<[StreamStats; STREAMS]>,
}

impl EncodeReport {
    pub fn compression_ratio(&self) -> f64 {
        self.raw_bytes as f64 / self.container_bytes.max(1) as f64
    }

    /// Category-code bits spent above the Shannon bound, relative.
    pub fn shannon_gap(&self) -> f64 {
        if self.entropy_bits == 0.0 {
            return 0.0;
        }
        self.code_bits as f64 / self.entropy_bits - 1.0
    }
}

fn encode_stream_segment(values: &[i32]) -> (Vec<u8>, StreamStats) {
    if values.is_empty() {
        return (Vec::new(), StreamStats::default());
    }
    let h = histogram(values);
    let table = HuffTable::build(&h);
    let mut out = Vec::with_capacity(table.header_len() + values.len());
    table.write_header(&mut out);
    let mut w = BitWriter::new();
    for &v in values {
        table.encode(v, &mut w).expect("table covers its own histogram");
    }
    let code_bits = table.coded_bits(&h);
    let value_bits = (0..CATEGORIES).map(|c| h[c] * c as u64).sum();
    out.extend(w.finish());
    let stats = StreamStats {
        symbols: values.len(),
        entropy_bits: entropy_bits(&h),
        code_bits,
        value_bits,
        table_bytes: table.header_len(),
        bytes: out.len(),
    };
    (out, stats)
}

/// Encodes one segment per instruction, in program order.
///
/// `param_bits` is the raw parameter width used for the compression
/// report. Fails when the padded container exceeds `budget` bytes.
pub fn encode_params(
    segments: &[Segment],
    param_bits: u32,
    budget: usize,
) -> Result<(ParamContainer, EncodeReport), CodecError> {
    let mut streams = vec![Vec::new(); STREAMS];
    let mut directory = Vec::with_capacity(segments.len());
    let mut report = EncodeReport::default();
    let mut bias_addr = 0usize;
    for seg in segments {
        if seg.leaves.is_empty() || seg.leaves.len() > 4 {
            return Err(CodecError::Shape(format!("segment with {} leaf-modules", seg.leaves.len())));
        }
        for leaf in &seg.leaves {
            leaf.check(seg.kind)?;
        }
        let coded = par::map(&(0..STREAMS).collect::<Vec<_>>(), |&s| {
            let values: Vec<i32> = seg.leaves.iter().flat_map(|l| l.stream_values(s)).collect();
            encode_stream_segment(&values)
        });
        let bias_len = coded[BIAS_STREAM].0.len();
        let weight_len = coded[..BIAS_STREAM].iter().map(|(b, _)| b.len()).max().unwrap_or(0);
        let span = bias_len.max(weight_len.div_ceil(WEIGHT_ADDR_SCALE)).max(1);

        let mut stats = [StreamStats::default(); STREAMS];
        for (s, (bytes, st)) in coded.into_iter().enumerate() {
            let sync = if s == BIAS_STREAM { span } else { span * WEIGHT_ADDR_SCALE };
            report.payload_bytes += bytes.len();
            report.entropy_bits += st.entropy_bits;
            report.code_bits += st.code_bits;
            report.value_bits += st.value_bits;
            report.raw_bytes += st.symbols * param_bits as usize;
            let stream = &mut streams[s];
            let end = stream.len() + sync;
            stream.extend_from_slice(&bytes);
            stream.resize(end, 0);
            stats[s] = st;
        }
        report.segments.push(stats);
        let addr = u32::try_from(bias_addr).map_err(|_| CodecError::Container("address overflow".into()))?;
        directory.push(DirEntry { bias_addr: addr, leaf_count: seg.leaves.len() as u8, kind: seg.kind });
        bias_addr += span;
    }
    report.raw_bytes = report.raw_bytes.div_ceil(8);
    report.container_bytes = streams.iter().map(Vec::len).sum();
    if report.container_bytes > budget {
        return Err(CodecError::Capacity {
            size: report.container_bytes,
            budget,
            overflow: report.container_bytes - budget,
        });
    }
    Ok((ParamContainer { streams, directory }, report))
}

/// Decoder cycles for a segment: each stream emits [`DECODE_RATE`]
/// coefficients per cycle and all 21 run in parallel.
pub fn decode_cycles(leaf_count: usize) -> u64 {
    (leaf_count * COEFFS_PER_STREAM / DECODE_RATE) as u64
}

impl ParamContainer {
    pub fn entry(&self, restart_attr: u32) -> Result<&DirEntry, CodecError> {
        self.directory
            .iter()
            .find(|e| e.bias_addr == restart_attr)
            .ok_or(CodecError::UnknownRestart(restart_attr))
    }

    fn decode_stream(&self, e: &DirEntry, s: usize) -> Result<Vec<i32>, CodecError> {
        let n = e.symbols(s);
        if n == 0 {
            return Ok(Vec::new());
        }
        let bytes = self.streams[s].get(e.stream_offset(s)..).ok_or(CodecError::Truncated { stream: s })?;
        if bytes.len() < 16 {
            return Err(CodecError::Truncated { stream: s });
        }
        let counts: [u8; 16] = bytes[..16].try_into().expect("16 bytes");
        let nsym: usize = counts.iter().map(|&c| c as usize).sum();
        let symbols = bytes.get(16..16 + nsym).ok_or(CodecError::Truncated { stream: s })?;
        let table = HuffTable::from_jpeg(counts, symbols.to_vec()).ok_or(CodecError::CorruptPrefix { stream: s })?;
        let mut r = BitReader::new(&bytes[16 + nsym..]);
        (0..n)
            .map(|_| {
                table.decode(&mut r).map_err(|corrupt| {
                    if corrupt {
                        CodecError::CorruptPrefix { stream: s }
                    } else {
                        CodecError::Truncated { stream: s }
                    }
                })
            })
            .collect()
    }

    /// Decodes every leaf-module of the segment at `restart_attr`; the 21
    /// streams are decoded independently.
    pub fn decode_segment(&self, restart_attr: u32) -> Result<Segment, CodecError> {
        let e = *self.entry(restart_attr)?;
        let decoded = par::map(&(0..STREAMS).collect::<Vec<_>>(), |&s| self.decode_stream(&e, s));
        self.assemble(e, decoded)
    }

    /// [`decode_segment`](Self::decode_segment) with streams decoded in the
    /// given order on the calling thread.
    pub fn decode_segment_in_order(&self, restart_attr: u32, order: &[usize]) -> Result<Segment, CodecError> {
        let e = *self.entry(restart_attr)?;
        let mut decoded = vec![Ok(Vec::new()); STREAMS];
        for &s in order {
            decoded[s] = self.decode_stream(&e, s);
        }
        self.assemble(e, decoded)
    }

    fn assemble(&self, e: DirEntry, decoded: Vec<Result<Vec<i32>, CodecError>>) -> Result<Segment, CodecError> {
        let mut leaves = vec![LeafParams::zeros(e.kind); e.leaf_count as usize];
        let seg = Segment { kind: e.kind, leaves: Vec::new() };
        for (s, values) in decoded.into_iter().enumerate() {
            let values = values?;
            let per = seg.symbols_per_leaf(s);
            if per == 0 {
                continue;
            }
            for (k, leaf) in leaves.iter_mut().enumerate() {
                leaf.set_stream_values(s, &values[k * per..(k + 1) * per]);
            }
        }
        Ok(Segment { kind: e.kind, leaves })
    }

    pub fn decode_leaf_module(&self, restart_attr: u32, leaf_index: usize) -> Result<LeafParams, CodecError> {
        let e = self.entry(restart_attr)?;
        if leaf_index >= e.leaf_count as usize {
            return Err(CodecError::LeafIndex { index: leaf_index, count: e.leaf_count as usize });
        }
        let mut seg = self.decode_segment(restart_attr)?;
        Ok(seg.leaves.swap_remove(leaf_index))
    }

    pub fn total_bytes(&self) -> usize {
        self.streams.iter().map(Vec::len).sum()
    }

    /// Serializes as magic, version, directory and 21 length-prefixed
    /// streams, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_bytes() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.directory.len() as u32).to_le_bytes());
        for e in &self.directory {
            out.extend_from_slice(&e.bias_addr.to_le_bytes());
            out.push(e.leaf_count);
            out.push(match e.kind {
                SegmentKind::Conv => 0,
                SegmentKind::Er => 1,
            });
        }
        for s in &self.streams {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let bad = |m: &str| CodecError::Container(m.to_string());
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8], CodecError> {
            let s = bytes.get(at..at + n).ok_or_else(|| bad("unexpected end of file"))?;
            at += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let mut directory = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let bias_addr = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
            let leaf_count = take(1)?[0];
            let kind = match take(1)?[0] {
                0 => SegmentKind::Conv,
                1 => SegmentKind::Er,
                k => return Err(bad(&format!("unknown segment kind {k}"))),
            };
            if !(1..=4).contains(&leaf_count) {
                return Err(bad("leaf count outside 1..=4"));
            }
            directory.push(DirEntry { bias_addr, leaf_count, kind });
        }
        let mut streams = Vec::with_capacity(STREAMS);
        for _ in 0..STREAMS {
            let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            streams.push(take(len)?.to_vec());
        }
        if at != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(ParamContainer { streams, directory })
    }
}
