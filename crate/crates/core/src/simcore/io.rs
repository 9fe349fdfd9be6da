//! Images, feature dumps and access traces.

use std::io::{self, BufRead, BufReader, Read, Write};

use thiserror::Error;

use super::banks::{Access, AccessKind, BankMapping};
use crate::fixedpoint::QFormat;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a binary PGM/PPM image: {0}")]
    Pnm(String),
    #[error("{0} channels cannot be stored as PGM/PPM")]
    Channels(usize),
    #[error("not a feature dump: {0}")]
    Dump(String),
}

fn header_token(r: &mut impl BufRead) -> Result<String, IoError> {
    let mut tok = Vec::new();
    loop {
        let mut b = [0u8];
        if r.read(&mut b)? == 0 {
            break;
        }
        match b[0] {
            b'#' if tok.is_empty() => {
                let mut line = String::new();
                r.read_line(&mut line)?;
            }
            c if c.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    break;
                }
            }
            c => tok.push(c),
        }
    }
    String::from_utf8(tok).map_err(|_| IoError::Pnm("non-ASCII header".into()))
}

/// Reads a P5 (one channel) or P6 (three channel) image with 8-bit samples.
pub fn read_pnm(r: impl Read) -> Result<Tensor, IoError> {
    let mut r = BufReader::new(r);
    let channels = match header_token(&mut r)?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(IoError::Pnm(format!("magic `{m}`"))),
    };
    let mut num = |what: &str| -> Result<usize, IoError> {
        header_token(&mut r)?.parse().map_err(|_| IoError::Pnm(format!("bad {what}")))
    };
    let (w, h, max) = (num("width")?, num("height")?, num("maxval")?);
    if max != 255 {
        return Err(IoError::Pnm(format!("maxval {max}, only 255 is supported")));
    }
    let mut bytes = vec![0u8; w * h * channels];
    r.read_exact(&mut bytes)?;
    Ok(Tensor { width: w, height: h, channels, data: bytes.into_iter().map(i32::from).collect() })
}

/// Writes codes clamped to 0..=255 as P5 or P6.
pub fn write_pnm(mut w: impl Write, t: &Tensor) -> Result<(), IoError> {
    let magic = match t.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(IoError::Channels(c)),
    };
    write!(w, "{magic}\n{} {}\n255\n", t.width, t.height)?;
    let bytes: Vec<u8> = t.data.iter().map(|&v| v.clamp(0, 255) as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Converts feature codes to 8-bit pixel codes (`UQ8`).
pub fn to_pixels(t: &Tensor, fmt: QFormat) -> Tensor {
    let px = QFormat::unsigned(8);
    Tensor {
        data: t.data.iter().map(|&v| crate::fixedpoint::requantize_code(v as i64, fmt.frac_bits, px) as i32).collect(),
        ..t.clone()
    }
}

const DUMP_MAGIC: &[u8; 4] = b"ECFD";

/// Header `ECFD`, `u32` width, height, channels, then the format as
/// (signed `u8`, fraction bits `i8`, width `u8`) and `i32` codes, all
/// little-endian.
pub fn write_feature_dump(mut w: impl Write, t: &Tensor, fmt: QFormat) -> Result<(), IoError> {
    w.write_all(DUMP_MAGIC)?;
    for v in [t.width, t.height, t.channels] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&[u8::from(fmt.signed), fmt.frac_bits as i8 as u8, fmt.width as u8])?;
    for v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_feature_dump(mut r: impl Read) -> Result<(Tensor, QFormat), IoError> {
    let mut head = [0u8; 19];
    r.read_exact(&mut head)?;
    if &head[..4] != DUMP_MAGIC {
        return Err(IoError::Dump("bad magic".into()));
    }
    let u = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (width, height, channels) = (u(4), u(8), u(12));
    let fmt = QFormat { signed: head[16] != 0, frac_bits: head[17] as i8 as i32, width: head[18] as u32 };
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| IoError::Dump("dimensions overflow".into()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n * 4 {
        return Err(IoError::Dump(format!("{} payload bytes for {n} codes", bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((Tensor { width, height, channels, data }, fmt))
}

/// CSV with columns `cycle,unit,bank,op`; UPX2 writes use the interleaved
/// mapping and everything else the normal one.
pub fn write_trace_csv(mut w: impl Write, trace: &[Access]) -> Result<(), IoError> {
    writeln!(w, "cycle,unit,bank,op")?;
    for a in trace {
        let mapping = if a.opcode == crate::fbisa::Opcode::Upx2 && a.kind == AccessKind::Write {
            BankMapping::Interleaved
        } else {
            BankMapping::Normal
        };
        let kind = if a.kind == AccessKind::Read { "read" } else { "write" };
        writeln!(w, "{},{},{},{}-{kind}", a.cycle, a.buf.name(), mapping.bank(a.tile), a.opcode.mnemonic())?;
    }
    Ok(())
}
