//! Dynamic fixed-point values.
//!
//! A [`QFormat`] describes a two's-complement (`Qn`) or unsigned (`UQn`)
//! integer code of `width` bits whose last bit sits at fractional position
//! `n`, i.e. a code `k` stands for `k * 2^-n`. Every layer of a quantized
//! model carries its own formats for weights, biases and output features.
//!
//! Rounding is half-away-from-zero and out-of-range values saturate at the
//! format limits. Products are accumulated exactly in an [`Accumulator`]
//! whose scale is the sum of the operand scales; the only lossy step is
//! [`requantize`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lowest fractional position considered by [`select_precision`].
pub const MIN_FRAC_BITS: i32 = -8;
/// Highest fractional position considered by [`select_precision`].
pub const MAX_FRAC_BITS: i32 = 15;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FixedPointError {
    #[error("no statistics: the value collection is empty")]
    NoStatistics,
    #[error("accumulator scale {acc} does not match operand scale {operands}")]
    ScaleMismatch { acc: i32, operands: i32 },
    #[error("bias format Q{bias_frac} is finer than accumulator scale {acc_scale}; aligning it would drop bits")]
    BiasRightShift { bias_frac: i32, acc_scale: i32 },
    #[error("malformed Q-format `{0}`")]
    Parse(String),
    #[error("unsupported Q-format width {0} (1..=16)")]
    Width(u32),
}

/// Fixed-point format: signedness, fractional position and bit width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QFormat {
    pub signed: bool,
    pub frac_bits: i32,
    pub width: u32,
}

impl QFormat {
    pub const fn signed(frac_bits: i32) -> Self {
        QFormat { signed: true, frac_bits, width: 8 }
    }

    pub const fn unsigned(frac_bits: i32) -> Self {
        QFormat { signed: false, frac_bits, width: 8 }
    }

    pub const fn with_width(self, width: u32) -> Self {
        QFormat { width, ..self }
    }

    pub fn min_code(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.width - 1))
        } else {
            0
        }
    }

    pub fn max_code(&self) -> i64 {
        if self.signed {
            (1i64 << (self.width - 1)) - 1
        } else {
            (1i64 << self.width) - 1
        }
    }

    /// Weight of one code step, `2^-n`.
    pub fn step(&self) -> f64 {
        (-self.frac_bits as f64).exp2()
    }

    pub fn max_value(&self) -> f64 {
        self.max_code() as f64 * self.step()
    }

    pub fn min_value(&self) -> f64 {
        self.min_code() as f64 * self.step()
    }

    pub fn saturate(&self, code: i64) -> i64 {
        code.clamp(self.min_code(), self.max_code())
    }

    pub fn contains_code(&self, code: i64) -> bool {
        (self.min_code()..=self.max_code()).contains(&code)
    }

    pub fn validate(&self) -> Result<(), FixedPointError> {
        if self.width == 0 || self.width > 16 {
            return Err(FixedPointError::Width(self.width));
        }
        Ok(())
    }
}

impl fmt::Display for QFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.signed {
            f.write_str("U")?;
        }
        write!(f, "Q{}", self.frac_bits)?;
        if self.width != 8 {
            write!(f, "/w{}", self.width)?;
        }
        Ok(())
    }
}

impl FromStr for QFormat {
    type Err = FixedPointError;

    /// Parses `Q<n>`, `UQ<n>`, optionally followed by `/w<width>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FixedPointError::Parse(s.to_string());
        let (body, width) = match s.split_once("/w") {
            Some((b, w)) => (b, w.parse::<u32>().map_err(|_| bad())?),
            None => (s, 8),
        };
        let (signed, digits) = if let Some(rest) = body.strip_prefix("UQ") {
            (false, rest)
        } else if let Some(rest) = body.strip_prefix('Q') {
            (true, rest)
        } else {
            return Err(bad());
        };
        let frac_bits = digits.parse::<i32>().map_err(|_| bad())?;
        let fmt = QFormat { signed, frac_bits, width };
        fmt.validate()?;
        Ok(fmt)
    }
}

/// An integer code interpreted in a [`QFormat`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QValue {
    pub code: i64,
    pub fmt: QFormat,
}

impl QValue {
    pub fn new(code: i64, fmt: QFormat) -> Self {
        debug_assert!(fmt.contains_code(code), "code {code} outside {fmt}");
        QValue { code, fmt }
    }

    pub fn zero(fmt: QFormat) -> Self {
        QValue { code: 0, fmt }
    }

    pub fn real(&self) -> f64 {
        self.code as f64 * self.fmt.step()
    }
}

impl PartialOrd for QValue {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.real().partial_cmp(&other.real())
    }
}

/// Clips and rounds `x` to the nearest code of `fmt`.
pub fn quantize(x: f64, fmt: QFormat) -> QValue {
    QValue { code: quantize_code(x, fmt), fmt }
}

pub fn quantize_code(x: f64, fmt: QFormat) -> i64 {
    if x.is_nan() {
        return 0;
    }
    // Scaling by a power of two is exact, so the only rounding is here.
    let scaled = (x * (fmt.frac_bits as f64).exp2()).round();
    if scaled >= fmt.max_code() as f64 {
        fmt.max_code()
    } else if scaled <= fmt.min_code() as f64 {
        fmt.min_code()
    } else {
        scaled as i64
    }
}

/// Norm used by [`select_precision`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    #[default]
    L2,
}

impl FromStr for Norm {
    type Err = FixedPointError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            _ => Err(FixedPointError::Parse(s.to_string())),
        }
    }
}

/// Total quantization error of `values` at fractional position `n`.
pub fn quantization_error(values: &[f64], fmt: QFormat, norm: Norm) -> f64 {
    values
        .iter()
        .map(|&x| {
            let e = (x - quantize(x, fmt).real()).abs();
            match norm {
                Norm::L1 => e,
                Norm::L2 => e * e,
            }
        })
        .sum()
}

/// Picks the fractional position minimizing the total L1 or L2
/// quantization error over `[MIN_FRAC_BITS, MAX_FRAC_BITS]`. Ties go to the
/// smaller position (wider range).
pub fn select_precision(
    values: &[f64],
    norm: Norm,
    signed: bool,
    width: u32,
) -> Result<QFormat, FixedPointError> {
    if values.is_empty() {
        return Err(FixedPointError::NoStatistics);
    }
    let base = QFormat { signed, frac_bits: 0, width };
    base.validate()?;
    let mut best = (f64::INFINITY, base);
    for n in MIN_FRAC_BITS..=MAX_FRAC_BITS {
        let fmt = QFormat { frac_bits: n, ..base };
        let err = quantization_error(values, fmt, norm);
        if err < best.0 {
            best = (err, fmt);
        }
    }
    Ok(best.1)
}

/// Full-precision partial sum. `scale` is the fractional position of the
/// least significant bit of `value`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accumulator {
    pub value: i64,
    pub scale: i32,
}

impl Accumulator {
    pub fn new(scale: i32) -> Self {
        Accumulator { value: 0, scale }
    }

    /// Whether the value still fits the 32-bit hardware accumulator.
    pub fn fits_i32(&self) -> bool {
        i32::try_from(self.value).is_ok()
    }

    /// Adds `code * 2^-frac` exactly. When the addend is finer than the
    /// accumulator, the accumulator is rescaled upward first.
    pub fn add_aligned(&mut self, code: i64, frac: i32) {
        if frac > self.scale {
            self.value <<= frac - self.scale;
            self.scale = frac;
        }
        self.value += code << (self.scale - frac);
    }
}

pub fn accumulate_mac(
    mut acc: Accumulator,
    a: QValue,
    w: QValue,
) -> Result<Accumulator, FixedPointError> {
    let operands = a.fmt.frac_bits + w.fmt.frac_bits;
    if acc.scale != operands {
        return Err(FixedPointError::ScaleMismatch { acc: acc.scale, operands });
    }
    acc.value += a.code * w.code;
    Ok(acc)
}

/// Adds the bias (aligned by an exact left shift) and rounds the sum into
/// `out_fmt`.
pub fn requantize(
    acc: Accumulator,
    bias: QValue,
    out_fmt: QFormat,
) -> Result<QValue, FixedPointError> {
    let shift = acc.scale - bias.fmt.frac_bits;
    if shift < 0 {
        return Err(FixedPointError::BiasRightShift {
            bias_frac: bias.fmt.frac_bits,
            acc_scale: acc.scale,
        });
    }
    let total = acc.value + (bias.code << shift);
    Ok(QValue { code: requantize_code(total, acc.scale, out_fmt), fmt: out_fmt })
}

/// Rounds `value * 2^-scale` into `out_fmt` without a bias term.
pub fn requantize_code(value: i64, scale: i32, out_fmt: QFormat) -> i64 {
    let shift = scale - out_fmt.frac_bits;
    let v = value as i128;
    let rounded = if shift <= 0 {
        let s = (-shift).min(64) as u32;
        if v != 0 && s >= 64 {
            v.signum() * i128::MAX
        } else {
            v.checked_shl(s).filter(|r| r >> s == v).unwrap_or(v.signum() * i128::MAX)
        }
    } else {
        round_shift_half_away(v, shift as u32)
    };
    rounded.clamp(out_fmt.min_code() as i128, out_fmt.max_code() as i128) as i64
}

fn round_shift_half_away(v: i128, shift: u32) -> i128 {
    if shift >= 120 {
        return 0;
    }
    let mag = v.unsigned_abs();
    let q = (mag + (1u128 << (shift - 1))) >> shift;
    if v < 0 {
        -(q as i128)
    } else {
        q as i128
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantize_rounds_and_saturates() {
        let q3 = QFormat::signed(3);
        let v = quantize(1.3, q3);
        assert_eq!(v.code, 10);
        assert_eq!(v.real(), 1.25);
        let v = quantize(100.0, q3);
        assert_eq!(v.code, 127);
        assert_eq!(v.real(), 15.875);
        let v = quantize(0.5, QFormat::unsigned(7));
        assert_eq!(v.code, 64);
        assert_eq!(v.real(), 0.5);
    }

    #[test]
    fn half_way_goes_away_from_zero() {
        let q0 = QFormat::signed(0);
        assert_eq!(quantize_code(2.5, q0), 3);
        assert_eq!(quantize_code(-2.5, q0), -3);
        assert_eq!(requantize_code(5, 1, q0), 3);
        assert_eq!(requantize_code(-5, 1, q0), -3);
        assert_eq!(requantize_code(-3, 1, q0), -2);
    }

    #[test]
    fn format_text_round_trip() {
        for s in ["Q3", "UQ7", "Q-2", "Q15/w7", "UQ0/w7"] {
            let f: QFormat = s.parse().unwrap();
            assert_eq!(f.to_string(), s);
        }
        assert!("X3".parse::<QFormat>().is_err());
        assert!("Q".parse::<QFormat>().is_err());
        assert!("Q3/w0".parse::<QFormat>().is_err());
    }

    #[test]
    fn format_limits_are_monotone_in_n() {
        for n in MIN_FRAC_BITS..MAX_FRAC_BITS {
            let a = QFormat::signed(n);
            let b = QFormat::signed(n + 1);
            assert!(a.max_value() > b.max_value());
            assert!(a.min_value() < b.min_value());
        }
        let q7 = QFormat::signed(0).with_width(7);
        assert_eq!((q7.min_code(), q7.max_code()), (-64, 63));
        let u = QFormat::unsigned(0);
        assert_eq!((u.min_code(), u.max_code()), (0, 255));
    }

    #[test]
    fn mac_examples() {
        let acc = Accumulator::new(8);
        let a = QValue::new(10, QFormat::signed(3));
        let w = QValue::new(-4, QFormat::signed(5));
        let acc = accumulate_mac(acc, a, w).unwrap();
        assert_eq!(acc, Accumulator { value: -40, scale: 8 });
        let zero = QValue::new(0, QFormat::signed(3));
        assert_eq!(accumulate_mac(acc, zero, w).unwrap(), acc);
        assert!(matches!(
            accumulate_mac(Accumulator::new(7), a, w),
            Err(FixedPointError::ScaleMismatch { .. })
        ));
    }

    #[test]
    fn worst_case_filter_fits_32_bits() {
        // one 32-in-channel 3x3 filter: 288 products of extreme 8-bit codes
        let f = QFormat::signed(0);
        let mut acc = Accumulator::new(0);
        for _ in 0..288 {
            acc = accumulate_mac(acc, QValue::new(-128, f), QValue::new(-128, f)).unwrap();
        }
        assert_eq!(acc.value, 288 * 128 * 128);
        assert!(acc.fits_i32());
        // plus one cross-instruction 8-bit addend at the same scale
        acc.add_aligned(-128, 0);
        assert!(acc.fits_i32());
    }

    #[test]
    fn requantize_examples() {
        let zero_b = QValue::zero(QFormat::signed(0));
        let v = requantize(Accumulator { value: 80, scale: 6 }, zero_b, QFormat::signed(3)).unwrap();
        assert_eq!(v.real(), 1.25);
        let v = requantize(Accumulator { value: 1 << 20, scale: 6 }, zero_b, QFormat::signed(3)).unwrap();
        assert_eq!(v.real(), 15.875);
        let v = requantize(Accumulator { value: -1, scale: 6 }, zero_b, QFormat::unsigned(7)).unwrap();
        assert_eq!(v.code, 0);
        let fine_bias = QValue::new(1, QFormat::signed(7));
        assert!(matches!(
            requantize(Accumulator { value: 0, scale: 6 }, fine_bias, QFormat::signed(3)),
            Err(FixedPointError::BiasRightShift { .. })
        ));
    }

    #[test]
    fn empty_statistics_rejected() {
        assert_eq!(
            select_precision(&[], Norm::L2, true, 8),
            Err(FixedPointError::NoStatistics)
        );
    }

    #[test]
    fn add_aligned_rescales_upward() {
        let mut acc = Accumulator { value: 3, scale: 2 };
        acc.add_aligned(1, 4);
        assert_eq!(acc, Accumulator { value: 13, scale: 4 });
        acc.add_aligned(1, 0);
        assert_eq!(acc, Accumulator { value: 29, scale: 4 });
    }

    fn any_format() -> impl Strategy<Value = QFormat> {
        (any::<bool>(), MIN_FRAC_BITS..=MAX_FRAC_BITS, 7u32..=8)
            .prop_map(|(signed, frac_bits, width)| QFormat { signed, frac_bits, width })
    }

    proptest! {
        #[test]
        fn code_round_trips(fmt in any_format(), raw in any::<i64>()) {
            let code = fmt.min_code() + raw.rem_euclid(fmt.max_code() - fmt.min_code() + 1);
            let v = QValue::new(code, fmt);
            prop_assert_eq!(quantize(v.real(), fmt), v);
        }

        #[test]
        fn quantize_is_monotone(fmt in any_format(), a in -300.0f64..300.0, b in -300.0f64..300.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize(lo, fmt).code <= quantize(hi, fmt).code);
        }

        #[test]
        fn in_range_error_is_half_step(fmt in any_format(), t in 0.0f64..1.0) {
            let x = fmt.min_value() + t * (fmt.max_value() - fmt.min_value());
            let err = (x - quantize(x, fmt).real()).abs();
            prop_assert!(err <= fmt.step() / 2.0);
        }

        #[test]
        fn requantize_matches_real_quantize(value in -(1i64 << 40)..(1i64 << 40), scale in -8i32..30, fmt in any_format()) {
            // value * 2^-scale is exact in f64 for these ranges
            let x = value as f64 * (-scale as f64).exp2();
            prop_assert_eq!(requantize_code(value, scale, fmt), quantize_code(x, fmt));
        }
    }
}
