//! Numerical formats and their software emulation.
//!
//! Every format is described by the set of values it can represent. Rounding
//! maps an `f64` onto that set with round-to-nearest-even; nothing here packs
//! bits, since the simulator only needs the value grid.
//!
//! Float conventions: a sign bit plus `E` exponent and `M` mantissa bits,
//! exponent bias `2^(E-1) - 1` unless overridden, subnormals enabled. The
//! all-ones exponent encodes ordinary finite values unless the format reserves
//! it (`bf16`, `fp32`) or reserves only its all-ones mantissa pattern for NaN
//! (`e4m3`, giving a max of 448). Magnitudes past the largest finite value
//! saturate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{QsimError, Result};

/// Which encodings at the top of the exponent range are unavailable for
/// finite values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Reserved {
    /// Every bit pattern is a finite value.
    None,
    /// The all-ones exponent with all-ones mantissa is NaN (FP8 E4M3 style).
    TopMantissa,
    /// The whole all-ones exponent is Inf/NaN (IEEE 754 style).
    TopExponent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FloatFormat {
    pub exp_bits: u32,
    pub mant_bits: u32,
    pub bias: i32,
    /// Overflow saturates to the max finite magnitude instead of producing Inf.
    pub finite_only: bool,
    pub subnormals: bool,
    pub reserved: Reserved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NumericFormat {
    /// Signed symmetric integer with `bits` total bits: levels `-(2^(b-1)-1) ..= 2^(b-1)-1`.
    Integer {
        bits: u32,
    },
    Float(FloatFormat),
}

/// Every finite value a format can represent, sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub format: NumericFormat,
    pub values: Vec<f64>,
}

/// Exact `2^e` for `e` in the `f64` range (including subnormal powers).
pub(crate) fn pow2(e: i32) -> f64 {
    if e > 1023 {
        f64::INFINITY
    } else if e >= -1022 {
        f64::from_bits(((e + 1023) as u64) << 52)
    } else if e >= -1074 {
        f64::from_bits(1u64 << (e + 1074))
    } else {
        0.0
    }
}

/// `floor(log2(a))` for positive finite `a`, computed from the bit pattern.
pub(crate) fn floor_log2(a: f64) -> i32 {
    debug_assert!(a > 0.0 && a.is_finite());
    let bits = a.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased != 0 {
        biased - 1023
    } else {
        let mant = bits & ((1u64 << 52) - 1);
        63 - mant.leading_zeros() as i32 - 1074
    }
}

impl FloatFormat {
    pub const fn ieee_like(exp_bits: u32, mant_bits: u32) -> Self {
        FloatFormat {
            exp_bits,
            mant_bits,
            bias: (1 << (exp_bits - 1)) - 1,
            finite_only: true,
            subnormals: true,
            reserved: Reserved::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.exp_bits < 1 || self.mant_bits < 1 {
            return Err(QsimError::InvalidFormat(format!(
                "{self}: exponent and mantissa need at least one bit each"
            )));
        }
        if 1 + self.exp_bits + self.mant_bits > 32 {
            return Err(QsimError::InvalidFormat(format!(
                "{self}: 1 + E + M must be at most 32"
            )));
        }
        if self.reserved == Reserved::TopExponent && self.exp_bits < 2 {
            return Err(QsimError::InvalidFormat(format!(
                "{self}: reserving the top exponent needs E >= 2"
            )));
        }
        let emax = self.max_exponent_field() as i64 - self.bias as i64;
        let emin_sub = 1 - self.bias as i64 - self.mant_bits as i64;
        if emax > 1023 || emin_sub < -1074 {
            return Err(QsimError::InvalidFormat(format!(
                "{self}: exponent range does not fit in f64"
            )));
        }
        Ok(())
    }

    fn max_exponent_field(&self) -> u32 {
        let all_ones = (1u32 << self.exp_bits) - 1;
        match self.reserved {
            Reserved::TopExponent => all_ones - 1,
            _ => all_ones,
        }
    }

    fn max_mantissa_at_top(&self) -> u32 {
        let all_ones = (1u32 << self.mant_bits) - 1;
        match self.reserved {
            Reserved::TopMantissa => all_ones - 1,
            _ => all_ones,
        }
    }

    /// Exponent of the smallest normal number.
    pub fn min_exponent(&self) -> i32 {
        1 - self.bias
    }

    pub fn max_finite(&self) -> f64 {
        let e = self.max_exponent_field() as i32 - self.bias;
        let sig = (1u64 << self.mant_bits) + self.max_mantissa_at_top() as u64;
        sig as f64 * pow2(e - self.mant_bits as i32)
    }

    pub fn min_positive_normal(&self) -> f64 {
        pow2(self.min_exponent())
    }

    /// Value of the nonnegative pattern `(exponent field, mantissa)`, or `None`
    /// if the pattern is reserved or flushed.
    pub fn decode(&self, exp_field: u32, mantissa: u32) -> Option<f64> {
        let all_ones_e = (1u32 << self.exp_bits) - 1;
        let all_ones_m = (1u32 << self.mant_bits) - 1;
        match self.reserved {
            Reserved::TopExponent if exp_field == all_ones_e => return None,
            Reserved::TopMantissa if exp_field == all_ones_e && mantissa == all_ones_m => return None,
            _ => {}
        }
        let m = self.mant_bits as i32;
        if exp_field == 0 {
            if !self.subnormals && mantissa != 0 {
                return None;
            }
            Some(mantissa as f64 * pow2(self.min_exponent() - m))
        } else {
            let sig = (1u64 << self.mant_bits) + mantissa as u64;
            Some(sig as f64 * pow2(exp_field as i32 - self.bias - m))
        }
    }

    /// Spacing of representable values around magnitude `a` (the weight of the
    /// mantissa LSB).
    fn quantum(&self, a: f64) -> f64 {
        let e = if a > 0.0 {
            floor_log2(a).max(self.min_exponent())
        } else {
            self.min_exponent()
        };
        pow2(e - self.mant_bits as i32)
    }

    pub fn round(&self, x: f64) -> f64 {
        let a = x.abs();
        if a == 0.0 {
            return 0.0;
        }
        let min_normal = self.min_positive_normal();
        let r = if !self.subnormals && a < min_normal {
            // Only 0 and the min normal are candidates; an exact tie flushes.
            if a > 0.5 * min_normal {
                min_normal
            } else {
                0.0
            }
        } else {
            let q = self.quantum(a);
            (a / q).round_ties_even() * q
        };
        let max = self.max_finite();
        let r = if r > max {
            if self.finite_only {
                max
            } else {
                f64::INFINITY
            }
        } else {
            r
        };
        r.copysign(x)
    }

    /// Smallest representable value `>= a` for positive `a` (saturating at max).
    pub fn round_up(&self, a: f64) -> f64 {
        debug_assert!(a > 0.0);
        let r = self.round(a);
        if r >= a {
            return r;
        }
        let up = r + self.quantum(r);
        up.min(self.max_finite())
    }
}

impl fmt::Display for FloatFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == BF16 {
            return write!(f, "bf16");
        }
        if *self == FP32 {
            return write!(f, "fp32");
        }
        write!(f, "e{}m{}", self.exp_bits, self.mant_bits)?;
        let mut canonical = FloatFormat::ieee_like(self.exp_bits.max(1), self.mant_bits);
        if self.exp_bits == 4 && self.mant_bits == 3 {
            canonical.reserved = Reserved::TopMantissa;
        }
        if self.bias != canonical.bias {
            write!(f, "b{}", self.bias)?;
        }
        Ok(())
    }
}

pub const INT4: NumericFormat = NumericFormat::Integer { bits: 4 };
pub const INT8: NumericFormat = NumericFormat::Integer { bits: 8 };
pub const E2M1: FloatFormat = FloatFormat::ieee_like(2, 1);
pub const E1M2: FloatFormat = FloatFormat::ieee_like(1, 2);
pub const E4M3: FloatFormat = FloatFormat {
    reserved: Reserved::TopMantissa,
    ..FloatFormat::ieee_like(4, 3)
};
pub const BF16: FloatFormat = FloatFormat {
    reserved: Reserved::TopExponent,
    ..FloatFormat::ieee_like(8, 7)
};
pub const FP32: FloatFormat = FloatFormat {
    reserved: Reserved::TopExponent,
    ..FloatFormat::ieee_like(8, 23)
};

impl NumericFormat {
    pub const FP32: NumericFormat = NumericFormat::Float(FP32);

    pub fn validate(&self) -> Result<()> {
        match self {
            NumericFormat::Integer { bits } => {
                if !(2..=32).contains(bits) {
                    return Err(QsimError::InvalidFormat(format!(
                        "int{bits}: integer width must be in 2..=32"
                    )));
                }
                Ok(())
            }
            NumericFormat::Float(ff) => ff.validate(),
        }
    }

    /// Full-precision carrier; quantizers built on it are pass-through.
    pub fn is_passthrough(&self) -> bool {
        *self == NumericFormat::FP32
    }

    /// Total storage bits including sign.
    pub fn bit_width(&self) -> u32 {
        match self {
            NumericFormat::Integer { bits } => *bits,
            NumericFormat::Float(ff) => 1 + ff.exp_bits + ff.mant_bits,
        }
    }

    pub fn max_finite(&self) -> f64 {
        match self {
            NumericFormat::Integer { bits } => symmetric_levels(*bits),
            NumericFormat::Float(ff) => ff.max_finite(),
        }
    }

    pub fn min_positive_normal(&self) -> f64 {
        match self {
            NumericFormat::Integer { .. } => 1.0,
            NumericFormat::Float(ff) => ff.min_positive_normal(),
        }
    }

    pub fn round(&self, x: f64) -> f64 {
        round_to_format(x, self)
    }

    /// Number of bit patterns that encode a finite value (both zeros count).
    pub fn finite_encodings(&self) -> u64 {
        match self {
            NumericFormat::Integer { bits } => (1u64 << bits) - 1,
            NumericFormat::Float(ff) => {
                let per_sign = 1u64 << (ff.exp_bits + ff.mant_bits);
                let reserved = match ff.reserved {
                    Reserved::None => 0,
                    Reserved::TopMantissa => 1,
                    Reserved::TopExponent => 1u64 << ff.mant_bits,
                };
                let flushed = if ff.subnormals { 0 } else { (1u64 << ff.mant_bits) - 1 };
                2 * (per_sign - reserved - flushed)
            }
        }
    }
}

/// `2^(b-1) - 1`, the top level of a symmetric signed b-bit integer.
pub(crate) fn symmetric_levels(bits: u32) -> f64 {
    (pow2(bits as i32 - 1) - 1.0).max(1.0)
}

impl fmt::Display for NumericFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericFormat::Integer { bits } => write!(f, "int{bits}"),
            NumericFormat::Float(ff) => write!(f, "{ff}"),
        }
    }
}

fn parse_error(input: &str, position: usize, token: &str, reason: &str) -> QsimError {
    QsimError::FormatParse {
        input: input.to_string(),
        position,
        token: token.to_string(),
        reason: reason.to_string(),
    }
}

/// Reads a run of ASCII digits (with optional leading `-` when `signed`)
/// starting at `pos`. Returns the value and the position after it.
fn parse_number(input: &str, pos: usize, signed: bool) -> Result<(i64, usize)> {
    let bytes = input.as_bytes();
    let mut end = pos;
    if signed && end < bytes.len() && bytes[end] == b'-' {
        end += 1;
    }
    let digits_start = end;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == digits_start {
        let token = input[pos..].chars().next().map(String::from).unwrap_or_default();
        return Err(parse_error(input, pos, &token, "expected a number"));
    }
    let text = &input[pos..end];
    let value = text
        .parse::<i64>()
        .map_err(|_| parse_error(input, pos, text, "number out of range"))?;
    Ok((value, end))
}

impl FromStr for NumericFormat {
    type Err = QsimError;

    fn from_str(s: &str) -> Result<Self> {
        let input = s.trim();
        let lower = input.to_ascii_lowercase();
        let format = match lower.as_str() {
            "int4" => INT4,
            "int8" => INT8,
            "e2m1" => NumericFormat::Float(E2M1),
            "e1m2" => NumericFormat::Float(E1M2),
            "e4m3" => NumericFormat::Float(E4M3),
            "bf16" => NumericFormat::Float(BF16),
            "fp32" => NumericFormat::FP32,
            "" => return Err(parse_error(input, 0, "", "empty format string")),
            _ => parse_general(&lower)?,
        };
        format.validate()?;
        Ok(format)
    }
}

fn parse_general(input: &str) -> Result<NumericFormat> {
    if input.starts_with("int") {
        let (bits, end) = parse_number(input, 3, false)?;
        if end != input.len() {
            return Err(parse_error(input, end, &input[end..], "trailing characters"));
        }
        return Ok(NumericFormat::Integer { bits: bits as u32 });
    }
    if !input.starts_with('e') {
        let token: String = input.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
        let token = if token.is_empty() {
            input[..1].to_string()
        } else {
            token
        };
        return Err(parse_error(
            input,
            0,
            &token,
            "expected `int<b>`, `e<E>m<M>[b<bias>]` or a named format",
        ));
    }
    let (exp_bits, pos) = parse_number(input, 1, false)?;
    if input.as_bytes().get(pos) != Some(&b'm') {
        let token = input[pos..].chars().next().map(String::from).unwrap_or_default();
        return Err(parse_error(input, pos, &token, "expected `m`"));
    }
    let (mant_bits, mut pos) = parse_number(input, pos + 1, false)?;
    if exp_bits < 1 || mant_bits < 1 || exp_bits > 31 || mant_bits > 31 {
        return Err(parse_error(
            input,
            1,
            input,
            "exponent and mantissa widths must be in 1..=31",
        ));
    }
    let mut ff = FloatFormat::ieee_like(exp_bits as u32, mant_bits as u32);
    if exp_bits == 4 && mant_bits == 3 {
        ff.reserved = Reserved::TopMantissa;
    }
    if input.as_bytes().get(pos) == Some(&b'b') {
        let (bias, end) = parse_number(input, pos + 1, true)?;
        if bias.abs() > 2048 {
            return Err(parse_error(input, pos + 1, &input[pos + 1..end], "bias out of range"));
        }
        ff.bias = bias as i32;
        pos = end;
    }
    if pos != input.len() {
        return Err(parse_error(input, pos, &input[pos..], "trailing characters"));
    }
    Ok(NumericFormat::Float(ff))
}

/// Lists every finite value of a format of at most 16 bits.
pub fn enumerate(format: &NumericFormat) -> Result<ValueTable> {
    format.validate()?;
    let width = format.bit_width();
    if width > 16 {
        return Err(QsimError::WidthTooLarge {
            format: format.to_string(),
            bits: width,
        });
    }
    let mut positive = Vec::new();
    match format {
        NumericFormat::Integer { bits } => {
            let top = symmetric_levels(*bits) as i64;
            positive.extend((1..=top).map(|v| v as f64));
        }
        NumericFormat::Float(ff) => {
            for e in 0..(1u32 << ff.exp_bits) {
                for m in 0..(1u32 << ff.mant_bits) {
                    if let Some(v) = ff.decode(e, m) {
                        if v > 0.0 {
                            positive.push(v);
                        }
                    }
                }
            }
        }
    }
    positive.sort_by(|a, b| a.total_cmp(b));
    positive.dedup();
    let mut values: Vec<f64> = positive.iter().rev().map(|v| -v).collect();
    values.push(0.0);
    values.extend_from_slice(&positive);
    Ok(ValueTable {
        format: *format,
        values,
    })
}

impl ValueTable {
    pub fn max_finite(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl fmt::Display for ValueTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "format: {}", self.format)?;
        writeln!(f, "entries: {}", self.values.len())?;
        writeln!(f, "max_finite: {}", self.max_finite())?;
        for v in &self.values {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Nearest representable value, ties to even mantissa (even integer for
/// integer formats), saturating past the largest finite magnitude.
pub fn round_to_format(x: f64, format: &NumericFormat) -> f64 {
    match format {
        NumericFormat::Integer { bits } => {
            let top = symmetric_levels(*bits);
            x.round_ties_even().clamp(-top, top)
        }
        NumericFormat::Float(ff) => ff.round(x),
    }
}

/// Round to bfloat16 (8-bit significand), nearest-even, saturating.
pub fn round_to_bf16(x: f64) -> f64 {
    BF16.round(x)
}

/// Smallest bfloat16 value `>= x` for positive `x`.
pub fn round_to_bf16_up(x: f64) -> f64 {
    BF16.round_up(x)
}
