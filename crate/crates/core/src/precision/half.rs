// SPDX-License-Identifier: MIT OR Apache-2.0

//! Software binary16.

use std::fmt;

const HALF_MAX: f64 = 65504.0;
// 2^-14, smallest positive normal binary16.
const HALF_MIN_NORMAL: f64 = 6.103_515_625e-5;
// Number of binary64 mantissa bits dropped when keeping binary16's 10.
const DROP: u32 = 52 - 10;
const DROP_MASK: u64 = (1 << DROP) - 1;
const HALF_ULP_BIT: u64 = 1 << (DROP - 1);

/// Rounds `x` to the nearest binary16 value, ties to even, and returns that
/// value widened back to binary64.
///
/// Overflow goes to signed infinity. Subnormals are kept; NaN stays NaN.
#[inline(always)]
pub fn round_to_half(x: f64) -> f64 {
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    // Normal binary16 range: exponents -14..=15.
    if (1023 - 14..=1023 + 15).contains(&biased) {
        let lsb = (bits >> DROP) & 1;
        let rounded = (bits + (HALF_ULP_BIT - 1) + lsb) & !DROP_MASK;
        let y = f64::from_bits(rounded);
        if y.abs() > HALF_MAX {
            return f64::INFINITY.copysign(x);
        }
        return y;
    }
    round_to_half_slow(x)
}

#[cold]
fn round_to_half_slow(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    let a = x.abs();
    if a >= HALF_MIN_NORMAL {
        // Exponent above binary16's range, including infinities.
        return f64::INFINITY.copysign(x);
    }
    // Subnormal grid has spacing 2^-24; scaling by a power of two is exact.
    (x * 16_777_216.0).round_ties_even() / 16_777_216.0
}

/// A binary16 bit pattern: 1 sign bit, 5 exponent bits, 10 mantissa bits.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Half16(u16);

impl Half16 {
    pub const ZERO: Half16 = Half16(0);
    pub const MAX: Half16 = Half16(0x7bff);
    pub const INFINITY: Half16 = Half16(0x7c00);
    pub const NEG_INFINITY: Half16 = Half16(0xfc00);
    pub const NAN: Half16 = Half16(0x7e00);

    pub const fn from_bits(bits: u16) -> Self {
        Half16(bits)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Round-to-nearest-even conversion from binary64.
    pub fn from_f64(x: f64) -> Self {
        let y = round_to_half(x);
        let sign = if y.is_sign_negative() { 0x8000u16 } else { 0 };
        if y.is_nan() {
            return Half16(Self::NAN.0 | sign);
        }
        let a = y.abs();
        if a.is_infinite() {
            return Half16(0x7c00 | sign);
        }
        if a < HALF_MIN_NORMAL {
            // exact: a is a multiple of 2^-24 below 2^-14
            return Half16(sign | (a * 16_777_216.0) as u16);
        }
        let bits = a.to_bits();
        let exp = ((bits >> 52) & 0x7ff) as i32 - 1023 + 15;
        let mant = ((bits >> DROP) & 0x3ff) as u16;
        Half16(sign | ((exp as u16) << 10) | mant)
    }

    pub fn from_f32(x: f32) -> Self {
        Self::from_f64(x as f64)
    }

    /// Exact widening to binary64.
    pub fn to_f64(self) -> f64 {
        let sign = if self.0 & 0x8000 != 0 { -1.0 } else { 1.0 };
        let exp = (self.0 >> 10) & 0x1f;
        let mant = (self.0 & 0x3ff) as f64;
        let mag = match exp {
            0 => mant / 16_777_216.0,
            0x1f if mant == 0.0 => f64::INFINITY,
            0x1f => f64::NAN,
            e => (1.0 + mant / 1024.0) * 2f64.powi(e as i32 - 15),
        };
        sign * mag
    }

    pub fn to_f32(self) -> f32 {
        self.to_f64() as f32
    }

    pub fn is_nan(self) -> bool {
        self.0 & 0x7c00 == 0x7c00 && self.0 & 0x3ff != 0
    }

    pub fn is_infinite(self) -> bool {
        self.0 & 0x7fff == 0x7c00
    }
}

impl fmt::Debug for Half16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Half16({:#06x} = {})", self.0, self.to_f64())
    }
}

impl fmt::Display for Half16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f64(), f)
    }
}

impl From<Half16> for f64 {
    fn from(h: Half16) -> f64 {
        h.to_f64()
    }
}
