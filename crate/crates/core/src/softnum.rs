//! Bit-exact emulation of the 16-bit "brain float" format (1 sign, 8 exponent,
//! 7 fraction bits).
//!
//! Only conversion is emulated: rounding a 32-bit value down to 16 bits and
//! widening it back. Everything is integer bit manipulation, so results do not
//! depend on any platform's native half-width support.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Numeric representation used for position-dependent RoPE quantities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionMode {
    /// Positions and angles held in 32-bit floats.
    #[default]
    Full32,
    /// Positions (and optionally angles) rounded to the 16-bit format.
    Reduced16,
}

impl fmt::Display for PrecisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrecisionMode::Full32 => f.write_str("full32"),
            PrecisionMode::Reduced16 => f.write_str("reduced16"),
        }
    }
}

/// A 16-bit value: the upper half of an IEEE-754 binary32 pattern.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Reduced16(u16);

const FRACTION_BITS: u32 = 7;
const EXPONENT_BIAS: i32 = 127;
const EXPONENT_MASK: u16 = 0x7F80;
const FRACTION_MASK: u16 = 0x007F;
const QUIET_BIT: u16 = 0x0040;

impl Reduced16 {
    pub const ZERO: Reduced16 = Reduced16(0);
    pub const INFINITY: Reduced16 = Reduced16(EXPONENT_MASK);
    pub const NEG_INFINITY: Reduced16 = Reduced16(0x8000 | EXPONENT_MASK);

    pub const fn from_bits(bits: u16) -> Self {
        Reduced16(bits)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    pub fn is_nan(self) -> bool {
        self.0 & EXPONENT_MASK == EXPONENT_MASK && self.0 & FRACTION_MASK != 0
    }

    pub fn is_infinite(self) -> bool {
        self.0 & 0x7FFF == EXPONENT_MASK
    }

    /// Rounds `x` to the nearest representable value, ties to even.
    ///
    /// Overflow saturates to the infinity of matching sign. NaN inputs stay NaN
    /// (sign and upper payload bits kept, quiet bit forced so truncation of the
    /// payload can never produce an infinity).
    pub fn from_f32(x: f32) -> Self {
        let bits = x.to_bits();
        if x.is_nan() {
            return Reduced16((bits >> 16) as u16 | QUIET_BIT);
        }
        // Adding 0x7FFF plus the lowest kept bit rounds half-way cases towards
        // an even kept fraction. A carry out of the fraction bumps the exponent,
        // which is exactly the overflow-to-infinity behaviour at the top.
        let lsb = (bits >> 16) & 1;
        let rounded = bits.wrapping_add(0x7FFF + lsb);
        Reduced16((rounded >> 16) as u16)
    }

    /// Exact rounding of a non-negative integer, ties to even.
    ///
    /// This goes straight from the integer and never passes through a 32-bit
    /// float, so integers above 2^24 do not suffer double rounding.
    pub fn from_u64(n: u64) -> Self {
        if n == 0 {
            return Reduced16::ZERO;
        }
        let exponent = 63 - n.leading_zeros();
        let (significand, exponent) = if exponent <= FRACTION_BITS {
            (n << (FRACTION_BITS - exponent), exponent)
        } else {
            let shift = exponent - FRACTION_BITS;
            let kept = n >> shift;
            let rest = n & ((1u64 << shift) - 1);
            let half = 1u64 << (shift - 1);
            let round_up = rest > half || (rest == half && kept & 1 == 1);
            let kept = kept + u64::from(round_up);
            if kept >> (FRACTION_BITS + 1) != 0 {
                (kept >> 1, exponent + 1)
            } else {
                (kept, exponent)
            }
        };
        let biased = exponent as i32 + EXPONENT_BIAS;
        if biased >= 0xFF {
            return Reduced16::INFINITY;
        }
        Reduced16(((biased as u16) << FRACTION_BITS) | (significand as u16 & FRACTION_MASK))
    }

    /// Exact widening back to 32 bits.
    pub fn to_f32(self) -> f32 {
        f32::from_bits(u32::from(self.0) << 16)
    }
}

impl fmt::Debug for Reduced16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Reduced16({:#06x} = {})", self.0, self.to_f32())
    }
}

impl fmt::Display for Reduced16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f32(), f)
    }
}

impl From<f32> for Reduced16 {
    fn from(x: f32) -> Self {
        Reduced16::from_f32(x)
    }
}

impl From<Reduced16> for f32 {
    fn from(v: Reduced16) -> Self {
        v.to_f32()
    }
}

pub fn round_to_reduced16(x: f32) -> Reduced16 {
    Reduced16::from_f32(x)
}

pub fn widen(v: Reduced16) -> f32 {
    v.to_f32()
}

/// Number of distinct 16-bit values that the integer positions `0..limit`
/// collapse to.
///
/// Rounding is monotone and every representable value at or above 256 is an
/// integer, so the image of `0..limit` is every non-negative integer value up
/// to `round(limit - 1)`. That set is counted per binade: 257 values in
/// `[0, 256]`, then 128 per binade above.
pub fn distinct_integer_census(limit: u64) -> u64 {
    if limit == 0 {
        return 0;
    }
    let top = Reduced16::from_u64(limit - 1).to_bits();
    let binade = i32::from(top >> FRACTION_BITS) - EXPONENT_BIAS;
    if binade < 8 {
        // Below 256 every integer is exact.
        return limit;
    }
    let index_in_binade = u64::from(top & FRACTION_MASK);
    257 + 128 * (binade as u64 - 8) + index_in_binade
}

/// `distinct_integer_census` plus the fraction of positions that share a
/// rounded value with a smaller position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CensusReport {
    pub limit: u64,
    pub distinct: u64,
    pub collision_rate: f64,
}

pub fn census_report(limit: u64) -> CensusReport {
    let distinct = distinct_integer_census(limit);
    let collision_rate = if limit == 0 {
        0.0
    } else {
        1.0 - distinct as f64 / limit as f64
    };
    CensusReport {
        limit,
        distinct,
        collision_rate,
    }
}
