//! Fixed-point formats used throughout the datapath.
//!
//! Activations, weights and biases are 16-bit Q8.8 words ([`Fx16`]). Every
//! product is carried exactly in a 48-bit accumulator ([`Acc48`]) with 16
//! fractional bits, and the only lossy step is the final [`quantize`] back to
//! Q8.8. Because accumulation never rounds or saturates, any reordering of a
//! sum (tiling, kernel splitting, channel order) produces identical bits.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fractional bits of [`Fx16`].
pub const FX_FRAC_BITS: u32 = 8;
/// Fractional bits of [`Acc48`].
pub const ACC_FRAC_BITS: u32 = 2 * FX_FRAC_BITS;
/// Width of the accumulator in bits.
pub const ACC_BITS: u32 = 48;

const ACC_MAX: i64 = (1 << (ACC_BITS - 1)) - 1;
const ACC_MIN: i64 = -(1 << (ACC_BITS - 1));

/// 16-bit two's-complement Q8.8 word.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fx16(i16);

impl Fx16 {
    pub const ZERO: Fx16 = Fx16(0);
    pub const ONE: Fx16 = Fx16(1 << FX_FRAC_BITS);
    pub const MIN: Fx16 = Fx16(i16::MIN);
    pub const MAX: Fx16 = Fx16(i16::MAX);

    #[inline]
    pub const fn from_bits(bits: i16) -> Self {
        Fx16(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> i16 {
        self.0
    }

    /// Raw 16-bit pattern, as stored in files and SRAM words.
    #[inline]
    pub const fn to_u16(self) -> u16 {
        self.0 as u16
    }

    #[inline]
    pub const fn from_u16(raw: u16) -> Self {
        Fx16(raw as i16)
    }

    pub fn from_f64(x: f64) -> Self {
        to_fx(x)
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / (1u32 << FX_FRAC_BITS) as f64
    }
}

impl fmt::Debug for Fx16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fx16({:#06x} = {})", self.to_u16(), self.to_f64())
    }
}

impl fmt::Display for Fx16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

/// Accumulator overflowed its 48-bit range. Only reachable by layers that
/// sum more than 2^16 products per output, which are outside the supported
/// envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("accumulator overflow: {0} does not fit in {ACC_BITS} bits")]
pub struct AccOverflow(pub i128);

/// 48-bit two's-complement accumulator with 16 fractional bits, held in an
/// `i64`. Values are always inside `[-2^47, 2^47)`.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Acc48(i64);

impl Acc48 {
    pub const ZERO: Acc48 = Acc48(0);

    pub fn new(bits: i64) -> Result<Self, AccOverflow> {
        if (ACC_MIN..=ACC_MAX).contains(&bits) {
            Ok(Acc48(bits))
        } else {
            Err(AccOverflow(bits as i128))
        }
    }

    #[inline]
    pub const fn to_bits(self) -> i64 {
        self.0
    }

    /// Widen a Q8.8 word (a bias) into accumulator precision.
    #[inline]
    pub const fn from_fx(x: Fx16) -> Self {
        Acc48((x.0 as i64) << (ACC_FRAC_BITS - FX_FRAC_BITS))
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / (1u64 << ACC_FRAC_BITS) as f64
    }
}

impl fmt::Debug for Acc48 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Acc48({} = {})", self.0, self.to_f64())
    }
}

/// Nearest Q8.8 value to `x`, ties to even, saturating at the range ends.
/// NaN maps to zero.
pub fn to_fx(x: f64) -> Fx16 {
    if x.is_nan() {
        return Fx16::ZERO;
    }
    let scaled = (x * (1u32 << FX_FRAC_BITS) as f64).round_ties_even();
    if scaled >= i16::MAX as f64 {
        Fx16::MAX
    } else if scaled <= i16::MIN as f64 {
        Fx16::MIN
    } else {
        Fx16(scaled as i16)
    }
}

/// Exact product of two Q8.8 words. The result has 16 fractional bits and
/// at most 31 significant bits, so it always fits.
#[inline]
pub fn fx_mul(a: Fx16, b: Fx16) -> Acc48 {
    Acc48(a.0 as i64 * b.0 as i64)
}

/// Exact sum; faults when the result leaves the 48-bit range.
#[inline]
pub fn acc_add(a: Acc48, b: Acc48) -> Result<Acc48, AccOverflow> {
    let sum = a.0 + b.0;
    if (ACC_MIN..=ACC_MAX).contains(&sum) {
        Ok(Acc48(sum))
    } else {
        Err(AccOverflow(sum as i128))
    }
}

/// Drop the extra 8 fractional bits with round-to-nearest-even, then
/// saturate into Q8.8.
#[inline]
pub fn quantize(a: Acc48) -> Fx16 {
    const SHIFT: u32 = ACC_FRAC_BITS - FX_FRAC_BITS;
    const HALF: i64 = 1 << (SHIFT - 1);
    let floor = a.0 >> SHIFT;
    let rem = a.0 & ((1 << SHIFT) - 1);
    let rounded = if rem > HALF || (rem == HALF && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    };
    Fx16(rounded.clamp(i16::MIN as i64, i16::MAX as i64) as i16)
}
