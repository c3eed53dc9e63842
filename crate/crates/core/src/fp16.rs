//! Bit-level half precision and the small custom float formats used by the
//! baseline adder trees.
//!
//! All rounding goes through [`FloatFormat::round_exact`], which takes an
//! exact value `±mag × 2^exp` and rounds it once. Products and sums of the
//! formats handled here are formed exactly in 128-bit integers first, so
//! every operation performs a single rounding.

use core::fmt;

/// Rounding applied when a wider intermediate is converted to a float format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RoundingMode {
    #[default]
    NearestEven,
    TowardZero,
}

/// Class of an encoded floating-point value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloatClass {
    Zero,
    Subnormal,
    Normal,
    Infinite,
    Nan,
}

/// A raw IEEE binary16 bit pattern (S1/E5/M10, bias 15).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[repr(transparent)]
pub struct Fp16Bits(pub u16);

/// Sign, unbiased exponent and significand of an FP16 pattern.
///
/// Normal numbers carry the hidden bit (bit 10) in `significand`; zero and
/// subnormals report exponent −14 with the hidden bit clear, so that in both
/// cases the value is `significand × 2^(exponent − 10)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fp16Parts {
    pub negative: bool,
    pub exponent: i32,
    pub significand: u16,
    pub class: FloatClass,
}

impl Fp16Bits {
    pub const ZERO: Self = Self(0x0000);
    pub const NEG_ZERO: Self = Self(0x8000);
    pub const ONE: Self = Self(0x3C00);
    pub const INFINITY: Self = Self(0x7C00);
    pub const NEG_INFINITY: Self = Self(0xFC00);
    pub const MAX: Self = Self(0x7BFF);

    #[inline]
    pub const fn from_bits(bits: u16) -> Self {
        Self(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    #[inline]
    pub const fn is_sign_negative(self) -> bool {
        self.0 & 0x8000 != 0
    }

    #[inline]
    pub const fn is_finite(self) -> bool {
        self.0 & 0x7C00 != 0x7C00
    }

    #[inline]
    pub const fn is_zero(self) -> bool {
        self.0 & 0x7FFF == 0
    }

    #[inline]
    pub const fn neg(self) -> Self {
        Self(self.0 ^ 0x8000)
    }

    #[inline]
    pub const fn abs(self) -> Self {
        Self(self.0 & 0x7FFF)
    }

    pub fn class(self) -> FloatClass {
        self.decompose().class
    }

    /// Splits the pattern into sign, unbiased exponent and significand.
    pub fn decompose(self) -> Fp16Parts {
        let negative = self.is_sign_negative();
        let field = ((self.0 >> 10) & 0x1F) as i32;
        let mantissa = self.0 & 0x03FF;
        match field {
            0 => Fp16Parts {
                negative,
                exponent: -14,
                significand: mantissa,
                class: if mantissa == 0 { FloatClass::Zero } else { FloatClass::Subnormal },
            },
            31 => Fp16Parts {
                negative,
                exponent: 16,
                significand: mantissa,
                class: if mantissa == 0 { FloatClass::Infinite } else { FloatClass::Nan },
            },
            _ => Fp16Parts {
                negative,
                exponent: field - 15,
                significand: mantissa | 0x0400,
                class: FloatClass::Normal,
            },
        }
    }

    /// Inverse of [`Fp16Bits::decompose`].
    pub fn compose(parts: Fp16Parts) -> Self {
        let sign = if parts.negative { 0x8000 } else { 0 };
        let body = match parts.class {
            FloatClass::Infinite | FloatClass::Nan => 0x7C00 | (parts.significand & 0x03FF),
            FloatClass::Zero | FloatClass::Subnormal => parts.significand & 0x03FF,
            FloatClass::Normal => {
                (((parts.exponent + 15) as u16) << 10) | (parts.significand & 0x03FF)
            }
        };
        Self(sign | body)
    }

    /// Exact conversion to `f64`.
    pub fn to_f64(self) -> f64 {
        let p = self.decompose();
        let magnitude = match p.class {
            FloatClass::Infinite => f64::INFINITY,
            FloatClass::Nan => f64::NAN,
            _ => p.significand as f64 * pow2(p.exponent - 10),
        };
        if p.negative {
            -magnitude
        } else {
            magnitude
        }
    }

    pub fn to_f32(self) -> f32 {
        self.to_f64() as f32
    }

    /// Round-to-nearest-even conversion from `f64`.
    pub fn from_f64(value: f64) -> Self {
        Self::from_f64_with(value, RoundingMode::NearestEven)
    }

    pub fn from_f64_with(value: f64, mode: RoundingMode) -> Self {
        Self(FloatFormat::FP16.from_f64(value, mode).bits as u16)
    }

    pub fn from_f32(value: f32) -> Self {
        Self::from_f64(value as f64)
    }
}

impl fmt::Debug for Fp16Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fp16Bits({:#06x} = {})", self.0, self.to_f64())
    }
}

impl fmt::Display for Fp16Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f64(), f)
    }
}

impl From<Fp16Bits> for f64 {
    fn from(value: Fp16Bits) -> Self {
        value.to_f64()
    }
}

/// `2^e` for exponents well inside the f64 range.
#[inline]
pub(crate) fn pow2(e: i32) -> f64 {
    libm::ldexp(1.0, e)
}

/// Description of a binary floating-point format with IEEE-style encoding
/// (sign, biased exponent with all-ones reserved for Inf/NaN, subnormals).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FloatFormat {
    pub exponent_bits: u32,
    pub mantissa_bits: u32,
}

/// A value encoded in some [`FloatFormat`], stored right-aligned in a `u32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encoded {
    pub bits: u32,
    /// The exact value exceeded the format's finite range.
    pub overflow: bool,
}

/// Exact intermediate `(-1)^negative × magnitude × 2^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExactValue {
    pub negative: bool,
    pub magnitude: u128,
    pub exponent: i32,
}

impl FloatFormat {
    pub const FP16: Self = Self { exponent_bits: 5, mantissa_bits: 10 };
    /// S1/E6/M13, the wide-intermediate baseline format.
    pub const FP20: Self = Self { exponent_bits: 6, mantissa_bits: 13 };

    pub const fn width(self) -> u32 {
        1 + self.exponent_bits + self.mantissa_bits
    }

    pub const fn bias(self) -> i32 {
        (1 << (self.exponent_bits - 1)) - 1
    }

    const fn exponent_mask(self) -> u32 {
        (1 << self.exponent_bits) - 1
    }

    const fn sign_bit(self) -> u32 {
        1 << (self.exponent_bits + self.mantissa_bits)
    }

    pub fn is_finite(self, bits: u32) -> bool {
        (bits >> self.mantissa_bits) & self.exponent_mask() != self.exponent_mask()
    }

    pub fn infinity(self, negative: bool) -> u32 {
        let inf = self.exponent_mask() << self.mantissa_bits;
        if negative {
            inf | self.sign_bit()
        } else {
            inf
        }
    }

    fn max_finite(self, negative: bool) -> u32 {
        let bits = ((self.exponent_mask() - 1) << self.mantissa_bits) | ((1 << self.mantissa_bits) - 1);
        if negative {
            bits | self.sign_bit()
        } else {
            bits
        }
    }

    /// Decodes a finite pattern into an exact value; `None` for Inf/NaN.
    pub fn to_exact(self, bits: u32) -> Option<ExactValue> {
        if !self.is_finite(bits) {
            return None;
        }
        let negative = bits & self.sign_bit() != 0;
        let field = (bits >> self.mantissa_bits) & self.exponent_mask();
        let mantissa = bits & ((1 << self.mantissa_bits) - 1);
        let (significand, unbiased) = if field == 0 {
            (mantissa, 1 - self.bias())
        } else {
            (mantissa | (1 << self.mantissa_bits), field as i32 - self.bias())
        };
        Some(ExactValue {
            negative,
            magnitude: significand as u128,
            exponent: unbiased - self.mantissa_bits as i32,
        })
    }

    pub fn to_f64(self, bits: u32) -> f64 {
        match self.to_exact(bits) {
            Some(v) => v.to_f64(),
            None => {
                let mantissa = bits & ((1 << self.mantissa_bits) - 1);
                if mantissa != 0 {
                    f64::NAN
                } else if bits & self.sign_bit() != 0 {
                    f64::NEG_INFINITY
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// Rounds an exact value into this format.
    pub fn round_exact(self, value: ExactValue, mode: RoundingMode) -> Encoded {
        let sign = if value.negative { self.sign_bit() } else { 0 };
        if value.magnitude == 0 {
            return Encoded { bits: sign, overflow: false };
        }
        let man = self.mantissa_bits as i32;
        let emin = 1 - self.bias();
        let emax = self.bias();
        let msb = 127 - value.magnitude.leading_zeros() as i32;
        let unbiased = msb + value.exponent;
        // Exponent of the result LSB: fixed for subnormals, else tracks the MSB.
        let lsb = if unbiased < emin { emin - man } else { unbiased - man };
        let shift = lsb - value.exponent;
        let mut q = if shift <= 0 {
            value.magnitude << (-shift) as u32
        } else if shift >= 128 {
            // Magnitudes stay below 2^127, so this is under half an LSB.
            0
        } else {
            let kept = value.magnitude >> shift as u32;
            let half = 1u128 << (shift - 1) as u32;
            let rem = value.magnitude & ((1u128 << shift as u32) - 1);
            match mode {
                RoundingMode::TowardZero => kept,
                RoundingMode::NearestEven => {
                    if rem > half || (rem == half && kept & 1 == 1) {
                        kept + 1
                    } else {
                        kept
                    }
                }
            }
        };
        let mut e = if unbiased < emin { emin } else { unbiased };
        if q >> (man + 1) as u32 != 0 {
            q >>= 1;
            e += 1;
        }
        if e > emax {
            let bits = match mode {
                RoundingMode::NearestEven => self.infinity(value.negative),
                RoundingMode::TowardZero => self.max_finite(value.negative),
            };
            return Encoded { bits, overflow: true };
        }
        let bits = if q >> man as u32 == 0 {
            // Subnormal (or rounded up into the smallest normal, which the
            // encoding handles on its own).
            sign | q as u32
        } else {
            let field = (e + self.bias()) as u32;
            sign | (field << self.mantissa_bits) | (q as u32 & ((1 << self.mantissa_bits) - 1))
        };
        Encoded { bits, overflow: false }
    }

    pub fn from_f64(self, value: f64, mode: RoundingMode) -> Encoded {
        if value.is_nan() {
            return Encoded { bits: self.infinity(false) | 1, overflow: false };
        }
        if value.is_infinite() {
            return Encoded { bits: self.infinity(value < 0.0), overflow: true };
        }
        self.round_exact(ExactValue::from_f64(value), mode)
    }

    /// Exactly-formed product rounded once.
    pub fn mul(self, a: u32, b: u32, mode: RoundingMode) -> Encoded {
        match (self.to_exact(a), self.to_exact(b)) {
            (Some(x), Some(y)) => self.round_exact(x.mul(y), mode),
            _ => self.special(a, b, false),
        }
    }

    /// Exactly-formed sum rounded once.
    pub fn add(self, a: u32, b: u32, mode: RoundingMode) -> Encoded {
        match (self.to_exact(a), self.to_exact(b)) {
            (Some(x), Some(y)) => {
                let sum = x.add(y);
                // Exact cancellation gives +0 except (−0) + (−0).
                if sum.magnitude == 0 {
                    return Encoded { bits: if x.negative && y.negative { self.sign_bit() } else { 0 }, overflow: false };
                }
                self.round_exact(sum, mode)
            }
            _ => self.special(a, b, true),
        }
    }

    fn special(self, a: u32, b: u32, is_add: bool) -> Encoded {
        let nan = Encoded { bits: self.infinity(false) | 1, overflow: false };
        let fa = self.to_f64(a);
        let fb = self.to_f64(b);
        let r = if is_add { fa + fb } else { fa * fb };
        if r.is_nan() {
            nan
        } else {
            Encoded { bits: self.infinity(r < 0.0), overflow: true }
        }
    }
}

impl ExactValue {
    pub const ZERO: Self = Self { negative: false, magnitude: 0, exponent: 0 };

    pub fn from_f64(value: f64) -> Self {
        let bits = value.to_bits();
        let negative = bits >> 63 != 0;
        let field = ((bits >> 52) & 0x7FF) as i32;
        let mantissa = bits & ((1u64 << 52) - 1);
        let (magnitude, exponent) = if field == 0 {
            (mantissa as u128, -1074)
        } else {
            ((mantissa | (1u64 << 52)) as u128, field - 1075)
        };
        Self { negative, magnitude, exponent }
    }

    pub fn to_f64(self) -> f64 {
        // Correct for magnitudes up to 2^53; wider values round once in the
        // int→float conversion, which is all callers need.
        let m = self.magnitude as f64;
        let v = m * pow2(self.exponent);
        if self.negative {
            -v
        } else {
            v
        }
    }

    pub fn mul(self, other: Self) -> Self {
        Self {
            negative: self.negative ^ other.negative,
            magnitude: self.magnitude * other.magnitude,
            exponent: self.exponent + other.exponent,
        }
    }

    /// Exact sum. Callers keep operand exponents within ~100 bits of each
    /// other (true for every format in this module).
    pub fn add(self, other: Self) -> Self {
        if self.magnitude == 0 {
            return other;
        }
        if other.magnitude == 0 {
            return self;
        }
        let e = self.exponent.min(other.exponent);
        let a = self.magnitude << (self.exponent - e) as u32;
        let b = other.magnitude << (other.exponent - e) as u32;
        let (negative, magnitude) = match (self.negative, other.negative) {
            (sa, sb) if sa == sb => (sa, a + b),
            (sa, _) => {
                if a >= b {
                    (sa, a - b)
                } else {
                    (!sa, b - a)
                }
            }
        };
        Self { negative, magnitude, exponent: e }
    }
}

/// FP16 × FP16 with a single rounding.
pub fn fp16_mul(a: Fp16Bits, b: Fp16Bits, mode: RoundingMode) -> (Fp16Bits, bool) {
    let r = FloatFormat::FP16.mul(a.0 as u32, b.0 as u32, mode);
    (Fp16Bits(r.bits as u16), r.overflow)
}

/// FP16 + FP16 with a single rounding.
pub fn fp16_add(a: Fp16Bits, b: Fp16Bits, mode: RoundingMode) -> (Fp16Bits, bool) {
    let r = FloatFormat::FP16.add(a.0 as u32, b.0 as u32, mode);
    (Fp16Bits(r.bits as u16), r.overflow)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decompose_examples() {
        let one = Fp16Bits(0x3C00).decompose();
        assert_eq!((one.negative, one.exponent, one.significand), (false, 0, 0b100_0000_0000));
        let zero = Fp16Bits(0x0000).decompose();
        assert_eq!(zero.class, FloatClass::Zero);
        assert_eq!(zero.significand, 0);
        assert!(!zero.negative);
        let m5 = Fp16Bits(0xC500).decompose();
        assert_eq!((m5.negative, m5.exponent, m5.significand), (true, 2, 0b101_0000_0000));
    }

    #[test]
    fn compose_inverts_decompose_exhaustively() {
        for bits in 0..=u16::MAX {
            let x = Fp16Bits(bits);
            assert_eq!(Fp16Bits::compose(x.decompose()), x, "{bits:#06x}");
        }
    }

    /// Oracle: decode each pattern straight from the IEEE definition in f64
    /// and check the decomposition reproduces it.
    #[test]
    fn decompose_matches_definition_exhaustively() {
        for bits in 0..=u16::MAX {
            let x = Fp16Bits(bits);
            let p = x.decompose();
            let e = (bits >> 10) & 0x1F;
            let m = (bits & 0x3FF) as f64;
            let s = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
            let expected = match e {
                0 => s * m * 2f64.powi(-24),
                31 => continue,
                _ => s * (1.0 + m / 1024.0) * 2f64.powi(e as i32 - 15),
            };
            let got = (if p.negative { -1.0 } else { 1.0 }) * p.significand as f64 * 2f64.powi(p.exponent - 10);
            assert_eq!(got, expected, "{bits:#06x}");
            assert_eq!(x.to_f64(), expected);
        }
    }

    #[test]
    fn specials_are_classified() {
        assert_eq!(Fp16Bits::INFINITY.class(), FloatClass::Infinite);
        assert_eq!(Fp16Bits(0x7E00).class(), FloatClass::Nan);
        assert_eq!(Fp16Bits(0x0001).class(), FloatClass::Subnormal);
        assert_eq!(Fp16Bits(0x0001).to_f64(), 2f64.powi(-24));
    }

    #[test]
    fn from_f64_matches_half_crate() {
        // Every FP16 value, every midpoint between neighbours, and nudges
        // either side of the midpoint.
        for bits in 0..0x7BFFu16 {
            let lo = Fp16Bits(bits).to_f64();
            let hi = Fp16Bits(bits + 1).to_f64();
            let mid = (lo + hi) / 2.0;
            // The nudges are one f32 ulp so the oracle's f32 path is exact.
            let m = mid as f32;
            let up = f32::from_bits(m.to_bits() + 1);
            let down = f32::from_bits(m.to_bits() - 1);
            for v in [lo as f32, m, up, down, -m] {
                let expected = half::f16::from_f32(v).to_bits();
                assert_eq!(Fp16Bits::from_f64(v as f64).0, expected, "v={v:e}");
            }
        }
        assert_eq!(Fp16Bits::from_f64(1e6), Fp16Bits::INFINITY);
        assert_eq!(Fp16Bits::from_f64(65520.0), Fp16Bits::INFINITY);
        assert_eq!(Fp16Bits::from_f64(65519.0), Fp16Bits::MAX);
        assert_eq!(Fp16Bits::from_f64(1e-9), Fp16Bits::ZERO);
    }

    #[test]
    fn truncation_mode_rounds_toward_zero() {
        let x = 1.0 + 1.9 / 1024.0;
        assert_eq!(Fp16Bits::from_f64_with(x, RoundingMode::TowardZero).0, 0x3C01);
        assert_eq!(Fp16Bits::from_f64_with(-x, RoundingMode::TowardZero).0, 0xBC01);
        assert_eq!(Fp16Bits::from_f64_with(1e6, RoundingMode::TowardZero), Fp16Bits::MAX);
    }

    #[test]
    fn fp16_mul_and_add_round_once() {
        let mut state = 0x1234_5678u32;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 17;
            state ^= state << 5;
            state
        };
        for _ in 0..20000 {
            let a = Fp16Bits((next() & 0x7BFF) as u16 | ((next() & 1) << 15) as u16);
            let b = Fp16Bits((next() & 0x7BFF) as u16 | ((next() & 1) << 15) as u16);
            // Products and sums of two halves are exact in f64.
            let (p, _) = fp16_mul(a, b, RoundingMode::NearestEven);
            assert_eq!(p.0, half::f16::from_f64(a.to_f64() * b.to_f64()).to_bits());
            let (s, _) = fp16_add(a, b, RoundingMode::NearestEven);
            let expect = half::f16::from_f64(a.to_f64() + b.to_f64()).to_bits();
            if s.0 & 0x7FFF == 0 {
                assert_eq!(expect & 0x7FFF, 0);
            } else {
                assert_eq!(s.0, expect);
            }
        }
    }

    #[test]
    fn fp20_layout() {
        let f = FloatFormat::FP20;
        assert_eq!(f.width(), 20);
        assert_eq!(f.bias(), 31);
        let one = f.from_f64(1.0, RoundingMode::NearestEven).bits;
        assert_eq!(one, 31 << 13);
        assert_eq!(f.to_f64(one), 1.0);
        let x = 1.0 + 2f64.powi(-13);
        assert_eq!(f.to_f64(f.from_f64(x, RoundingMode::NearestEven).bits), x);
        let tie = 1.0 + 2f64.powi(-14);
        assert_eq!(f.to_f64(f.from_f64(tie, RoundingMode::NearestEven).bits), 1.0);
        // Smallest subnormal.
        assert_eq!(f.to_f64(1), 2f64.powi(-30 - 13));
    }
}
