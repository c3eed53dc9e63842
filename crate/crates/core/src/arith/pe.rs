//! The four-stage mixed-precision vector multiplier.
//!
//! Stage 0 splits operands into sign/exponent/significand. Stage 1 XORs
//! signs, multiplies full significands and finds the largest product
//! exponent. Stage 2 right-shifts every product into a common fixed-point
//! frame (truncating) and sums the two's-complement addends. Stage 3
//! normalizes the sum back to FP16 and applies the block scale.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fp16::{fp16_mul, ExactValue, FloatClass, FloatFormat, Fp16Bits, RoundingMode};

/// Signed 4-bit weight restricted to the symmetric range [−7, 7].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Int4Weight(i8);

impl Int4Weight {
    pub const ZERO: Self = Self(0);
    pub const MAX: i8 = 7;

    pub fn new(value: i32) -> Result<Self> {
        if (-7..=7).contains(&value) {
            Ok(Self(value as i8))
        } else {
            Err(Error::Int4Range(value))
        }
    }

    /// Saturating constructor.
    pub fn clamped(value: i32) -> Self {
        Self(value.clamp(-7, 7) as i8)
    }

    #[inline]
    pub const fn get(self) -> i8 {
        self.0
    }

    /// Two's-complement nibble.
    #[inline]
    pub const fn to_nibble(self) -> u8 {
        (self.0 as u8) & 0x0F
    }

    pub fn from_nibble(nibble: u8) -> Result<Self> {
        let v = ((nibble << 4) as i8) >> 4;
        Self::new(v as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum PeMode {
    /// FP16 × INT4 on all `t_in` lanes.
    Ffn,
    /// FP16 × FP16 on `t_in / 4` lanes.
    Mha,
}

impl PeMode {
    /// Width of a raw significand product and its fraction bits.
    const fn product_format(self) -> (u32, i32) {
        match self {
            PeMode::Ffn => (14, 10),
            PeMode::Mha => (22, 20),
        }
    }
}

/// Datapath widths of the multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PeConfig {
    pub t_in: usize,
    /// Two's-complement width of the accumulator shared by both modes.
    pub accumulator_width: u32,
    /// Signed width of an aligned FFN product entering the adder tree.
    pub ffn_addend_width: u32,
    /// Signed width of an aligned MHA product entering the adder tree.
    pub mha_addend_width: u32,
    /// Rounding of the normalization and scale stages.
    pub rounding: RoundingMode,
}

impl Default for PeConfig {
    fn default() -> Self {
        Self {
            t_in: 128,
            accumulator_width: 26,
            ffn_addend_width: 19,
            mha_addend_width: 21,
            rounding: RoundingMode::NearestEven,
        }
    }
}

impl PeConfig {
    /// 19-bit accumulator with 12-bit FFN addends: the tightest split in
    /// which 128 addends cannot overflow a 19-bit adder.
    pub fn narrow_adder() -> Self {
        Self { accumulator_width: 19, ffn_addend_width: 12, mha_addend_width: 14, ..Self::default() }
    }

    pub fn lanes(&self, mode: PeMode) -> usize {
        match mode {
            PeMode::Ffn => self.t_in,
            PeMode::Mha => self.t_in / 4,
        }
    }

    pub fn addend_width(&self, mode: PeMode) -> u32 {
        match mode {
            PeMode::Ffn => self.ffn_addend_width,
            PeMode::Mha => self.mha_addend_width,
        }
    }

    /// Checks that a full-lane sum can never overflow the accumulator.
    pub fn validate(&self) -> Result<()> {
        if self.t_in < 4 || !self.t_in.is_multiple_of(4) {
            return Err(Error::InvalidConfig(alloc::format!("t_in {} must be a positive multiple of 4", self.t_in)));
        }
        if self.accumulator_width > 62 {
            return Err(Error::InvalidConfig("accumulator wider than 62 bits".into()));
        }
        for mode in [PeMode::Ffn, PeMode::Mha] {
            let w = self.addend_width(mode);
            let growth = ceil_log2(self.lanes(mode));
            if w < 2 || w + growth > self.accumulator_width {
                return Err(Error::InvalidConfig(alloc::format!(
                    "{mode:?} addend width {w} + {growth} exceeds accumulator width {}",
                    self.accumulator_width
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

/// Output of one dot-product invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DotResult {
    pub value: Fp16Bits,
    /// The accumulator clamped.
    pub saturated: bool,
    /// The normalized or scaled result exceeded the FP16 range.
    pub overflow: bool,
}

/// Every intermediate of one invocation, lane by lane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DotTrace {
    pub mode: PeMode,
    pub signs: Vec<bool>,
    pub products: Vec<u64>,
    pub product_exponents: Vec<i32>,
    /// `None` when every product is zero.
    pub max_exponent: Option<i32>,
    pub distances: Vec<u32>,
    pub aligned: Vec<i64>,
    pub accumulator: i64,
    /// Weight of the accumulator LSB as a power of two.
    pub lsb_exponent: i32,
    pub leading_zeros: u32,
    pub saturated: bool,
    pub pre_scale: Fp16Bits,
    pub scale: Fp16Bits,
    pub result: Fp16Bits,
}

#[derive(Clone, Copy)]
struct Lane {
    negative: bool,
    product: u64,
    exponent: i32,
}

fn checked(x: Fp16Bits) -> Result<crate::fp16::Fp16Parts> {
    let p = x.decompose();
    match p.class {
        FloatClass::Infinite | FloatClass::Nan => Err(Error::NonFiniteInput),
        _ => Ok(p),
    }
}

fn ffn_lane(f: Fp16Bits, w: Int4Weight) -> Result<Lane> {
    let p = checked(f)?;
    let w = w.get();
    Ok(Lane {
        negative: p.negative ^ (w < 0),
        product: p.significand as u64 * w.unsigned_abs() as u64,
        exponent: p.exponent,
    })
}

fn mha_lane(f: Fp16Bits, k: Fp16Bits) -> Result<Lane> {
    let a = checked(f)?;
    let b = checked(k)?;
    Ok(Lane {
        negative: a.negative ^ b.negative,
        product: a.significand as u64 * b.significand as u64,
        exponent: a.exponent + b.exponent,
    })
}

/// Right shift of a product into the frame; negative shifts widen.
#[inline]
fn align(product: u64, shift: i32) -> u64 {
    if product == 0 || shift >= 64 {
        0
    } else if shift >= 0 {
        product >> shift
    } else {
        product << (-shift) as u32
    }
}

struct Frame {
    max_exponent: Option<i32>,
    /// Shift applied to a product at the maximum exponent.
    base_shift: i32,
    lsb_exponent: i32,
}

fn frame(cfg: &PeConfig, mode: PeMode, lanes: &[Lane]) -> Frame {
    let (raw_width, frac) = mode.product_format();
    let magnitude_bits = cfg.addend_width(mode) as i32 - 1;
    let base_shift = raw_width as i32 - magnitude_bits;
    // Lanes whose product is zero take no part in the exponent comparison.
    let max_exponent = lanes.iter().filter(|l| l.product != 0).map(|l| l.exponent).max();
    let lsb_exponent = max_exponent.unwrap_or(0) - frac + base_shift;
    Frame { max_exponent, base_shift, lsb_exponent }
}

fn saturate(sum: i64, width: u32) -> (i64, bool) {
    let hi = (1i64 << (width - 1)) - 1;
    let lo = -(1i64 << (width - 1));
    if sum > hi {
        (hi, true)
    } else if sum < lo {
        (lo, true)
    } else {
        (sum, false)
    }
}

fn normalize(cfg: &PeConfig, acc: i64, lsb_exponent: i32, scale: Fp16Bits) -> (Fp16Bits, Fp16Bits, bool) {
    let pre = FloatFormat::FP16.round_exact(
        ExactValue { negative: acc < 0, magnitude: acc.unsigned_abs() as u128, exponent: lsb_exponent },
        cfg.rounding,
    );
    let pre_scale = Fp16Bits(pre.bits as u16);
    let (value, scaled_overflow) = fp16_mul(pre_scale, scale, cfg.rounding);
    (pre_scale, value, pre.overflow || scaled_overflow)
}

fn run(cfg: &PeConfig, mode: PeMode, lanes: &[Lane], scale: Fp16Bits, trace: Option<&mut DotTrace>) -> Result<DotResult> {
    checked(scale)?;
    let fr = frame(cfg, mode, lanes);
    let max = fr.max_exponent.unwrap_or(0);
    let mut sum = 0i64;
    for l in lanes {
        let a = align(l.product, max - l.exponent + fr.base_shift) as i64;
        sum += if l.negative { -a } else { a };
    }
    let (acc, saturated) = saturate(sum, cfg.accumulator_width);
    let (pre_scale, value, overflow) = normalize(cfg, acc, fr.lsb_exponent, scale);
    if let Some(t) = trace {
        t.mode = mode;
        t.signs = lanes.iter().map(|l| l.negative).collect();
        t.products = lanes.iter().map(|l| l.product).collect();
        t.product_exponents = lanes.iter().map(|l| l.exponent).collect();
        t.max_exponent = fr.max_exponent;
        t.distances = lanes
            .iter()
            .map(|l| if l.product == 0 { 0 } else { (max - l.exponent) as u32 })
            .collect();
        t.aligned = lanes
            .iter()
            .map(|l| {
                let a = align(l.product, max - l.exponent + fr.base_shift) as i64;
                if l.negative {
                    -a
                } else {
                    a
                }
            })
            .collect();
        t.accumulator = acc;
        t.lsb_exponent = fr.lsb_exponent;
        t.leading_zeros = cfg.accumulator_width - (64 - acc.unsigned_abs().leading_zeros()).min(cfg.accumulator_width);
        t.saturated = saturated;
        t.pre_scale = pre_scale;
        t.scale = scale;
        t.result = value;
    }
    Ok(DotResult { value, saturated, overflow })
}

fn ffn_lanes(cfg: &PeConfig, feat: &[Fp16Bits], wt: &[Int4Weight]) -> Result<Vec<Lane>> {
    let lanes = cfg.lanes(PeMode::Ffn);
    if feat.len() != wt.len() {
        return Err(Error::ShapeMismatch(alloc::format!("{} features vs {} weights", feat.len(), wt.len())));
    }
    if feat.len() > lanes {
        return Err(Error::LaneCount { given: feat.len(), lanes });
    }
    feat.iter().zip(wt).map(|(&f, &w)| ffn_lane(f, w)).collect()
}

fn mha_lanes(cfg: &PeConfig, feat: &[Fp16Bits], kv: &[Fp16Bits]) -> Result<Vec<Lane>> {
    let lanes = cfg.lanes(PeMode::Mha);
    if feat.len() != kv.len() {
        return Err(Error::ShapeMismatch(alloc::format!("{} features vs {} cache values", feat.len(), kv.len())));
    }
    if feat.len() > lanes {
        return Err(Error::LaneCount { given: feat.len(), lanes });
    }
    feat.iter().zip(kv).map(|(&f, &k)| mha_lane(f, k)).collect()
}

/// FP16 × INT4 dot product of up to `t_in` lanes, times an FP16 scale.
/// Missing lanes behave as zeros.
pub fn dot_ffn(cfg: &PeConfig, feat: &[Fp16Bits], wt: &[Int4Weight], scale: Fp16Bits) -> Result<DotResult> {
    run(cfg, PeMode::Ffn, &ffn_lanes(cfg, feat, wt)?, scale, None)
}

/// FP16 × FP16 dot product of up to `t_in / 4` lanes, times an FP16 scale.
pub fn dot_mha(cfg: &PeConfig, feat: &[Fp16Bits], kv: &[Fp16Bits], scale: Fp16Bits) -> Result<DotResult> {
    run(cfg, PeMode::Mha, &mha_lanes(cfg, feat, kv)?, scale, None)
}

pub fn trace_ffn(cfg: &PeConfig, feat: &[Fp16Bits], wt: &[Int4Weight], scale: Fp16Bits) -> Result<(DotResult, DotTrace)> {
    let mut t = DotTrace::empty(PeMode::Ffn);
    let r = run(cfg, PeMode::Ffn, &ffn_lanes(cfg, feat, wt)?, scale, Some(&mut t))?;
    Ok((r, t))
}

pub fn trace_mha(cfg: &PeConfig, feat: &[Fp16Bits], kv: &[Fp16Bits], scale: Fp16Bits) -> Result<(DotResult, DotTrace)> {
    let mut t = DotTrace::empty(PeMode::Mha);
    let r = run(cfg, PeMode::Mha, &mha_lanes(cfg, feat, kv)?, scale, Some(&mut t))?;
    Ok((r, t))
}

impl DotTrace {
    fn empty(mode: PeMode) -> Self {
        Self {
            mode,
            signs: Vec::new(),
            products: Vec::new(),
            product_exponents: Vec::new(),
            max_exponent: None,
            distances: Vec::new(),
            aligned: Vec::new(),
            accumulator: 0,
            lsb_exponent: 0,
            leading_zeros: 0,
            saturated: false,
            pre_scale: Fp16Bits::ZERO,
            scale: Fp16Bits::ONE,
            result: Fp16Bits::ZERO,
        }
    }

    /// Recomputes stages 2 and 3 from the recorded stage-1 outputs and
    /// returns the final value.
    pub fn replay(&self, cfg: &PeConfig) -> Fp16Bits {
        let (raw_width, _) = self.mode.product_format();
        let base_shift = raw_width as i32 - (cfg.addend_width(self.mode) as i32 - 1);
        let sum: i64 = self
            .products
            .iter()
            .zip(&self.distances)
            .zip(&self.signs)
            .map(|((&p, &d), &neg)| {
                let a = align(p, d as i32 + base_shift) as i64;
                if neg {
                    -a
                } else {
                    a
                }
            })
            .sum();
        let (acc, _) = saturate(sum, cfg.accumulator_width);
        normalize(cfg, acc, self.lsb_exponent, self.scale).1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn h(x: f64) -> Fp16Bits {
        Fp16Bits::from_f64(x)
    }

    fn w(v: i32) -> Int4Weight {
        Int4Weight::new(v).unwrap()
    }

    #[test]
    fn int4_range_is_symmetric() {
        assert!(Int4Weight::new(-8).is_err());
        assert!(Int4Weight::new(8).is_err());
        for v in -7..=7 {
            let x = w(v);
            assert_eq!(Int4Weight::from_nibble(x.to_nibble()).unwrap(), x);
        }
        assert!(Int4Weight::from_nibble(0x8).is_err());
    }

    #[test]
    fn default_config_is_consistent() {
        let cfg = PeConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.lanes(PeMode::Ffn), 128);
        assert_eq!(cfg.lanes(PeMode::Mha), 32);
        PeConfig::narrow_adder().validate().unwrap();
        let bad = PeConfig { accumulator_width: 20, ..PeConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_input_gives_zero() {
        let cfg = PeConfig::default();
        let feat = vec![Fp16Bits::ZERO; 128];
        let wt: Vec<_> = (0..128).map(|i| w(i % 15 - 7)).collect();
        let r = dot_ffn(&cfg, &feat, &wt, Fp16Bits::ONE).unwrap();
        assert_eq!(r.value.to_f64(), 0.0);
    }

    #[test]
    fn single_lane_is_exact() {
        let cfg = PeConfig::default();
        let mut feat = vec![Fp16Bits::ZERO; 128];
        let mut wt = vec![Int4Weight::ZERO; 128];
        feat[0] = Fp16Bits::ONE;
        wt[0] = w(3);
        assert_eq!(dot_ffn(&cfg, &feat, &wt, Fp16Bits::ONE).unwrap().value, h(3.0));
    }

    #[test]
    fn mha_unit_vector() {
        let cfg = PeConfig::default();
        let mut a = vec![Fp16Bits::ZERO; 32];
        a[0] = Fp16Bits::ONE;
        assert_eq!(dot_mha(&cfg, &a, &a, Fp16Bits::ONE).unwrap().value, Fp16Bits::ONE);
    }

    #[test]
    fn mha_equal_exponents_no_truncation_loss() {
        // 32 × 0.25 = 8, every product sits at the same exponent.
        let cfg = PeConfig::default();
        let a = vec![h(0.5); 32];
        let (r, t) = trace_mha(&cfg, &a, &a, Fp16Bits::ONE).unwrap();
        assert_eq!(r.value, h(8.0));
        assert!(t.distances.iter().all(|&d| d == 0));
        // Same holds for the narrow 12-bit split.
        let narrow = PeConfig::narrow_adder();
        assert_eq!(dot_mha(&narrow, &a, &a, Fp16Bits::ONE).unwrap().value, h(8.0));
    }

    #[test]
    fn rejects_special_values_and_extra_lanes() {
        let cfg = PeConfig::default();
        let feat = [Fp16Bits::INFINITY];
        assert_eq!(dot_ffn(&cfg, &feat, &[w(1)], Fp16Bits::ONE), Err(Error::NonFiniteInput));
        assert_eq!(dot_ffn(&cfg, &[Fp16Bits::ONE], &[w(1)], Fp16Bits(0x7E00)), Err(Error::NonFiniteInput));
        let many = vec![Fp16Bits::ONE; 33];
        assert!(matches!(dot_mha(&cfg, &many, &many, Fp16Bits::ONE), Err(Error::LaneCount { .. })));
    }

    #[test]
    fn overflow_is_flagged() {
        let cfg = PeConfig::default();
        let feat = vec![h(60000.0); 4];
        let wt = vec![w(7); 4];
        let r = dot_ffn(&cfg, &feat, &wt, Fp16Bits::ONE).unwrap();
        assert!(r.overflow);
        assert_eq!(r.value, Fp16Bits::INFINITY);
        let r = dot_ffn(&cfg, &feat[..1], &wt[..1], h(-2.0)).unwrap();
        assert!(r.overflow);
        assert_eq!(r.value, Fp16Bits::NEG_INFINITY);
    }

    #[test]
    fn narrow_accumulator_saturates_and_reports() {
        // 12-bit accumulator with 12-bit addends: two full-scale lanes clamp.
        let cfg = PeConfig { accumulator_width: 12, ffn_addend_width: 12, ..PeConfig::default() };
        let feat = vec![h(1.999); 128];
        let wt = vec![w(7); 128];
        let (r, t) = trace_ffn(&cfg, &feat, &wt, Fp16Bits::ONE).unwrap();
        assert!(r.saturated);
        assert_eq!(t.accumulator, (1 << 11) - 1);
        let neg: Vec<_> = wt.iter().map(|x| w(-x.get() as i32)).collect();
        let (r, t) = trace_ffn(&cfg, &feat, &neg, Fp16Bits::ONE).unwrap();
        assert!(r.saturated);
        assert_eq!(t.accumulator, -(1 << 11));
        // Default widths never clamp a full-scale sum.
        let r = dot_ffn(&PeConfig::default(), &feat, &wt, Fp16Bits::ONE).unwrap();
        assert!(!r.saturated);
    }

    #[test]
    fn trace_records_stage_outputs() {
        let cfg = PeConfig::default();
        let feat = [h(1.5), h(-0.25), h(0.0), h(3.0)];
        let wt = [w(2), w(3), w(7), w(0)];
        let (r, t) = trace_ffn(&cfg, &feat, &wt, h(0.5)).unwrap();
        assert_eq!(t.signs, vec![false, true, false, false]);
        assert_eq!(t.products, vec![0x600 * 2, 0x400 * 3, 0, 0]);
        // Lane 3 has a zero weight, so 3.0's exponent is ignored.
        assert_eq!(t.max_exponent, Some(0));
        assert_eq!(t.distances, vec![0, 2, 0, 0]);
        // 1.5×2 − 0.25×3 = 2.25, scaled by 0.5.
        assert_eq!(t.pre_scale, h(2.25));
        assert_eq!(r.value, h(1.125));
        assert_eq!(t.replay(&cfg), r.value);
        assert_eq!(t.leading_zeros, 26 - (64 - t.accumulator.unsigned_abs().leading_zeros()));
    }

    #[test]
    fn truncating_rounding_switch() {
        let cfg = PeConfig { rounding: RoundingMode::TowardZero, ..PeConfig::default() };
        // 1 + 2^-11 is a tie under nearest-even; truncation drops it too, but
        // 1 + 3·2^-12 separates the two modes.
        let feat = [h(1.0), h(3.0 * 2f64.powi(-12))];
        let wt = [w(1), w(1)];
        let t = dot_ffn(&cfg, &feat, &wt, Fp16Bits::ONE).unwrap().value;
        let n = dot_ffn(&PeConfig::default(), &feat, &wt, Fp16Bits::ONE).unwrap().value;
        assert_eq!(t, h(1.0));
        assert_eq!(n, Fp16Bits(0x3C01));
    }
}
