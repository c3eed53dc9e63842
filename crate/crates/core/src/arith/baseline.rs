//! Floating-point adder-tree baselines: every product and every pairwise
//! sum is rounded into the working format.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fp16::{FloatFormat, Fp16Bits, RoundingMode};

use super::pe::Int4Weight;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TreeVariant {
    /// Intermediates in IEEE half precision.
    Fp16Tree,
    /// Intermediates in S1/E6/M13.
    Fp20Tree,
}

impl TreeVariant {
    pub fn format(self) -> FloatFormat {
        match self {
            TreeVariant::Fp16Tree => FloatFormat::FP16,
            TreeVariant::Fp20Tree => FloatFormat::FP20,
        }
    }
}

/// Second operand of a baseline dot product.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Int4(&'a [Int4Weight]),
    Fp16(&'a [Fp16Bits]),
}

impl Operand<'_> {
    fn len(&self) -> usize {
        match self {
            Operand::Int4(w) => w.len(),
            Operand::Fp16(k) => k.len(),
        }
    }
}

fn widen(fmt: FloatFormat, x: Fp16Bits, mode: RoundingMode) -> Result<u32> {
    if !x.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    // Every FP16 value is representable in FP20, so this never rounds.
    Ok(fmt.from_f64(x.to_f64(), mode).bits)
}

/// `scale × Σ feat_i·op_i` through a pairwise reduction tree, converted to
/// FP16 at the end. Returns the result and whether any stage overflowed.
pub fn dot_baseline(
    variant: TreeVariant,
    feat: &[Fp16Bits],
    op: Operand<'_>,
    scale: Fp16Bits,
    mode: RoundingMode,
) -> Result<(Fp16Bits, bool)> {
    if feat.len() != op.len() {
        return Err(Error::ShapeMismatch(alloc::format!("{} features vs {} operands", feat.len(), op.len())));
    }
    let fmt = variant.format();
    let mut overflow = false;
    let mut level: Vec<u32> = Vec::with_capacity(feat.len().max(1));
    for (i, &f) in feat.iter().enumerate() {
        let a = widen(fmt, f, mode)?;
        let b = match op {
            Operand::Int4(w) => fmt.from_f64(w[i].get() as f64, mode).bits,
            Operand::Fp16(k) => widen(fmt, k[i], mode)?,
        };
        let p = fmt.mul(a, b, mode);
        overflow |= p.overflow;
        level.push(p.bits);
    }
    if level.is_empty() {
        level.push(0);
    }
    while level.len() > 1 {
        let next: Vec<u32> = level
            .chunks(2)
            .map(|pair| match pair {
                [a, b] => {
                    let s = fmt.add(*a, *b, mode);
                    overflow |= s.overflow;
                    s.bits
                }
                [a] => *a,
                _ => unreachable!(),
            })
            .collect();
        level = next;
    }
    let s = fmt.mul(level[0], widen(fmt, scale, mode)?, mode);
    overflow |= s.overflow;
    let out = match fmt.to_exact(s.bits) {
        Some(v) => {
            let e = FloatFormat::FP16.round_exact(v, mode);
            overflow |= e.overflow;
            Fp16Bits(e.bits as u16)
        }
        None => Fp16Bits::from_f64(fmt.to_f64(s.bits)),
    };
    Ok((out, overflow))
}
