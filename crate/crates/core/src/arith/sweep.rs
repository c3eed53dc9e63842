//! Seeded random-input error measurement against an exact oracle.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fp16::{pow2, Fp16Bits};

use super::baseline::{dot_baseline, Operand, TreeVariant};
use super::pe::{dot_ffn, dot_mha, Int4Weight, PeConfig, PeMode};

/// Trials generated from one ChaCha stream.
pub const SWEEP_CHUNK: u64 = 1024;

/// Trials whose exact result is at or below this magnitude are skipped.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Design {
    Proposed,
    Tree(TreeVariant),
}

impl Design {
    pub const ALL: [Design; 3] =
        [Design::Proposed, Design::Tree(TreeVariant::Fp20Tree), Design::Tree(TreeVariant::Fp16Tree)];

    pub fn name(self) -> &'static str {
        match self {
            Design::Proposed => "proposed",
            Design::Tree(TreeVariant::Fp16Tree) => "fp16-tree",
            Design::Tree(TreeVariant::Fp20Tree) => "fp20-tree",
        }
    }
}

/// One set of dot-product inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Trial {
    Ffn { feat: Vec<Fp16Bits>, wt: Vec<Int4Weight>, scale: Fp16Bits },
    Mha { feat: Vec<Fp16Bits>, kv: Vec<Fp16Bits>, scale: Fp16Bits },
}

impl Trial {
    /// Features uniform in [−1, 1] rounded to FP16; weights uniform in
    /// [−7, 7] or cache values drawn like features; unit scale.
    pub fn random<R: Rng + ?Sized>(cfg: &PeConfig, mode: PeMode, rng: &mut R) -> Self {
        let n = cfg.lanes(mode);
        let feat: Vec<Fp16Bits> = (0..n).map(|_| Fp16Bits::from_f64(rng.random_range(-1.0..=1.0))).collect();
        match mode {
            PeMode::Ffn => {
                let wt = (0..n).map(|_| Int4Weight::clamped(rng.random_range(-7..=7))).collect();
                Trial::Ffn { feat, wt, scale: Fp16Bits::ONE }
            }
            PeMode::Mha => {
                let kv = (0..n).map(|_| Fp16Bits::from_f64(rng.random_range(-1.0..=1.0))).collect();
                Trial::Mha { feat, kv, scale: Fp16Bits::ONE }
            }
        }
    }

    pub fn zeros(cfg: &PeConfig, mode: PeMode) -> Self {
        let n = cfg.lanes(mode);
        match mode {
            PeMode::Ffn => Trial::Ffn {
                feat: alloc::vec![Fp16Bits::ZERO; n],
                wt: alloc::vec![Int4Weight::ZERO; n],
                scale: Fp16Bits::ONE,
            },
            PeMode::Mha => Trial::Mha {
                feat: alloc::vec![Fp16Bits::ZERO; n],
                kv: alloc::vec![Fp16Bits::ZERO; n],
                scale: Fp16Bits::ONE,
            },
        }
    }

    pub fn mode(&self) -> PeMode {
        match self {
            Trial::Ffn { .. } => PeMode::Ffn,
            Trial::Mha { .. } => PeMode::Mha,
        }
    }

    /// Runs the trial through a design: (result, saturated, overflow).
    pub fn evaluate(&self, cfg: &PeConfig, design: Design) -> Result<(Fp16Bits, bool, bool)> {
        match (self, design) {
            (Trial::Ffn { feat, wt, scale }, Design::Proposed) => {
                let r = dot_ffn(cfg, feat, wt, *scale)?;
                Ok((r.value, r.saturated, r.overflow))
            }
            (Trial::Mha { feat, kv, scale }, Design::Proposed) => {
                let r = dot_mha(cfg, feat, kv, *scale)?;
                Ok((r.value, r.saturated, r.overflow))
            }
            (Trial::Ffn { feat, wt, scale }, Design::Tree(v)) => {
                let (r, o) = dot_baseline(v, feat, Operand::Int4(wt), *scale, cfg.rounding)?;
                Ok((r, false, o))
            }
            (Trial::Mha { feat, kv, scale }, Design::Tree(v)) => {
                let (r, o) = dot_baseline(v, feat, Operand::Fp16(kv), *scale, cfg.rounding)?;
                Ok((r, false, o))
            }
        }
    }

    pub fn exact(&self) -> Result<f64> {
        match self {
            Trial::Ffn { feat, wt, scale } => exact_dot(feat, Operand::Int4(wt), *scale),
            Trial::Mha { feat, kv, scale } => exact_dot(feat, Operand::Fp16(kv), *scale),
        }
    }
}

/// FP16 value as an integer multiple of 2^−24.
fn fixed(x: Fp16Bits) -> Result<i128> {
    if !x.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let p = x.decompose();
    let m = (p.significand as i128) << (p.exponent + 14) as u32;
    Ok(if p.negative { -m } else { m })
}

/// `scale × Σ feat_i·op_i` computed exactly in integers, then converted to
/// f64 once. Exact for up to 128 lanes of any finite FP16 inputs.
pub fn exact_dot(feat: &[Fp16Bits], op: Operand<'_>, scale: Fp16Bits) -> Result<f64> {
    let (sum, frac) = match op {
        Operand::Int4(w) => {
            if w.len() != feat.len() {
                return Err(Error::ShapeMismatch("operand length".into()));
            }
            let mut s = 0i128;
            for (&f, &w) in feat.iter().zip(w) {
                s += fixed(f)? * w.get() as i128;
            }
            (s, 24)
        }
        Operand::Fp16(k) => {
            if k.len() != feat.len() {
                return Err(Error::ShapeMismatch("operand length".into()));
            }
            let mut s = 0i128;
            for (&f, &k) in feat.iter().zip(k) {
                s += fixed(f)? * fixed(k)?;
            }
            (s, 48)
        }
    };
    let scaled = sum.checked_mul(fixed(scale)?).ok_or_else(|| Error::CapacityExceeded("oracle range".into()))?;
    Ok(scaled as f64 * pow2(-(frac + 24)))
}

/// Partial statistics of a run of trials; merge in chunk order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ChunkStats {
    pub trials: u64,
    /// Trials above the relative-error floor.
    pub counted: u64,
    pub sum_relative: f64,
    pub max_relative: f64,
    pub saturations: u64,
    pub overflows: u64,
}

impl ChunkStats {
    pub fn record(&mut self, emulated: Fp16Bits, exact: f64, saturated: bool, overflow: bool) {
        self.trials += 1;
        self.saturations += saturated as u64;
        self.overflows += overflow as u64;
        if exact.abs() > RELATIVE_ERROR_FLOOR {
            let rel = (emulated.to_f64() - exact).abs() / exact.abs();
            self.counted += 1;
            self.sum_relative += rel;
            if rel > self.max_relative {
                self.max_relative = rel;
            }
        }
    }

    pub fn merge(&mut self, other: &ChunkStats) {
        self.trials += other.trials;
        self.counted += other.counted;
        self.sum_relative += other.sum_relative;
        self.max_relative = self.max_relative.max(other.max_relative);
        self.saturations += other.saturations;
        self.overflows += other.overflows;
    }
}

/// Summary of a sweep. Percentages are relative errors × 100.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ErrorStats {
    pub trials: u64,
    pub counted: u64,
    pub mean_relative_error_pct: f64,
    pub max_relative_error_pct: f64,
    pub saturation_count: u64,
    pub overflow_count: u64,
}

impl From<ChunkStats> for ErrorStats {
    fn from(c: ChunkStats) -> Self {
        let mean = if c.counted == 0 { 0.0 } else { c.sum_relative / c.counted as f64 };
        Self {
            trials: c.trials,
            counted: c.counted,
            mean_relative_error_pct: mean * 100.0,
            max_relative_error_pct: c.max_relative * 100.0,
            saturation_count: c.saturations,
            overflow_count: c.overflows,
        }
    }
}

/// Random generator for chunk `index` of the sweep rooted at `seed`.
pub fn chunk_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Evaluates trials `[index·SWEEP_CHUNK, index·SWEEP_CHUNK + count)`.
pub fn sweep_chunk(cfg: &PeConfig, mode: PeMode, design: Design, seed: u64, index: u64, count: u64) -> Result<ChunkStats> {
    let mut rng = chunk_rng(seed, index);
    let mut stats = ChunkStats::default();
    for _ in 0..count.min(SWEEP_CHUNK) {
        let trial = Trial::random(cfg, mode, &mut rng);
        let exact = trial.exact()?;
        let (value, sat, ovf) = trial.evaluate(cfg, design)?;
        stats.record(value, exact, sat, ovf);
    }
    Ok(stats)
}

/// Number of chunks and size of chunk `i` for a sweep of `trials`.
pub fn chunk_sizes(trials: u64) -> impl Iterator<Item = (u64, u64)> {
    let n = trials.div_ceil(SWEEP_CHUNK);
    (0..n).map(move |i| (i, (trials - i * SWEEP_CHUNK).min(SWEEP_CHUNK)))
}

pub fn merge_chunks<'a>(chunks: impl IntoIterator<Item = &'a ChunkStats>) -> ErrorStats {
    let mut total = ChunkStats::default();
    for c in chunks {
        total.merge(c);
    }
    total.into()
}

/// Single-threaded sweep; sharding `chunk_sizes` across workers and
/// merging in index order gives the same result.
pub fn error_sweep(cfg: &PeConfig, mode: PeMode, design: Design, trials: u64, seed: u64) -> Result<ErrorStats> {
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    cfg.validate()?;
    let chunks = chunk_sizes(trials)
        .map(|(i, n)| sweep_chunk(cfg, mode, design, seed, i, n))
        .collect::<Result<Vec<_>>>()?;
    Ok(merge_chunks(&chunks))
}
