//! The unified activation layout `[outer, CH/T_out, H, W, T_out]`.
//!
//! Text activations use the token form `H = 1, W = token`. Every
//! `[W, T_out]` slab is address-contiguous, which is what makes bursts and
//! the segmented transpose possible without reformatting.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fp16::Fp16Bits;

pub const DEFAULT_T_OUT: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnifiedTensor {
    outer: usize,
    ch: usize,
    h: usize,
    w: usize,
    t_out: usize,
    data: Vec<Fp16Bits>,
}

impl UnifiedTensor {
    pub fn zeros(outer: usize, ch: usize, h: usize, w: usize, t_out: usize) -> Result<Self> {
        if t_out == 0 || outer == 0 {
            return Err(Error::InvalidConfig("t_out and outer must be positive".into()));
        }
        let slabs = ch.div_ceil(t_out);
        Ok(Self { outer, ch, h, w, t_out, data: vec![Fp16Bits::ZERO; outer * slabs * h * w * t_out] })
    }

    /// Token-form tensor of `tokens × ch` zeros.
    pub fn zeros_tokens(tokens: usize, ch: usize, t_out: usize) -> Result<Self> {
        Self::zeros(1, ch, 1, tokens, t_out)
    }

    /// Wraps layout-ordered data.
    pub fn from_raw(outer: usize, ch: usize, h: usize, w: usize, t_out: usize, data: Vec<Fp16Bits>) -> Result<Self> {
        let t = Self::zeros(outer, ch, h, w, t_out)?;
        if data.len() != t.data.len() {
            return Err(Error::ShapeMismatch(alloc::format!("{} elements for a layout of {}", data.len(), t.data.len())));
        }
        Ok(Self { data, ..t })
    }

    pub fn outer(&self) -> usize {
        self.outer
    }

    /// Logical channel count (before padding).
    pub fn channels(&self) -> usize {
        self.ch
    }

    pub fn slabs(&self) -> usize {
        self.ch.div_ceil(self.t_out)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Token count of a token-form tensor.
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn t_out(&self) -> usize {
        self.t_out
    }

    /// `[outer, CH/T_out, H, W, T_out]`.
    pub fn dims(&self) -> [usize; 5] {
        [self.outer, self.slabs(), self.h, self.w, self.t_out]
    }

    pub fn data(&self) -> &[Fp16Bits] {
        &self.data
    }

    pub fn into_data(self) -> Vec<Fp16Bits> {
        self.data
    }

    /// Flat offset of `(outer, channel, y, x)`.
    #[inline]
    pub fn offset(&self, o: usize, c: usize, y: usize, x: usize) -> usize {
        (((o * self.slabs() + c / self.t_out) * self.h + y) * self.w + x) * self.t_out + c % self.t_out
    }

    #[inline]
    pub fn get(&self, o: usize, c: usize, y: usize, x: usize) -> Fp16Bits {
        self.data[self.offset(o, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, o: usize, c: usize, y: usize, x: usize, v: Fp16Bits) {
        let i = self.offset(o, c, y, x);
        self.data[i] = v;
    }

    /// Token-form accessor: element `(token, channel)` of outer index 0.
    #[inline]
    pub fn at(&self, token: usize, c: usize) -> Fp16Bits {
        self.get(0, c, 0, token)
    }

    /// Channels of one token, in order.
    pub fn token_row(&self, o: usize, token: usize) -> Vec<Fp16Bits> {
        (0..self.ch).map(|c| self.get(o, c, 0, token)).collect()
    }

    /// Slab `s` of outer index `o` as one contiguous `[H·W, T_out]` slice.
    pub fn slab(&self, o: usize, s: usize) -> &[Fp16Bits] {
        let n = self.h * self.w * self.t_out;
        let start = (o * self.slabs() + s) * n;
        &self.data[start..start + n]
    }

    pub fn layout(&self) -> SlabLayout {
        SlabLayout {
            base: 0,
            outer: self.outer,
            slabs: self.slabs(),
            row_capacity: self.h * self.w,
            t_out: self.t_out,
        }
    }

    /// Checks the padding lanes hold zeros.
    pub fn validate(&self) -> Result<()> {
        for o in 0..self.outer {
            for c in self.ch..self.slabs() * self.t_out {
                for y in 0..self.h {
                    for x in 0..self.w {
                        if self.get(o, c, y, x).0 & 0x7FFF != 0 {
                            return Err(Error::Malformed(alloc::format!("padding lane {c} is nonzero")));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Row-major `[token][ch]` into token form.
pub fn to_unified(flat: &[Fp16Bits], tokens: usize, ch: usize, t_out: usize) -> Result<UnifiedTensor> {
    if flat.len() != tokens * ch {
        return Err(Error::ShapeMismatch(alloc::format!("{} values for {tokens}×{ch}", flat.len())));
    }
    let mut t = UnifiedTensor::zeros_tokens(tokens, ch, t_out)?;
    for tok in 0..tokens {
        for c in 0..ch {
            t.set(0, c, 0, tok, flat[tok * ch + c]);
        }
    }
    Ok(t)
}

/// Inverse of [`to_unified`] for outer index 0.
pub fn from_unified(t: &UnifiedTensor) -> Vec<Fp16Bits> {
    let mut out = Vec::with_capacity(t.tokens() * t.ch);
    for y in 0..t.h {
        for x in 0..t.w {
            for c in 0..t.ch {
                out.push(t.get(0, c, y, x));
            }
        }
    }
    out
}

/// Row-major `[H][W][CH]` image into `[1, CH/T_out, H, W, T_out]`.
pub fn image_to_unified(flat: &[Fp16Bits], h: usize, w: usize, ch: usize, t_out: usize) -> Result<UnifiedTensor> {
    if flat.len() != h * w * ch {
        return Err(Error::ShapeMismatch(alloc::format!("{} values for {h}×{w}×{ch}", flat.len())));
    }
    let mut t = UnifiedTensor::zeros(1, ch, h, w, t_out)?;
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                t.set(0, c, y, x, flat[(y * w + x) * ch + c]);
            }
        }
    }
    Ok(t)
}

/// Splits channels into `heads` equal groups moved to the outer dimension.
/// When the per-head width is a multiple of `t_out` the data is unchanged.
pub fn head_split(x: &UnifiedTensor, heads: usize) -> Result<UnifiedTensor> {
    if heads == 0 || !x.ch.is_multiple_of(heads) {
        return Err(Error::ShapeMismatch(alloc::format!("{} channels into {heads} heads", x.ch)));
    }
    let hd = x.ch / heads;
    let mut out = UnifiedTensor::zeros(x.outer * heads, hd, x.h, x.w, x.t_out)?;
    if hd.is_multiple_of(x.t_out) {
        out.data.copy_from_slice(&x.data);
        return Ok(out);
    }
    for o in 0..x.outer {
        for c in 0..x.ch {
            for y in 0..x.h {
                for xx in 0..x.w {
                    out.set(o * heads + c / hd, c % hd, y, xx, x.get(o, c, y, xx));
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`head_split`].
pub fn head_merge(x: &UnifiedTensor, heads: usize) -> Result<UnifiedTensor> {
    if heads == 0 || !x.outer.is_multiple_of(heads) {
        return Err(Error::ShapeMismatch(alloc::format!("outer {} not divisible by {heads} heads", x.outer)));
    }
    let hd = x.ch;
    let mut out = UnifiedTensor::zeros(x.outer / heads, hd * heads, x.h, x.w, x.t_out)?;
    if hd.is_multiple_of(x.t_out) {
        out.data.copy_from_slice(&x.data);
        return Ok(out);
    }
    for o in 0..x.outer {
        for c in 0..hd {
            for y in 0..x.h {
                for xx in 0..x.w {
                    out.set(o / heads, (o % heads) * hd + c, y, xx, x.get(o, c, y, xx));
                }
            }
        }
    }
    Ok(out)
}

/// Placement of a token-form tensor in memory: slab `s` of outer index `o`
/// starts at `base + (o·slabs + s)·row_capacity·t_out` elements.
/// `row_capacity` exceeds the live row count for buffers sized to the
/// maximum sequence length, such as the KV cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SlabLayout {
    pub base: usize,
    pub outer: usize,
    pub slabs: usize,
    pub row_capacity: usize,
    pub t_out: usize,
}

impl SlabLayout {
    pub fn slab_stride(&self) -> usize {
        self.row_capacity * self.t_out
    }

    pub fn slab_start(&self, o: usize, s: usize) -> usize {
        self.base + (o * self.slabs + s) * self.slab_stride()
    }

    pub fn footprint(&self) -> usize {
        self.outer * self.slabs * self.slab_stride()
    }

    /// Element address of `(outer, channel, row)`.
    pub fn address(&self, o: usize, c: usize, row: usize) -> usize {
        self.slab_start(o, c / self.t_out) + row * self.t_out + c % self.t_out
    }

    /// Maximal contiguous runs covering `rows` of slabs `slabs` for every
    /// outer index in `outer`.
    pub fn burst_plan(
        &self,
        outer: core::ops::Range<usize>,
        slabs: core::ops::Range<usize>,
        rows: core::ops::Range<usize>,
    ) -> BurstPlan {
        let mut segs: Vec<Segment> = Vec::new();
        if rows.is_empty() {
            return BurstPlan { t_out: self.t_out, segments: segs };
        }
        for o in outer {
            for s in slabs.clone() {
                let start = self.slab_start(o, s) + rows.start * self.t_out;
                let len = rows.len() * self.t_out;
                match segs.last_mut() {
                    Some(last) if last.start + last.len == start => last.len += len,
                    _ => segs.push(Segment { start, len }),
                }
            }
        }
        BurstPlan { t_out: self.t_out, segments: segs }
    }

    /// The whole live region of `rows` rows.
    pub fn full_plan(&self, rows: usize) -> BurstPlan {
        self.burst_plan(0..self.outer, 0..self.slabs, 0..rows)
    }

    /// One `[rows, t_out]` tile per slab of outer index `o`, in slab order.
    /// Reading tile `s` row `j` gives channels `s·t_out..` of key `j`, so
    /// walking the tiles in order streams Kᵀ column blocks without moving
    /// any element.
    pub fn segmented_transpose_view(&self, o: usize, rows: usize) -> TransposeView {
        let segments = (0..self.slabs).map(|s| Segment { start: self.slab_start(o, s), len: rows * self.t_out }).collect();
        TransposeView { rows, t_out: self.t_out, segments }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Ordered contiguous transfers, in elements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BurstPlan {
    pub t_out: usize,
    pub segments: Vec<Segment>,
}

impl BurstPlan {
    pub fn elements(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    /// Every segment starts and ends on a `t_out` boundary.
    pub fn is_aligned(&self) -> bool {
        self.segments.iter().all(|s| s.start % self.t_out == 0 && s.len % self.t_out == 0)
    }

    /// Addresses touched, in plan order.
    pub fn addresses(&self) -> impl Iterator<Item = usize> + '_ {
        self.segments.iter().flat_map(|s| s.start..s.start + s.len)
    }
}

/// Tiles of a token-form key tensor read in Kᵀ order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransposeView {
    pub rows: usize,
    pub t_out: usize,
    pub segments: Vec<Segment>,
}

impl TransposeView {
    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    /// Materializes Kᵀ (`[slabs·t_out][rows]`, row-major) from memory.
    pub fn gather(&self, mem: &[Fp16Bits]) -> Vec<Fp16Bits> {
        let mut out = vec![Fp16Bits::ZERO; self.segments.len() * self.t_out * self.rows];
        for (s, seg) in self.segments.iter().enumerate() {
            let tile = &mem[seg.start..seg.start + seg.len];
            for j in 0..self.rows {
                for i in 0..self.t_out {
                    out[(s * self.t_out + i) * self.rows + j] = tile[j * self.t_out + i];
                }
            }
        }
        out
    }
}
