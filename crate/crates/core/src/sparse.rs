//! INT4 block quantization, density-bound sparsification and the
//! 2048-channel weight packing format.
//!
//! A packed group is `scale ‖ mask ‖ wt`: sixteen FP16 scales (one per
//! 128-channel block), the position mask, then one INT4 nibble per kept
//! slot in ascending channel order. All fields are LSB-first.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::arith::Int4Weight;
use crate::bits::{BitReader, BitWriter};
use crate::error::{Error, Result};
use crate::fp16::{Fp16Bits, RoundingMode};

/// Weights sharing one scale.
pub const QUANT_BLOCK: usize = 128;
/// Input channels per packed group.
pub const GROUP_CHANNELS: usize = 2048;
pub const SCALES_PER_GROUP: usize = GROUP_CHANNELS / QUANT_BLOCK;
pub const SCALE_BITS: usize = SCALES_PER_GROUP * 16;
/// Independent HBM AXI ports; output channel `c` lives on port `c % 32`.
pub const HBM_PORTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum SparsityLevel {
    Dense,
    S50,
    S75,
    S875,
}

impl SparsityLevel {
    pub const ALL: [SparsityLevel; 4] = [Self::Dense, Self::S50, Self::S75, Self::S875];

    /// Positions per density-bound window.
    pub const fn window(self) -> usize {
        match self {
            Self::S875 => 16,
            _ => 8,
        }
    }

    /// Nonzeros allowed per window.
    pub const fn slots(self) -> usize {
        match self {
            Self::Dense => 8,
            Self::S50 => 4,
            Self::S75 => 2,
            Self::S875 => 2,
        }
    }

    /// log2 of the inverse kept fraction.
    pub const fn shift(self) -> u32 {
        match self {
            Self::Dense => 0,
            Self::S50 => 1,
            Self::S75 => 2,
            Self::S875 => 3,
        }
    }

    pub fn kept_fraction(self) -> f64 {
        1.0 / (1u32 << self.shift()) as f64
    }

    pub const fn kept_per_group(self) -> usize {
        GROUP_CHANNELS >> self.shift()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Dense => "dense",
            Self::S50 => "s50",
            Self::S75 => "s75",
            Self::S875 => "s875",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "s50" | "50" => Ok(Self::S50),
            "s75" | "75" => Ok(Self::S75),
            "s875" | "87.5" => Ok(Self::S875),
            _ => Err(Error::UnsupportedFormat(alloc::format!("unknown sparsity level {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum MaskEncoding {
    /// No mask; dense groups only.
    None,
    /// One presence bit per channel.
    OneHot,
    /// One offset-in-window field per kept slot.
    AddrInBlock,
}

/// One of the five supported (level, encoding) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PackFormat {
    level: SparsityLevel,
    encoding: MaskEncoding,
}

impl PackFormat {
    pub const DENSE: Self = Self { level: SparsityLevel::Dense, encoding: MaskEncoding::None };
    pub const S50_ONE_HOT: Self = Self { level: SparsityLevel::S50, encoding: MaskEncoding::OneHot };
    pub const S75_ADDR: Self = Self { level: SparsityLevel::S75, encoding: MaskEncoding::AddrInBlock };
    pub const S875_ONE_HOT: Self = Self { level: SparsityLevel::S875, encoding: MaskEncoding::OneHot };
    pub const S875_ADDR: Self = Self { level: SparsityLevel::S875, encoding: MaskEncoding::AddrInBlock };

    pub const ALL: [Self; 5] = [Self::DENSE, Self::S50_ONE_HOT, Self::S75_ADDR, Self::S875_ONE_HOT, Self::S875_ADDR];

    pub fn new(level: SparsityLevel, encoding: MaskEncoding) -> Result<Self> {
        let f = Self { level, encoding };
        if Self::ALL.contains(&f) {
            Ok(f)
        } else {
            Err(Error::UnsupportedFormat(alloc::format!("{level:?} with {encoding:?}")))
        }
    }

    /// The cheaper encoding for a level.
    pub fn for_level(level: SparsityLevel) -> Self {
        match level {
            SparsityLevel::Dense => Self::DENSE,
            SparsityLevel::S50 => Self::S50_ONE_HOT,
            SparsityLevel::S75 => Self::S75_ADDR,
            SparsityLevel::S875 => Self::S875_ADDR,
        }
    }

    pub fn level(self) -> SparsityLevel {
        self.level
    }

    pub fn encoding(self) -> MaskEncoding {
        self.encoding
    }

    /// Width of one address field.
    pub fn address_bits(self) -> u32 {
        self.level.window().trailing_zeros()
    }

    pub fn mask_bits(self) -> usize {
        match self.encoding {
            MaskEncoding::None => 0,
            MaskEncoding::OneHot => GROUP_CHANNELS,
            MaskEncoding::AddrInBlock => self.level.kept_per_group() * self.address_bits() as usize,
        }
    }

    pub fn weight_bits(self) -> usize {
        self.level.kept_per_group() * 4
    }

    pub fn total_bits(self) -> usize {
        SCALE_BITS + self.mask_bits() + self.weight_bits()
    }

    pub fn total_bytes(self) -> usize {
        self.total_bits() / 8
    }

    pub fn effective_bitwidth(self) -> f64 {
        self.total_bits() as f64 / GROUP_CHANNELS as f64
    }

    /// Dense bits over this format's bits.
    pub fn enhancement_ratio(self) -> f64 {
        Self::DENSE.total_bits() as f64 / self.total_bits() as f64
    }

    pub fn name(self) -> String {
        match self.encoding {
            MaskEncoding::None => "dense".into(),
            MaskEncoding::OneHot => alloc::format!("{}-onehot", self.level.name()),
            MaskEncoding::AddrInBlock => alloc::format!("{}-addr", self.level.name()),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::UnsupportedFormat(alloc::format!("unknown packing format {s:?}")))
    }
}

pub fn effective_bitwidth(level: SparsityLevel, encoding: MaskEncoding) -> Result<f64> {
    Ok(PackFormat::new(level, encoding)?.effective_bitwidth())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantBlock {
    pub scale: Fp16Bits,
    pub weights: [Int4Weight; QUANT_BLOCK],
}

impl QuantBlock {
    pub fn dequantize(&self) -> [f32; QUANT_BLOCK] {
        let s = self.scale.to_f32();
        core::array::from_fn(|i| s * self.weights[i].get() as f32)
    }
}

/// Symmetric INT4 quantization of 128 weights sharing one FP16 scale.
pub fn quantize_block(w: &[f32]) -> Result<QuantBlock> {
    if w.len() != QUANT_BLOCK {
        return Err(Error::ShapeMismatch(alloc::format!("quantization block of {} weights", w.len())));
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let max = w.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs()));
    let scale = Fp16Bits::from_f64_with(max / 7.0, RoundingMode::NearestEven);
    if !scale.is_finite() {
        return Err(Error::CapacityExceeded(alloc::format!("scale {} exceeds FP16", max / 7.0)));
    }
    let s = scale.to_f64();
    let weights = core::array::from_fn(|i| {
        if s == 0.0 {
            Int4Weight::ZERO
        } else {
            Int4Weight::clamped(libm::round(w[i] as f64 / s) as i32)
        }
    });
    Ok(QuantBlock { scale, weights })
}

fn top_k(window: &[f32], k: usize) -> u32 {
    let mut idx: Vec<usize> = (0..window.len()).collect();
    // Stable sort keeps lower indices first among equal magnitudes.
    idx.sort_by(|&a, &b| window[b].abs().total_cmp(&window[a].abs()));
    idx[..k].iter().fold(0u32, |m, &i| m | 1 << i)
}

/// Keeps the largest-magnitude entries of every window, zeroing the rest.
pub fn sparsify(w: &[f32], level: SparsityLevel) -> Result<Vec<f32>> {
    let win = level.window();
    if !w.len().is_multiple_of(win) {
        return Err(Error::ShapeMismatch(alloc::format!("{} channels not divisible by window {win}", w.len())));
    }
    if level == SparsityLevel::Dense {
        return Ok(w.to_vec());
    }
    let mut out = vec![0.0; w.len()];
    for (c, chunk) in w.chunks(win).enumerate() {
        let keep = top_k(chunk, level.slots());
        for (i, &x) in chunk.iter().enumerate() {
            if keep >> i & 1 == 1 {
                out[c * win + i] = x;
            }
        }
    }
    Ok(out)
}

/// Checks the density bound of every window.
pub fn validate_windows(weights: &[Int4Weight], level: SparsityLevel) -> Result<()> {
    for (i, chunk) in weights.chunks(level.window()).enumerate() {
        let nz = chunk.iter().filter(|w| w.get() != 0).count();
        if nz > level.slots() {
            return Err(Error::SparsityViolation { window: i, nonzeros: nz, limit: level.slots() });
        }
    }
    Ok(())
}

/// Kept slots of a window: every nonzero, topped up with the lowest free
/// positions so each window holds exactly `slots` entries.
fn window_slots(chunk: &[Int4Weight], slots: usize) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..chunk.len()).filter(|&i| chunk[i].get() != 0).collect();
    let mut i = 0;
    while pos.len() < slots {
        if chunk[i].get() == 0 {
            pos.push(i);
        }
        i += 1;
    }
    pos.sort_unstable();
    pos
}

/// A serialized 2048-channel group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedGroup {
    pub format: PackFormat,
    pub bytes: Vec<u8>,
}

impl PackedGroup {
    pub fn total_bits(&self) -> usize {
        self.bytes.len() * 8
    }

    pub fn scale_bits(&self) -> usize {
        SCALE_BITS
    }

    pub fn mask_bits(&self) -> usize {
        self.format.mask_bits()
    }

    pub fn weight_bits(&self) -> usize {
        self.format.weight_bits()
    }
}

/// Group contents in slot form: kept positions (ascending) and their
/// weights. Dense groups list every channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSlots {
    pub scales: [Fp16Bits; SCALES_PER_GROUP],
    pub positions: Vec<u16>,
    pub weights: Vec<Int4Weight>,
}

impl GroupSlots {
    pub fn to_dense(&self) -> Vec<Int4Weight> {
        let mut out = vec![Int4Weight::ZERO; GROUP_CHANNELS];
        for (&p, &w) in self.positions.iter().zip(&self.weights) {
            out[p as usize] = w;
        }
        out
    }

    /// Slots belonging to quantization block `b`, as a range into
    /// `positions`/`weights`.
    pub fn block_range(&self, b: usize) -> core::ops::Range<usize> {
        let lo = self.positions.partition_point(|&p| (p as usize) < b * QUANT_BLOCK);
        let hi = self.positions.partition_point(|&p| (p as usize) < (b + 1) * QUANT_BLOCK);
        lo..hi
    }
}

pub fn encode_group(scales: &[Fp16Bits], weights: &[Int4Weight], format: PackFormat) -> Result<PackedGroup> {
    if scales.len() != SCALES_PER_GROUP || weights.len() != GROUP_CHANNELS {
        return Err(Error::ShapeMismatch(alloc::format!(
            "group needs {SCALES_PER_GROUP} scales and {GROUP_CHANNELS} weights, got {} and {}",
            scales.len(),
            weights.len()
        )));
    }
    let level = format.level();
    validate_windows(weights, level)?;
    let mut w = BitWriter::with_capacity(format.total_bits());
    for s in scales {
        w.push(s.0 as u64, 16);
    }
    let win = level.window();
    let slots: Vec<Vec<usize>> = weights.chunks(win).map(|c| window_slots(c, level.slots())).collect();
    match format.encoding() {
        MaskEncoding::None => {}
        MaskEncoding::OneHot => {
            for s in &slots {
                let m = s.iter().fold(0u64, |m, &i| m | 1 << i);
                w.push(m, win as u32);
            }
        }
        MaskEncoding::AddrInBlock => {
            for s in &slots {
                for &i in s {
                    w.push(i as u64, format.address_bits());
                }
            }
        }
    }
    for (c, s) in slots.iter().enumerate() {
        for &i in s {
            w.push(weights[c * win + i].to_nibble() as u64, 4);
        }
    }
    debug_assert_eq!(w.len(), format.total_bits());
    Ok(PackedGroup { format, bytes: w.into_bytes() })
}

/// Parses a group into slot form, rejecting malformed masks.
pub fn decode_slots(g: &PackedGroup) -> Result<GroupSlots> {
    let format = g.format;
    if g.bytes.len() * 8 != format.total_bits() {
        return Err(Error::Malformed(alloc::format!(
            "{} group is {} bits, expected {}",
            format.name(),
            g.bytes.len() * 8,
            format.total_bits()
        )));
    }
    let mut r = BitReader::new(&g.bytes);
    let mut scales = [Fp16Bits::ZERO; SCALES_PER_GROUP];
    for s in &mut scales {
        *s = Fp16Bits(r.read(16).unwrap() as u16);
    }
    let level = format.level();
    let win = level.window();
    let windows = GROUP_CHANNELS / win;
    let mut positions = Vec::with_capacity(level.kept_per_group());
    match format.encoding() {
        MaskEncoding::None => positions.extend(0..GROUP_CHANNELS as u16),
        MaskEncoding::OneHot => {
            for c in 0..windows {
                let m = r.read(win as u32).unwrap();
                if m.count_ones() as usize != level.slots() {
                    return Err(Error::Malformed(alloc::format!(
                        "window {c} mask has {} bits set, expected {}",
                        m.count_ones(),
                        level.slots()
                    )));
                }
                positions.extend((0..win).filter(|i| m >> i & 1 == 1).map(|i| (c * win + i) as u16));
            }
        }
        MaskEncoding::AddrInBlock => {
            for c in 0..windows {
                let mut prev = None;
                for _ in 0..level.slots() {
                    let a = r.read(format.address_bits()).unwrap() as usize;
                    if prev.is_some_and(|p| a <= p) {
                        return Err(Error::Malformed(alloc::format!("window {c} offsets not strictly ascending")));
                    }
                    prev = Some(a);
                    positions.push((c * win + a) as u16);
                }
            }
        }
    }
    let mut weights = Vec::with_capacity(positions.len());
    for _ in 0..positions.len() {
        weights.push(Int4Weight::from_nibble(r.read(4).unwrap() as u8)?);
    }
    Ok(GroupSlots { scales, positions, weights })
}

/// Scales and the dense 2048-channel weight vector of a group.
pub fn decode_group(g: &PackedGroup) -> Result<([Fp16Bits; SCALES_PER_GROUP], Vec<Int4Weight>)> {
    let s = decode_slots(g)?;
    Ok((s.scales, s.to_dense()))
}

/// Gathers the activations at the given positions (sparse DMA).
pub fn select_activations<T: Copy>(positions: &[u16], feats: &[T]) -> Vec<T> {
    positions.iter().map(|&p| feats[p as usize]).collect()
}

/// Name, shape and packing of one weight matrix. Weights are row-major
/// `[ch_out][ch_in]`.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerSpec {
    pub name: String,
    pub ch_in: usize,
    pub ch_out: usize,
    pub format: PackFormat,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, ch_in: usize, ch_out: usize, format: PackFormat) -> Self {
        Self { name: name.into(), ch_in, ch_out, format }
    }

    pub fn portions(&self) -> usize {
        self.ch_in.div_ceil(GROUP_CHANNELS)
    }

    pub fn padded_ch_in(&self) -> usize {
        self.portions() * GROUP_CHANNELS
    }

    /// Bytes actually stored, including padding to whole groups.
    pub fn packed_bytes(&self) -> usize {
        self.ch_out * self.portions() * self.format.total_bytes()
    }

    /// Effective-bitwidth size without padding, in MiB.
    pub fn size_mib(&self) -> f64 {
        self.ch_out as f64 * self.ch_in as f64 * self.format.effective_bitwidth() / 8.0 / MIB
    }
}

const MIB: f64 = 1024.0 * 1024.0;

/// A packed matrix; `groups[c * portions + p]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedLayer {
    pub spec: LayerSpec,
    pub groups: Vec<PackedGroup>,
}

impl PackedLayer {
    pub fn group(&self, ch_out: usize, portion: usize) -> &PackedGroup {
        &self.groups[ch_out * self.spec.portions() + portion]
    }

    pub fn port_of(ch_out: usize) -> usize {
        ch_out % HBM_PORTS
    }

    /// Concatenated portions of every output channel on `port`, in
    /// ascending channel order.
    pub fn port_stream(&self, port: usize) -> Vec<u8> {
        let mut out = Vec::new();
        for c in (port..self.spec.ch_out).step_by(HBM_PORTS) {
            for p in 0..self.spec.portions() {
                out.extend_from_slice(&self.group(c, p).bytes);
            }
        }
        out
    }

    /// Byte offset of output channel `c` inside its port stream.
    pub fn port_offset(&self, ch_out: usize) -> usize {
        (ch_out / HBM_PORTS) * self.spec.portions() * self.spec.format.total_bytes()
    }

    /// Channels added to reach a whole number of groups.
    pub fn padding_channels(&self) -> usize {
        self.spec.padded_ch_in() - self.spec.ch_in
    }

    /// Dequantized dense matrix after sparsification and quantization.
    pub fn dequantize(&self) -> Result<Vec<f32>> {
        let (ci, co) = (self.spec.ch_in, self.spec.ch_out);
        let mut out = vec![0.0f32; ci * co];
        for c in 0..co {
            for p in 0..self.spec.portions() {
                let (scales, w) = decode_group(self.group(c, p))?;
                for (i, q) in w.iter().enumerate() {
                    let k = p * GROUP_CHANNELS + i;
                    if k < ci {
                        out[c * ci + k] = scales[i / QUANT_BLOCK].to_f32() * q.get() as f32;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Sparsifies, quantizes and packs one output channel's weights.
pub fn pack_row(row: &[f32], format: PackFormat) -> Result<Vec<PackedGroup>> {
    let portions = row.len().div_ceil(GROUP_CHANNELS).max(1);
    let mut padded = row.to_vec();
    padded.resize(portions * GROUP_CHANNELS, 0.0);
    let kept = sparsify(&padded, format.level())?;
    let mut groups = Vec::with_capacity(portions);
    for portion in kept.chunks(GROUP_CHANNELS) {
        let mut scales = [Fp16Bits::ZERO; SCALES_PER_GROUP];
        let mut q = Vec::with_capacity(GROUP_CHANNELS);
        for (b, block) in portion.chunks(QUANT_BLOCK).enumerate() {
            let qb = quantize_block(block)?;
            scales[b] = qb.scale;
            q.extend_from_slice(&qb.weights);
        }
        groups.push(encode_group(&scales, &q, format)?);
    }
    Ok(groups)
}

pub fn package_layer(spec: &LayerSpec, weights: &[f32]) -> Result<PackedLayer> {
    if weights.len() != spec.ch_in * spec.ch_out {
        return Err(Error::ShapeMismatch(alloc::format!(
            "layer {} expects {}×{} weights, got {}",
            spec.name,
            spec.ch_out,
            spec.ch_in,
            weights.len()
        )));
    }
    let mut groups = Vec::with_capacity(spec.ch_out * spec.portions());
    for row in weights.chunks(spec.ch_in) {
        groups.extend(pack_row(row, spec.format)?);
    }
    Ok(PackedLayer { spec: spec.clone(), groups })
}

/// All packed matrices of a model.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WeightPackage {
    pub layers: Vec<PackedLayer>,
}

impl WeightPackage {
    pub fn layer(&self, name: &str) -> Option<&PackedLayer> {
        self.layers.iter().find(|l| l.spec.name == name)
    }

    pub fn size_report(&self) -> SizeReport {
        let specs: Vec<LayerSpec> = self.layers.iter().map(|l| l.spec.clone()).collect();
        size_report(&specs)
    }
}

/// Packs every layer with weights drawn from `source(spec)`.
pub fn package_model<F>(specs: &[LayerSpec], mut source: F) -> Result<WeightPackage>
where
    F: FnMut(&LayerSpec) -> Vec<f32>,
{
    let layers = specs.iter().map(|s| package_layer(s, &source(s))).collect::<Result<Vec<_>>>()?;
    Ok(WeightPackage { layers })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerSize {
    pub name: String,
    pub format: PackFormat,
    pub ch_in: usize,
    pub ch_out: usize,
    pub mib: f64,
    pub packed_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SizeReport {
    pub layers: Vec<LayerSize>,
    pub total_mib: f64,
    pub packed_bytes: usize,
}

impl SizeReport {
    /// Size ratio of a dense report over this one.
    pub fn speedup_over(&self, dense: &SizeReport) -> f64 {
        dense.total_mib / self.total_mib
    }
}

pub fn size_report(specs: &[LayerSpec]) -> SizeReport {
    let layers: Vec<LayerSize> = specs
        .iter()
        .map(|s| LayerSize {
            name: s.name.clone(),
            format: s.format,
            ch_in: s.ch_in,
            ch_out: s.ch_out,
            mib: s.size_mib(),
            packed_bytes: s.packed_bytes(),
        })
        .collect();
    SizeReport {
        total_mib: layers.iter().map(|l| l.mib).sum(),
        packed_bytes: layers.iter().map(|l| l.packed_bytes).sum(),
        layers,
    }
}
