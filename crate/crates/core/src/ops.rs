//! FP16 operators of a transformer block over unified-layout tensors.
//!
//! Matrix products go through the bit-level dot-product unit. Norms,
//! softmax, rotary embedding and activations compute in f64 and round the
//! result to FP16.

use alloc::vec;
use alloc::vec::Vec;

use crate::arith::{dot_ffn, dot_mha, Int4Weight, PeConfig, PeMode};
use crate::config::{NormKind, RotaryStyle};
use crate::error::{Error, Result};
use crate::fp16::{fp16_add, fp16_mul, Fp16Bits, RoundingMode};
use crate::layout::UnifiedTensor;
use crate::sparse::{decode_slots, GroupSlots, LayerSpec, PackedLayer, GROUP_CHANNELS, QUANT_BLOCK, SCALES_PER_GROUP};

/// Hardware step kinds. Every named step of the block schedule maps to
/// exactly one kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum OpKind {
    LayerNorm,
    RmsNorm,
    VmmBn,
    RotaryEmb,
    KvWriteHbm,
    Transpose,
    Softmax,
    Activation,
    MhaMatmul,
    OutlayerLn,
    VmmArgmax,
}

impl OpKind {
    /// Kind executing a step of the schedule, by step name.
    pub fn for_step(name: &str) -> Option<OpKind> {
        Some(match name {
            "LayerNorm" => OpKind::LayerNorm,
            "RMS Norm" | "RMSNorm" => OpKind::RmsNorm,
            "VMM-BN(Q)" | "VMM-BN(K)" | "VMM-BN(V)" | "VMMBNRES0" | "VMMBN1" | "VMMBNRES1" | "VMMBNRES2"
            | "VMM-BN" | "VMM-BN-RES" | "VMM-BN-Res" => OpKind::VmmBn,
            "EMB_Q" | "EMB_K" | "PosEmb(Q)" | "PosEmb(K)" => OpKind::RotaryEmb,
            "DAT2HBM" | "KcacheHBM" | "VcacheHBM" => OpKind::KvWriteHbm,
            "TRP" | "VMM(Q*K^T)" => OpKind::Transpose,
            "SOFTMAX" | "Softmax" => OpKind::Softmax,
            "ACT" | "Swiglu" => OpKind::Activation,
            "F2W" | "VMM(SFT*V)" => OpKind::MhaMatmul,
            "Outlayer_LN" => OpKind::OutlayerLn,
            "VMMBN_Arg" => OpKind::VmmArgmax,
            _ => return None,
        })
    }
}

/// Hardware steps of one block, in execution order.
pub const BLOCK_STEPS: [&str; 17] = [
    "LayerNorm", "VMM-BN(Q)", "EMB_Q", "VMM-BN(K)", "EMB_K", "DAT2HBM", "TRP", "SOFTMAX", "VMM-BN(V)", "DAT2HBM",
    "F2W", "VMMBNRES0", "LayerNorm", "VMMBN1", "ACT", "VMMBNRES1", "VMMBNRES2",
];

/// Steps after the last block.
pub const OUTLAYER_STEPS: [&str; 2] = ["Outlayer_LN", "VMMBN_Arg"];

fn rne(x: f64) -> Fp16Bits {
    Fp16Bits::from_f64_with(x, RoundingMode::NearestEven)
}

/// Applies `f` to each token row (over logical channels) of every outer
/// index, producing a tensor of the same shape.
fn map_rows(x: &UnifiedTensor, mut f: impl FnMut(usize, usize, &[f64]) -> Vec<Fp16Bits>) -> UnifiedTensor {
    let mut out = x.clone();
    let mut row = vec![0.0; x.channels()];
    for o in 0..x.outer() {
        for t in 0..x.tokens() {
            for (c, r) in row.iter_mut().enumerate() {
                *r = x.get(o, c, 0, t).to_f64();
            }
            let y = f(o, t, &row);
            for (c, v) in y.into_iter().enumerate() {
                out.set(o, c, 0, t, v);
            }
        }
    }
    out
}

pub fn rmsnorm(x: &UnifiedTensor, gamma: &[Fp16Bits], eps: f64) -> Result<UnifiedTensor> {
    check_len("gamma", gamma.len(), x.channels())?;
    Ok(map_rows(x, |_, _, r| {
        let ms = r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
        let inv = 1.0 / libm::sqrt(ms + eps);
        r.iter().zip(gamma).map(|(v, g)| rne(v * inv * g.to_f64())).collect()
    }))
}

pub fn layernorm(x: &UnifiedTensor, gamma: &[Fp16Bits], beta: &[Fp16Bits], eps: f64) -> Result<UnifiedTensor> {
    check_len("gamma", gamma.len(), x.channels())?;
    check_len("beta", beta.len(), x.channels())?;
    Ok(map_rows(x, |_, _, r| {
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / libm::sqrt(var + eps);
        r.iter().zip(gamma).zip(beta).map(|((v, g), b)| rne((v - mean) * inv * g.to_f64() + b.to_f64())).collect()
    }))
}

/// Normalization by kind; layer norm uses a zero shift.
pub fn norm(kind: NormKind, x: &UnifiedTensor, gamma: &[Fp16Bits], eps: f64) -> Result<UnifiedTensor> {
    match kind {
        NormKind::Rms => rmsnorm(x, gamma, eps),
        NormKind::Layer => layernorm(x, gamma, &vec![Fp16Bits::ZERO; gamma.len()], eps),
    }
}

/// Softmax of one row, rounded to FP16.
pub fn softmax_row(r: &[f64]) -> Vec<Fp16Bits> {
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|v| libm::exp(v - m)).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| rne(v / s)).collect()
}

pub fn silu(x: &UnifiedTensor) -> UnifiedTensor {
    map_rows(x, |_, _, r| r.iter().map(|&v| rne(v / (1.0 + libm::exp(-v)))).collect())
}

/// `silu(gate) · up`, elementwise.
pub fn swiglu(gate: &UnifiedTensor, up: &UnifiedTensor) -> Result<UnifiedTensor> {
    same_shape(gate, up)?;
    Ok(map_rows(gate, |o, t, r| {
        r.iter().enumerate().map(|(c, &v)| rne(v / (1.0 + libm::exp(-v)) * up.get(o, c, 0, t).to_f64())).collect()
    }))
}

/// Rotation pairs and angle exponents of one head.
fn rotary_pairs(style: RotaryStyle, head_dim: usize) -> Vec<(usize, usize, f64)> {
    match style {
        RotaryStyle::GlmHalf => {
            let rot = head_dim / 2;
            (0..rot / 2).map(|k| (2 * k, 2 * k + 1, 2.0 * k as f64 / rot as f64)).collect()
        }
        RotaryStyle::NeoxFull => {
            let half = head_dim / 2;
            (0..half).map(|k| (k, k + half, 2.0 * k as f64 / head_dim as f64)).collect()
        }
    }
}

/// Rotary position embedding of a token-form tensor whose channels are
/// whole heads. Row `i` has position `pos0 + i`.
pub fn rotary_embed(x: &UnifiedTensor, pos0: usize, head_dim: usize, style: RotaryStyle, theta: f64) -> Result<UnifiedTensor> {
    if head_dim == 0 || !x.channels().is_multiple_of(head_dim) {
        return Err(Error::ShapeMismatch(alloc::format!("{} channels are not whole heads of {head_dim}", x.channels())));
    }
    let pairs = rotary_pairs(style, head_dim);
    Ok(map_rows(x, |_, t, r| {
        let pos = (pos0 + t) as f64;
        let mut y: Vec<f64> = r.to_vec();
        for h in 0..r.len() / head_dim {
            let b = h * head_dim;
            for &(i, j, e) in &pairs {
                let ang = pos * libm::pow(theta, -e);
                let (s, c) = (libm::sin(ang), libm::cos(ang));
                y[b + i] = r[b + i] * c - r[b + j] * s;
                y[b + j] = r[b + j] * c + r[b + i] * s;
            }
        }
        y.into_iter().map(rne).collect()
    }))
}

/// A weight matrix decoded to slot form, one entry per (channel, portion).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedLayer {
    pub spec: LayerSpec,
    pub groups: Vec<GroupSlots>,
}

impl DecodedLayer {
    pub fn from_packed(l: &PackedLayer) -> Result<Self> {
        let groups = l.groups.iter().map(decode_slots).collect::<Result<Vec<_>>>()?;
        Ok(Self { spec: l.spec.clone(), groups })
    }

    pub fn group(&self, ch_out: usize, portion: usize) -> &GroupSlots {
        &self.groups[ch_out * self.spec.portions() + portion]
    }

    /// Dequantized weight `(out, in)` as f64.
    pub fn weight(&self, ch_out: usize, ch_in: usize) -> f64 {
        let g = self.group(ch_out, ch_in / GROUP_CHANNELS);
        let p = (ch_in % GROUP_CHANNELS) as u16;
        match g.positions.binary_search(&p) {
            Ok(i) => g.scales[p as usize / QUANT_BLOCK].to_f64() * g.weights[i].get() as f64,
            Err(_) => 0.0,
        }
    }
}

/// Elementwise stage folded into a matrix product.
#[derive(Debug, Clone, Copy)]
pub enum Epilogue<'a> {
    None,
    /// Adds a tensor of the output shape.
    Residual(&'a UnifiedTensor),
    /// Multiplies by a tensor of the output shape.
    Multiply(&'a UnifiedTensor),
}

/// One output channel of a matrix-vector product: each 128-channel block
/// goes through the dot-product unit with the activations its kept slots
/// select, and block results are summed in FP16.
pub fn vmm_channel(pe: &PeConfig, x: &[Fp16Bits], w: &DecodedLayer, c: usize) -> Result<Fp16Bits> {
    let ch_in = w.spec.ch_in;
    let mut acc: Option<Fp16Bits> = None;
    let mut feats: Vec<Fp16Bits> = Vec::with_capacity(QUANT_BLOCK);
    let mut wts: Vec<Int4Weight> = Vec::with_capacity(QUANT_BLOCK);
    for p in 0..w.spec.portions() {
        let g = w.group(c, p);
        for b in 0..SCALES_PER_GROUP {
            let start = p * GROUP_CHANNELS + b * QUANT_BLOCK;
            if start >= ch_in {
                break;
            }
            feats.clear();
            wts.clear();
            for i in g.block_range(b) {
                let k = p * GROUP_CHANNELS + g.positions[i] as usize;
                feats.push(if k < ch_in { x[k] } else { Fp16Bits::ZERO });
                wts.push(g.weights[i]);
            }
            let r = dot_ffn(pe, &feats, &wts, g.scales[b])?.value;
            acc = Some(match acc {
                None => r,
                Some(a) => fp16_add(a, r, pe.rounding).0,
            });
        }
    }
    Ok(acc.unwrap_or(Fp16Bits::ZERO))
}

/// Matrix product of every token row with an optional epilogue.
pub fn vmm_bn(pe: &PeConfig, x: &UnifiedTensor, w: &DecodedLayer, epi: Epilogue<'_>) -> Result<UnifiedTensor> {
    check_len("input channels", x.channels(), w.spec.ch_in)?;
    let rows = x.tokens();
    let mut out = UnifiedTensor::zeros_tokens(rows, w.spec.ch_out, x.t_out())?;
    if let Epilogue::Residual(r) | Epilogue::Multiply(r) = epi {
        same_shape(&out, r)?;
    }
    for t in 0..rows {
        let row = x.token_row(0, t);
        for c in 0..w.spec.ch_out {
            let mut v = vmm_channel(pe, &row, w, c)?;
            match epi {
                Epilogue::None => {}
                Epilogue::Residual(r) => v = fp16_add(v, r.at(t, c), pe.rounding).0,
                Epilogue::Multiply(m) => v = fp16_mul(v, m.at(t, c), pe.rounding).0,
            }
            out.set(0, c, 0, t, v);
        }
    }
    Ok(out)
}

/// Shape of one attention invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    /// Keys present in the cache.
    pub kv_len: usize,
    /// Position of query row 0; row `i` sees keys `0..=q_pos0 + i`.
    pub q_pos0: usize,
}

impl AttnShape {
    pub fn visible(&self, row: usize) -> usize {
        (self.q_pos0 + row + 1).min(self.kv_len)
    }

    fn group(&self, h: usize) -> usize {
        h / (self.heads / self.kv_heads)
    }
}

fn dot_chunks(pe: &PeConfig, a: &[Fp16Bits], b: &[Fp16Bits], scale: Fp16Bits) -> Result<Fp16Bits> {
    let lanes = pe.lanes(PeMode::Mha);
    let mut acc: Option<Fp16Bits> = None;
    for (x, y) in a.chunks(lanes).zip(b.chunks(lanes)) {
        let r = dot_mha(pe, x, y, scale)?.value;
        acc = Some(match acc {
            None => r,
            Some(s) => fp16_add(s, r, pe.rounding).0,
        });
    }
    Ok(acc.unwrap_or(Fp16Bits::ZERO))
}

/// Attention scale `1/√head_dim` in FP16.
pub fn attn_scale(head_dim: usize) -> Fp16Bits {
    rne(1.0 / libm::sqrt(head_dim as f64))
}

/// Q·Kᵀ per head: output `[heads, kv_len, 1, rows]` with invisible keys 0.
/// `k` is a token-form cache of `kv_heads·head_dim` channels whose rows
/// are key positions.
pub fn attention_scores(pe: &PeConfig, q: &UnifiedTensor, k: &UnifiedTensor, s: &AttnShape) -> Result<UnifiedTensor> {
    check_attn(q, k, s)?;
    let rows = q.tokens();
    let scale = attn_scale(s.head_dim);
    let mut out = UnifiedTensor::zeros(s.heads, s.kv_len, 1, rows, q.t_out())?;
    for h in 0..s.heads {
        let g = s.group(h);
        for i in 0..rows {
            let qrow: Vec<Fp16Bits> = (0..s.head_dim).map(|d| q.at(i, h * s.head_dim + d)).collect();
            for j in 0..s.visible(i) {
                let krow: Vec<Fp16Bits> = (0..s.head_dim).map(|d| k.at(j, g * s.head_dim + d)).collect();
                out.set(h, j, 0, i, dot_chunks(pe, &qrow, &krow, scale)?);
            }
        }
    }
    Ok(out)
}

/// Row softmax of a score tensor over the visible keys.
pub fn softmax_scores(scores: &UnifiedTensor, s: &AttnShape) -> UnifiedTensor {
    let mut out = scores.clone();
    for h in 0..scores.outer() {
        for i in 0..scores.tokens() {
            let n = s.visible(i);
            let r: Vec<f64> = (0..n).map(|j| scores.get(h, j, 0, i).to_f64()).collect();
            for (j, p) in softmax_row(&r).into_iter().enumerate() {
                out.set(h, j, 0, i, p);
            }
        }
    }
    out
}

/// Probabilities times V: output `[rows, heads·head_dim]`.
pub fn attention_context(pe: &PeConfig, p: &UnifiedTensor, v: &UnifiedTensor, s: &AttnShape) -> Result<UnifiedTensor> {
    let rows = p.tokens();
    if p.outer() != s.heads || p.channels() != s.kv_len {
        return Err(Error::ShapeMismatch("probability tensor".into()));
    }
    if v.channels() != s.kv_heads * s.head_dim || v.tokens() < s.kv_len {
        return Err(Error::ShapeMismatch("value cache".into()));
    }
    let mut out = UnifiedTensor::zeros_tokens(rows, s.heads * s.head_dim, p.t_out())?;
    for h in 0..s.heads {
        let g = s.group(h);
        for i in 0..rows {
            let n = s.visible(i);
            let prow: Vec<Fp16Bits> = (0..n).map(|j| p.get(h, j, 0, i)).collect();
            for d in 0..s.head_dim {
                let col: Vec<Fp16Bits> = (0..n).map(|j| v.at(j, g * s.head_dim + d)).collect();
                out.set(0, h * s.head_dim + d, 0, i, dot_chunks(pe, &prow, &col, Fp16Bits::ONE)?);
            }
        }
    }
    Ok(out)
}

/// Index of the largest value of a token row; ties go to the lower index.
pub fn argmax(x: &UnifiedTensor, row: usize) -> usize {
    let mut best = 0;
    let mut bv = f64::NEG_INFINITY;
    for c in 0..x.channels() {
        let v = x.at(row, c).to_f64();
        if v > bv {
            bv = v;
            best = c;
        }
    }
    best
}

/// Copies rows `start..start + n` of a token-form tensor.
pub fn select_rows(x: &UnifiedTensor, start: usize, n: usize) -> Result<UnifiedTensor> {
    if start + n > x.tokens() {
        return Err(Error::ShapeMismatch(alloc::format!("rows {start}..{} of {}", start + n, x.tokens())));
    }
    let mut out = UnifiedTensor::zeros(x.outer(), x.channels(), 1, n, x.t_out())?;
    for o in 0..x.outer() {
        for c in 0..x.channels() {
            for t in 0..n {
                out.set(o, c, 0, t, x.get(o, c, 0, start + t));
            }
        }
    }
    Ok(out)
}

/// Per-layer key and value caches sized for the maximum sequence length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvCache {
    pub k: Vec<UnifiedTensor>,
    pub v: Vec<UnifiedTensor>,
    len: usize,
    max: usize,
}

impl KvCache {
    pub fn new(layers: usize, kv_dim: usize, max_token: usize, t_out: usize) -> Result<Self> {
        let z = UnifiedTensor::zeros_tokens(max_token, kv_dim, t_out)?;
        Ok(Self { k: vec![z.clone(); layers], v: vec![z; layers], len: 0, max: max_token })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.max
    }

    /// Writes `k_new`/`v_new` rows at positions `len..` of `layer`.
    pub fn write(&mut self, layer: usize, k_new: &UnifiedTensor, v_new: &UnifiedTensor) -> Result<()> {
        kv_write(&mut self.k[layer], k_new, self.len)?;
        kv_write(&mut self.v[layer], v_new, self.len)
    }

    /// Commits `n` written rows.
    pub fn advance(&mut self, n: usize) -> Result<()> {
        if self.len + n > self.max {
            return Err(Error::CapacityExceeded(alloc::format!("KV cache of {} tokens", self.max)));
        }
        self.len += n;
        Ok(())
    }
}

/// Stores the rows of `new` into `cache` starting at row `at`.
pub fn kv_write(cache: &mut UnifiedTensor, new: &UnifiedTensor, at: usize) -> Result<()> {
    if at + new.tokens() > cache.tokens() {
        return Err(Error::CapacityExceeded(alloc::format!(
            "KV write of {} rows at {at} exceeds {}",
            new.tokens(),
            cache.tokens()
        )));
    }
    check_len("cache channels", new.channels(), cache.channels())?;
    for c in 0..new.channels() {
        for t in 0..new.tokens() {
            cache.set(0, c, 0, at + t, new.at(t, c));
        }
    }
    Ok(())
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::ShapeMismatch(alloc::format!("{what}: {got} vs {want}")));
    }
    Ok(())
}

fn same_shape(a: &UnifiedTensor, b: &UnifiedTensor) -> Result<()> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(Error::ShapeMismatch(alloc::format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn check_attn(q: &UnifiedTensor, k: &UnifiedTensor, s: &AttnShape) -> Result<()> {
    if s.kv_len == 0 {
        return Err(Error::ShapeMismatch("empty KV cache".into()));
    }
    if s.kv_heads == 0 || !s.heads.is_multiple_of(s.kv_heads) {
        return Err(Error::InvalidConfig("heads must be a multiple of kv_heads".into()));
    }
    check_len("query channels", q.channels(), s.heads * s.head_dim)?;
    check_len("key channels", k.channels(), s.kv_heads * s.head_dim)?;
    if k.tokens() < s.kv_len {
        return Err(Error::ShapeMismatch("key cache shorter than kv_len".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::to_unified;
    use crate::sparse::{package_layer, PackFormat};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn h(x: f64) -> Fp16Bits {
        Fp16Bits::from_f64(x)
    }

    fn tensor(rows: usize, ch: usize, f: impl Fn(usize, usize) -> f64) -> UnifiedTensor {
        let v: Vec<Fp16Bits> = (0..rows * ch).map(|i| h(f(i / ch, i % ch))).collect();
        to_unified(&v, rows, ch, 16).unwrap()
    }

    #[test]
    fn step_names_covered() {
        let steps = [
            "LayerNorm", "VMM-BN(Q)", "EMB_Q", "VMM-BN(K)", "EMB_K", "DAT2HBM", "TRP", "SOFTMAX", "VMM-BN(V)", "F2W",
            "VMMBNRES0", "VMMBN1", "ACT", "VMMBNRES1", "VMMBNRES2", "Outlayer_LN", "VMMBN_Arg", "RMS Norm",
            "PosEmb(Q)", "PosEmb(K)", "KcacheHBM", "VMM(Q*K^T)", "Softmax", "VcacheHBM", "VMM(SFT*V)", "VMM-BN-RES",
            "VMM-BN", "Swiglu", "VMM-BN-Res",
        ];
        for s in steps {
            assert!(OpKind::for_step(s).is_some(), "{s}");
        }
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_row(&[0.0; 4]), vec![h(0.25); 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 1..40 {
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..8.0)).collect();
            let p = softmax_row(&r);
            let s: f64 = p.iter().map(|x| x.to_f64()).sum();
            assert!((s - 1.0).abs() <= 1.0 / 256.0);
            assert!(p.iter().all(|x| x.to_f64() >= 0.0));
        }
    }

    #[test]
    fn rmsnorm_constant() {
        let x = tensor(2, 20, |t, _| if t == 0 { 3.0 } else { -0.5 });
        let y = rmsnorm(&x, &[Fp16Bits::ONE; 20], 0.0).unwrap();
        for c in 0..20 {
            assert_eq!(y.at(0, c), Fp16Bits::ONE);
            assert_eq!(y.at(1, c), h(-1.0));
        }
        y.validate().unwrap();
        let z = layernorm(&x, &[Fp16Bits::ONE; 20], &[h(0.5); 20], 1e-5).unwrap();
        assert_eq!(z.at(0, 3), h(0.5));
    }

    #[test]
    fn rotary_position_zero_is_identity() {
        let x = tensor(1, 64, |_, c| c as f64 * 0.01 - 0.3);
        for style in [RotaryStyle::GlmHalf, RotaryStyle::NeoxFull] {
            assert_eq!(rotary_embed(&x, 0, 32, style, 10000.0).unwrap(), x);
        }
        // GLM convention leaves the second half of each head untouched.
        let y = rotary_embed(&x, 5, 32, RotaryStyle::GlmHalf, 10000.0).unwrap();
        assert_ne!(y.at(0, 0), x.at(0, 0));
        for c in 16..32 {
            assert_eq!(y.at(0, c), x.at(0, c));
        }
        // Rotations preserve pair norms.
        let a = (y.at(0, 0).to_f64(), y.at(0, 1).to_f64());
        let b = (x.at(0, 0).to_f64(), x.at(0, 1).to_f64());
        assert!(((a.0 * a.0 + a.1 * a.1) - (b.0 * b.0 + b.1 * b.1)).abs() < 1e-3);
    }

    fn layer(ch_in: usize, ch_out: usize, f: PackFormat, w: &[f32]) -> DecodedLayer {
        let spec = LayerSpec::new("t", ch_in, ch_out, f);
        DecodedLayer::from_packed(&package_layer(&spec, w).unwrap()).unwrap()
    }

    #[test]
    fn vmm_identity_and_zero() {
        let mut w = vec![0.0f32; 128 * 128];
        for i in 0..128 {
            w[i * 128 + i] = 1.0;
        }
        let l = layer(128, 128, PackFormat::DENSE, &w);
        assert_eq!(l.group(0, 0).scales[0], h(1.0 / 7.0));
        let x = tensor(1, 128, |_, c| if c == 0 { 1.0 } else { 0.0 });
        let y = vmm_bn(&PeConfig::default(), &x, &l, Epilogue::None).unwrap();
        // scale·7 = fp16(1/7)·7 is within one ulp of 1.
        assert!((y.at(0, 0).to_f64() - 1.0).abs() <= 2f64.powi(-10));
        for c in 1..128 {
            assert_eq!(y.at(0, c).to_f64(), 0.0);
        }
        let z = layer(128, 8, PackFormat::DENSE, &vec![0.0; 128 * 8]);
        let y = vmm_bn(&PeConfig::default(), &x, &z, Epilogue::None).unwrap();
        assert!((0..8).all(|c| y.at(0, c).to_f64() == 0.0));
    }

    #[test]
    fn vmm_sparse_matches_dense_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pe = PeConfig::default();
        let w: Vec<f32> = (0..256 * 256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xs: Vec<f64> = (0..512).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = tensor(2, 256, |t, c| xs[t * 256 + c]);
        for f in [PackFormat::S50_ONE_HOT, PackFormat::S75_ADDR, PackFormat::S875_ONE_HOT, PackFormat::S875_ADDR] {
            let sparse = layer(256, 256, f, &w);
            // Rebuild the same matrix as a dense layer: same scales and weights.
            let mut dense = sparse.clone();
            dense.spec.format = PackFormat::DENSE;
            for g in &mut dense.groups {
                let d = g.to_dense();
                g.positions = (0..2048).collect();
                g.weights = d;
            }
            let a = vmm_bn(&pe, &x, &sparse, Epilogue::None).unwrap();
            let b = vmm_bn(&pe, &x, &dense, Epilogue::None).unwrap();
            assert_eq!(a, b, "{}", f.name());
        }
    }

    #[test]
    fn vmm_epilogues() {
        let mut w = vec![0.0f32; 16 * 16];
        for i in 0..16 {
            w[i * 16 + i] = 7.0;
        }
        let l = layer(16, 16, PackFormat::DENSE, &w);
        let x = tensor(1, 16, |_, c| c as f64);
        let r = tensor(1, 16, |_, _| 0.5);
        let y = vmm_bn(&PeConfig::default(), &x, &l, Epilogue::Residual(&r)).unwrap();
        assert_eq!(y.at(0, 3), h(21.5));
        let y = vmm_bn(&PeConfig::default(), &x, &l, Epilogue::Multiply(&r)).unwrap();
        assert_eq!(y.at(0, 3), h(10.5));
        let bad = tensor(2, 16, |_, _| 0.0);
        assert!(vmm_bn(&PeConfig::default(), &x, &l, Epilogue::Residual(&bad)).is_err());
    }

    fn shape(kv_len: usize, q_pos0: usize) -> AttnShape {
        AttnShape { heads: 1, kv_heads: 1, head_dim: 16, kv_len, q_pos0 }
    }

    #[test]
    fn single_token_attention_copies_value() {
        let pe = PeConfig::default();
        let q = tensor(1, 16, |_, c| if c == 0 { 1.0 } else { 0.0 });
        let v = tensor(4, 16, |t, c| if t == 0 { c as f64 * 0.25 } else { 9.0 });
        let s = shape(1, 0);
        let sc = attention_scores(&pe, &q, &q, &s).unwrap();
        assert_eq!(sc.get(0, 0, 0, 0), attn_scale(16));
        let p = softmax_scores(&sc, &s);
        assert_eq!(p.get(0, 0, 0, 0), Fp16Bits::ONE);
        let o = attention_context(&pe, &p, &v, &s).unwrap();
        for c in 0..16 {
            assert_eq!(o.at(0, c), h(c as f64 * 0.25));
        }
    }

    #[test]
    fn identical_keys_split_evenly() {
        let pe = PeConfig::default();
        let q = tensor(1, 16, |_, c| c as f64 * 0.1);
        let k = tensor(2, 16, |_, c| 1.0 - c as f64 * 0.05);
        let s = shape(2, 1);
        let p = softmax_scores(&attention_scores(&pe, &q, &k, &s).unwrap(), &s);
        assert_eq!(p.get(0, 0, 0, 0), h(0.5));
        assert_eq!(p.get(0, 1, 0, 0), h(0.5));
    }

    #[test]
    fn causal_visibility() {
        let pe = PeConfig::default();
        let q = tensor(3, 16, |t, c| (t + c) as f64 * 0.1);
        let s = shape(3, 0);
        let p = softmax_scores(&attention_scores(&pe, &q, &q, &s).unwrap(), &s);
        assert_eq!(p.get(0, 0, 0, 0), Fp16Bits::ONE);
        assert_eq!(p.get(0, 1, 0, 0), Fp16Bits::ZERO);
        assert_eq!(p.get(0, 2, 0, 1), Fp16Bits::ZERO);
        assert_ne!(p.get(0, 2, 0, 2), Fp16Bits::ZERO);
        assert!(attention_scores(&pe, &q, &q, &shape(0, 0)).is_err());
    }

    #[test]
    fn attention_matches_f64_oracle() {
        let pe = PeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 8;
        let mk = |rng: &mut ChaCha8Rng, n| {
            let v: Vec<Fp16Bits> = (0..n * d).map(|_| h(rng.random_range(-1.0..1.0))).collect();
            (to_unified(&v, n, d, 8).unwrap(), v)
        };
        let (q, qv) = mk(&mut rng, 1);
        let (k, kv) = mk(&mut rng, 4);
        let (v, vv) = mk(&mut rng, 4);
        let s = AttnShape { heads: 1, kv_heads: 1, head_dim: d, kv_len: 4, q_pos0: 3 };
        let p = softmax_scores(&attention_scores(&pe, &q, &k, &s).unwrap(), &s);
        let o = attention_context(&pe, &p, &v, &s).unwrap();
        let f = |x: &Fp16Bits| x.to_f64();
        let sc: Vec<f64> = (0..4)
            .map(|j| (0..d).map(|c| f(&qv[c]) * f(&kv[j * d + c])).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = sc.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = sc.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..d {
            let want: f64 = (0..4).map(|j| e[j] / z * f(&vv[j * d + c])).sum();
            assert!((o.at(0, c).to_f64() - want).abs() <= 0.01 * want.abs().max(0.05), "{c}");
        }
    }

    #[test]
    fn kv_cache_lengths() {
        let mut kv = KvCache::new(1, 16, 4, 16).unwrap();
        let a = tensor(3, 16, |t, _| t as f64);
        kv.write(0, &a, &a).unwrap();
        kv.advance(3).unwrap();
        assert_eq!(kv.len(), 3);
        let b = tensor(1, 16, |_, _| 7.0);
        kv.write(0, &b, &b).unwrap();
        kv.advance(1).unwrap();
        assert_eq!(kv.len(), 4);
        assert_eq!(kv.k[0].at(3, 5), h(7.0));
        assert!(kv.write(0, &b, &b).is_err());
        assert!(kv.advance(1).is_err());
    }

    #[test]
    fn argmax_and_select_rows() {
        let x = tensor(2, 20, |t, c| if c == 7 + t { 3.0 } else { 0.0 });
        assert_eq!(argmax(&x, 0), 7);
        assert_eq!(argmax(&x, 1), 8);
        let r = select_rows(&x, 1, 1).unwrap();
        assert_eq!(argmax(&r, 0), 8);
        assert!(select_rows(&x, 1, 2).is_err());
    }
}
