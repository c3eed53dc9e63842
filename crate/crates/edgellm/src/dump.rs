//! Activation dumps and logits reports.
//!
//! An activation dump is the magic `ELAD`, a `u32` version, a `u32` header
//! length and a JSON header `{dims, t_out}`, followed by the tensor's FP16
//! elements (little-endian) in unified-layout order.

use edgellm_core::fp16::Fp16Bits;
use edgellm_core::layout::UnifiedTensor;
use serde::{Deserialize, Serialize};

use crate::formats::{FormatError, Result, FORMAT_VERSION};

pub const ACTIVATION_MAGIC: [u8; 4] = *b"ELAD";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct ActivationHeader {
    /// `[outer, ch, h, w]`.
    dims: [usize; 4],
    t_out: usize,
}

pub fn encode_activation(t: &UnifiedTensor) -> Result<Vec<u8>> {
    let h = ActivationHeader { dims: [t.outer(), t.channels(), t.height(), t.width()], t_out: t.t_out() };
    let json = serde_json::to_vec(&h)?;
    let mut out = Vec::with_capacity(12 + json.len() + 2 * t.data().len());
    out.extend_from_slice(&ACTIVATION_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in t.data() {
        out.extend_from_slice(&v.0.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_activation(b: &[u8]) -> Result<UnifiedTensor> {
    if b.len() < 12 {
        return Err(FormatError::Truncated("preamble"));
    }
    let found: [u8; 4] = b[..4].try_into().unwrap();
    if found != ACTIVATION_MAGIC {
        return Err(FormatError::Magic { expected: ACTIVATION_MAGIC, found });
    }
    let v = u32::from_le_bytes(b[4..8].try_into().unwrap());
    if v != FORMAT_VERSION {
        return Err(FormatError::Version(v));
    }
    let n = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
    let json = b.get(12..12 + n).ok_or(FormatError::Truncated("header"))?;
    let h: ActivationHeader = serde_json::from_slice(json)?;
    let body = &b[12 + n..];
    if !body.len().is_multiple_of(2) {
        return Err(FormatError::Truncated("elements"));
    }
    let data = body.chunks_exact(2).map(|c| Fp16Bits(u16::from_le_bytes([c[0], c[1]]))).collect();
    let [o, ch, hh, w] = h.dims;
    Ok(UnifiedTensor::from_raw(o, ch, hh, w, h.t_out, data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsReport {
    pub token: usize,
    pub phase: String,
    pub argmax: usize,
    pub logits: Vec<f32>,
    pub bits: Vec<u16>,
}

impl LogitsReport {
    pub fn new(token: usize, phase: &str, argmax: usize, logits: &[Fp16Bits]) -> Self {
        Self {
            token,
            phase: phase.into(),
            argmax,
            logits: logits.iter().map(|v| v.to_f32()).collect(),
            bits: logits.iter().map(|v| v.0).collect(),
        }
    }
}

/// First index of the largest value, NaNs ignored.
pub fn argmax(v: &[Fp16Bits]) -> usize {
    let mut best = 0;
    let mut bv = f64::NEG_INFINITY;
    for (i, x) in v.iter().enumerate() {
        let f = x.to_f64();
        if f > bv {
            bv = f;
            best = i;
        }
    }
    best
}
