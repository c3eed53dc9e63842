//! Synthetic weights and the direct operator-chain forward pass, plus a
//! double-precision reference of the same network.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::arith::PeConfig;
use crate::config::{ModelConfig, NormKind, RotaryStyle};
use crate::error::{Error, Result};
use crate::fp16::Fp16Bits;
use crate::layout::{to_unified, UnifiedTensor};
use crate::ops::{
    argmax, attention_context, attention_scores, kv_write, norm, rotary_embed, select_rows, silu, softmax_scores,
    vmm_bn, AttnShape, DecodedLayer, Epilogue, KvCache,
};
use crate::sparse::{package_layer, LayerSpec, WeightPackage};

/// A named FP16 vector (norm gains).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormVector {
    pub name: String,
    pub values: Vec<Fp16Bits>,
}

/// Packed matrices and norm gains of a whole model.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ModelWeights {
    pub package: WeightPackage,
    pub norms: Vec<NormVector>,
}

impl ModelWeights {
    pub fn norm(&self, name: &str) -> Result<&[Fp16Bits]> {
        self.norms
            .iter()
            .find(|n| n.name == name)
            .map(|n| n.values.as_slice())
            .ok_or_else(|| Error::Malformed(format!("missing norm vector {name}")))
    }

    pub fn layer(&self, name: &str) -> Result<&crate::sparse::PackedLayer> {
        self.package.layer(name).ok_or_else(|| Error::Malformed(format!("missing layer {name}")))
    }
}

pub fn norm_names(cfg: &ModelConfig) -> Vec<String> {
    let mut v: Vec<String> = (0..cfg.layers).flat_map(|l| [format!("l{l}.norm1"), format!("l{l}.norm2")]).collect();
    v.push("final_norm".into());
    v
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Gaussian weights with standard deviation `1/√ch_in`, one RNG stream per
/// matrix.
pub fn synthetic_matrix(spec: &LayerSpec, seed: u64, stream: u64) -> Vec<f32> {
    let mut rng = stream_rng(seed, stream);
    let n = Normal::new(0.0f64, 1.0 / libm::sqrt(spec.ch_in as f64)).unwrap();
    (0..spec.ch_in * spec.ch_out).map(|_| n.sample(&mut rng) as f32).collect()
}

/// Seeded synthetic model: Gaussian matrices and gains `1 + 0.1·N(0,1)`.
pub fn synthetic_weights(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    cfg.validate()?;
    let specs = cfg.all_layers();
    let layers = specs
        .iter()
        .enumerate()
        .map(|(i, s)| package_layer(s, &synthetic_matrix(s, seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let base = specs.len() as u64;
    let norms = norm_names(cfg)
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let mut rng = stream_rng(seed, base + i as u64);
            let n = Normal::new(1.0f64, 0.1).unwrap();
            NormVector { name, values: (0..cfg.hidden).map(|_| Fp16Bits::from_f64(n.sample(&mut rng))).collect() }
        })
        .collect();
    Ok(ModelWeights { package: WeightPackage { layers }, norms })
}

/// Seeded `N(0,1)` token vectors, row-major `[tokens][hidden]`.
pub fn synthetic_inputs(hidden: usize, tokens: usize, seed: u64) -> Vec<Fp16Bits> {
    let mut rng = stream_rng(seed, u64::MAX);
    let n = Normal::new(0.0f64, 1.0).unwrap();
    (0..tokens * hidden).map(|_| Fp16Bits::from_f64(n.sample(&mut rng))).collect()
}

#[derive(Debug, Clone)]
pub struct DecodedBlock {
    pub q: DecodedLayer,
    pub k: DecodedLayer,
    pub v: DecodedLayer,
    pub o: DecodedLayer,
    pub gate: DecodedLayer,
    pub up: DecodedLayer,
    pub down: DecodedLayer,
    pub norm1: Vec<Fp16Bits>,
    pub norm2: Vec<Fp16Bits>,
}

/// Decoded model evaluated by calling the operators directly.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub pe: PeConfig,
    pub blocks: Vec<DecodedBlock>,
    pub final_norm: Vec<Fp16Bits>,
    pub out: DecodedLayer,
}

/// Final-token output of a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Logits {
    pub values: Vec<Fp16Bits>,
    pub token: usize,
}

impl Model {
    pub fn new(cfg: &ModelConfig, w: &ModelWeights) -> Result<Self> {
        cfg.validate()?;
        let dec = |n: String| DecodedLayer::from_packed(w.layer(&n)?);
        let blocks = (0..cfg.layers)
            .map(|l| {
                Ok(DecodedBlock {
                    q: dec(format!("l{l}.q"))?,
                    k: dec(format!("l{l}.k"))?,
                    v: dec(format!("l{l}.v"))?,
                    o: dec(format!("l{l}.o"))?,
                    gate: dec(format!("l{l}.gate"))?,
                    up: dec(format!("l{l}.up"))?,
                    down: dec(format!("l{l}.down"))?,
                    norm1: w.norm(&format!("l{l}.norm1"))?.to_vec(),
                    norm2: w.norm(&format!("l{l}.norm2"))?.to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            pe: PeConfig::default(),
            blocks,
            final_norm: w.norm("final_norm")?.to_vec(),
            out: dec("out".into())?,
        })
    }

    pub fn new_cache(&self) -> Result<KvCache> {
        KvCache::new(self.cfg.layers, self.cfg.kv_dim(), self.cfg.max_token, self.cfg.t_out)
    }

    pub fn attn_shape(&self, kv_len: usize, q_pos0: usize) -> AttnShape {
        AttnShape { heads: self.cfg.heads, kv_heads: self.cfg.kv_heads, head_dim: self.cfg.head_dim, kv_len, q_pos0 }
    }

    /// One block over `x` (token form, rows at positions `pos0..`). Writes
    /// this block's keys and values into the cache without committing them.
    pub fn block(&self, l: usize, x: &UnifiedTensor, kv: &mut KvCache, pos0: usize) -> Result<UnifiedTensor> {
        let c = &self.cfg;
        let b = &self.blocks[l];
        let pe = &self.pe;
        let rows = x.tokens();
        let n1 = norm(c.norm, x, &b.norm1, c.norm_eps)?;
        let q = vmm_bn(pe, &n1, &b.q, Epilogue::None)?;
        let q = rotary_embed(&q, pos0, c.head_dim, c.rotary, c.rope_theta)?;
        let k = vmm_bn(pe, &n1, &b.k, Epilogue::None)?;
        let k = rotary_embed(&k, pos0, c.head_dim, c.rotary, c.rope_theta)?;
        if pos0 + rows > c.max_token {
            return Err(Error::TokenOutOfRange { token: (pos0 + rows) as u32, max_token: c.max_token as u32 });
        }
        kv_write(&mut kv.k[l], &k, pos0)?;
        let s = self.attn_shape(pos0 + rows, pos0);
        let scores = attention_scores(pe, &q, &kv.k[l], &s)?;
        let p = softmax_scores(&scores, &s);
        let v = vmm_bn(pe, &n1, &b.v, Epilogue::None)?;
        kv_write(&mut kv.v[l], &v, pos0)?;
        let ctx = attention_context(pe, &p, &kv.v[l], &s)?;
        let h = vmm_bn(pe, &ctx, &b.o, Epilogue::Residual(x))?;
        let n2 = norm(c.norm, &h, &b.norm2, c.norm_eps)?;
        let g = vmm_bn(pe, &n2, &b.gate, Epilogue::None)?;
        let a = silu(&g);
        let u = vmm_bn(pe, &n2, &b.up, Epilogue::Multiply(&a))?;
        vmm_bn(pe, &u, &b.down, Epilogue::Residual(&h))
    }

    /// Processes `x` (`rows` new tokens) against the cache and returns the
    /// logits of the last row.
    pub fn forward(&self, x: &UnifiedTensor, kv: &mut KvCache) -> Result<Logits> {
        let rows = x.tokens();
        if rows == 0 {
            return Err(Error::ShapeMismatch("no input rows".into()));
        }
        let pos0 = kv.len();
        let mut h = x.clone();
        for l in 0..self.cfg.layers {
            h = self.block(l, &h, kv, pos0)?;
        }
        kv.advance(rows)?;
        let last = select_rows(&h, rows - 1, 1)?;
        let n = norm(self.cfg.norm, &last, &self.final_norm, self.cfg.norm_eps)?;
        let logits = vmm_bn(&self.pe, &n, &self.out, Epilogue::None)?;
        Ok(Logits { token: argmax(&logits, 0), values: logits.token_row(0, 0) })
    }

    /// Prefill of the first `n` input rows followed by one decode step per
    /// remaining row; returns the final logits.
    pub fn prefill_then_decode(&self, inputs: &[Fp16Bits], n: usize) -> Result<Logits> {
        let hidden = self.cfg.hidden;
        let total = inputs.len() / hidden;
        if n == 0 || n > total {
            return Err(Error::ShapeMismatch(format!("prefill of {n} rows out of {total}")));
        }
        let mut kv = self.new_cache()?;
        let t = self.cfg.t_out;
        let mut out = self.forward(&to_unified(&inputs[..n * hidden], n, hidden, t)?, &mut kv)?;
        for i in n..total {
            out = self.forward(&to_unified(&inputs[i * hidden..(i + 1) * hidden], 1, hidden, t)?, &mut kv)?;
        }
        Ok(out)
    }
}

/// Double-precision evaluation of the same network on the dequantized
/// weights.
#[derive(Debug, Clone)]
pub struct ReferenceModel {
    cfg: ModelConfig,
    blocks: Vec<[Matrix; 7]>,
    norms: Vec<[Vec<f64>; 2]>,
    final_norm: Vec<f64>,
    out: Matrix,
}

#[derive(Debug, Clone)]
struct Matrix {
    rows: usize,
    cols: usize,
    w: Vec<f64>,
}

impl Matrix {
    fn from_layer(l: &DecodedLayer) -> Self {
        let (rows, cols) = (l.spec.ch_out, l.spec.ch_in);
        let mut w = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                w[r * cols + c] = l.weight(r, c);
            }
        }
        Self { rows, cols, w }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| self.w[r * self.cols..(r + 1) * self.cols].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }
}

fn to_f64(v: &[Fp16Bits]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64()).collect()
}

impl ReferenceModel {
    pub fn new(m: &Model) -> Self {
        let blocks = m
            .blocks
            .iter()
            .map(|b| [&b.q, &b.k, &b.v, &b.o, &b.gate, &b.up, &b.down].map(Matrix::from_layer))
            .collect();
        let norms = m.blocks.iter().map(|b| [to_f64(&b.norm1), to_f64(&b.norm2)]).collect();
        Self {
            cfg: m.cfg.clone(),
            blocks,
            norms,
            final_norm: to_f64(&m.final_norm),
            out: Matrix::from_layer(&m.out),
        }
    }

    fn norm(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        match self.cfg.norm {
            NormKind::Rms => {
                let inv = 1.0 / libm::sqrt(x.iter().map(|v| v * v).sum::<f64>() / n + self.cfg.norm_eps);
                x.iter().zip(g).map(|(v, g)| v * inv * g).collect()
            }
            NormKind::Layer => {
                let mean = x.iter().sum::<f64>() / n;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv = 1.0 / libm::sqrt(var + self.cfg.norm_eps);
                x.iter().zip(g).map(|(v, g)| (v - mean) * inv * g).collect()
            }
        }
    }

    fn rotate(&self, x: &mut [f64], pos: usize) {
        let hd = self.cfg.head_dim;
        let theta = self.cfg.rope_theta;
        for h in 0..x.len() / hd {
            let b = h * hd;
            let pairs: Vec<(usize, usize, f64)> = match self.cfg.rotary {
                RotaryStyle::GlmHalf => {
                    (0..hd / 4).map(|k| (2 * k, 2 * k + 1, 2.0 * k as f64 / (hd / 2) as f64)).collect()
                }
                RotaryStyle::NeoxFull => (0..hd / 2).map(|k| (k, k + hd / 2, 2.0 * k as f64 / hd as f64)).collect(),
            };
            for (i, j, e) in pairs {
                let a = pos as f64 * libm::pow(theta, -e);
                let (s, c) = (libm::sin(a), libm::cos(a));
                let (u, v) = (x[b + i], x[b + j]);
                x[b + i] = u * c - v * s;
                x[b + j] = v * c + u * s;
            }
        }
    }

    /// Logits of the last of `tokens` row-major input vectors.
    pub fn forward(&self, inputs: &[f64]) -> Vec<f64> {
        let c = &self.cfg;
        let t = inputs.len() / c.hidden;
        let hd = c.head_dim;
        let group = c.heads / c.kv_heads;
        let mut xs: Vec<Vec<f64>> = inputs.chunks(c.hidden).map(|r| r.to_vec()).collect();
        for (l, w) in self.blocks.iter().enumerate() {
            let n1: Vec<Vec<f64>> = xs.iter().map(|x| self.norm(x, &self.norms[l][0])).collect();
            let mut q: Vec<Vec<f64>> = n1.iter().map(|x| w[0].apply(x)).collect();
            let mut k: Vec<Vec<f64>> = n1.iter().map(|x| w[1].apply(x)).collect();
            let v: Vec<Vec<f64>> = n1.iter().map(|x| w[2].apply(x)).collect();
            for i in 0..t {
                self.rotate(&mut q[i], i);
                self.rotate(&mut k[i], i);
            }
            let scale = 1.0 / libm::sqrt(hd as f64);
            for i in 0..t {
                let mut ctx = vec![0.0; c.hidden];
                for h in 0..c.heads {
                    let g = h / group;
                    let s: Vec<f64> = (0..=i)
                        .map(|j| (0..hd).map(|d| q[i][h * hd + d] * k[j][g * hd + d]).sum::<f64>() * scale)
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = s.iter().map(|x| libm::exp(x - m)).collect();
                    let z: f64 = e.iter().sum();
                    for d in 0..hd {
                        ctx[h * hd + d] = (0..=i).map(|j| e[j] / z * v[j][g * hd + d]).sum();
                    }
                }
                let o = w[3].apply(&ctx);
                let hres: Vec<f64> = o.iter().zip(&xs[i]).map(|(a, b)| a + b).collect();
                let n2 = self.norm(&hres, &self.norms[l][1]);
                let gate = w[4].apply(&n2);
                let up = w[5].apply(&n2);
                let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + libm::exp(-g)) * u).collect();
                let down = w[6].apply(&act);
                xs[i] = down.iter().zip(&hres).map(|(a, b)| a + b).collect();
            }
        }
        let n = self.norm(&xs[t - 1], &self.final_norm);
        self.out.apply(&n)
    }
}

/// `‖a − b‖₂ / ‖b‖₂`.
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    libm::sqrt(num / den)
}
