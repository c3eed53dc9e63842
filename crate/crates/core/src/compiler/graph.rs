//! The fused block graph: 17 steps per block plus two outlayer steps.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::config::{ModelConfig, NormKind};
use crate::error::{Error, Result};
use crate::ops::{OpKind, BLOCK_STEPS, OUTLAYER_STEPS};
use crate::sparse::PackFormat;

pub type TensorId = usize;

/// What a tensor holds, which fixes its residency and extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorClass {
    /// Host-supplied token vectors.
    Input,
    /// `[rows, ch]` activations.
    Activation,
    /// `[heads, kv_len, rows]` attention scores or probabilities.
    Scores,
    /// `[max_token, kv_dim]` cache of one layer.
    KCache,
    VCache,
    /// Norm gains.
    Gamma,
    /// `[rows, vocab]` final output.
    Logits,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorDesc {
    pub name: String,
    pub class: TensorClass,
    pub outer: usize,
    pub ch: usize,
    pub t_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EpilogueKind {
    None,
    Residual,
    Multiply,
}

impl EpilogueKind {
    pub fn code(self) -> i64 {
        match self {
            EpilogueKind::None => 0,
            EpilogueKind::Residual => 1,
            EpilogueKind::Multiply => 2,
        }
    }

    pub fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(EpilogueKind::None),
            1 => Ok(EpilogueKind::Residual),
            2 => Ok(EpilogueKind::Multiply),
            _ => Err(Error::Malformed(format!("epilogue code {c}"))),
        }
    }
}

/// Operation-specific attributes of a node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeOp {
    Norm { ch: usize },
    Vmm { weight: String, ch_in: usize, ch_out: usize, format: PackFormat, epilogue: EpilogueKind },
    Rotary { ch: usize },
    KvWrite { ch: usize },
    Scores,
    Softmax,
    Context,
    Activation { ch: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    /// Position in the fused step list, 1 to 19.
    pub step: u8,
    pub name: &'static str,
    pub kind: OpKind,
    pub layer: usize,
    pub op: NodeOp,
    /// Data operands, primary first; a norm's gain is the second input.
    pub inputs: Vec<TensorId>,
    pub output: TensorId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpGraph {
    pub cfg: ModelConfig,
    pub tensors: Vec<TensorDesc>,
    pub nodes: Vec<Node>,
}

impl OpGraph {
    pub fn tensor(&self, id: TensorId) -> &TensorDesc {
        &self.tensors[id]
    }

    pub fn find_tensor(&self, name: &str) -> Option<TensorId> {
        self.tensors.iter().position(|t| t.name == name)
    }

    /// Index of the node producing each tensor, if any.
    pub fn producers(&self) -> Vec<Option<usize>> {
        let mut p = alloc::vec![None; self.tensors.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            p[n.output] = Some(i);
        }
        p
    }

    /// Checks acyclicity in node order and that producer and consumer agree
    /// on every edge's layout. Returns the number of layout conversions the
    /// graph would need.
    pub fn validate(&self) -> Result<usize> {
        let prod = self.producers();
        let c = &self.cfg;
        let mut conversions = 0;
        let mut written: Vec<bool> = self
            .tensors
            .iter()
            .map(|t| matches!(t.class, TensorClass::Input | TensorClass::Gamma | TensorClass::KCache | TensorClass::VCache))
            .collect();
        for (i, n) in self.nodes.iter().enumerate() {
            for &t in &n.inputs {
                if !written[t] {
                    return Err(Error::InvalidConfig(format!("node {i} ({}) reads {} before it is written", n.name, self.tensors[t].name)));
                }
                if let Some(p) = prod[t] {
                    if p >= i {
                        return Err(Error::InvalidConfig(format!("cycle through {}", self.tensors[t].name)));
                    }
                }
            }
            written[n.output] = true;
            let want_in: Vec<(usize, usize)> = match &n.op {
                NodeOp::Norm { ch } | NodeOp::Rotary { ch } | NodeOp::KvWrite { ch } | NodeOp::Activation { ch } => {
                    alloc::vec![(1, *ch)]
                }
                NodeOp::Vmm { ch_in, ch_out, epilogue, .. } => {
                    let mut v = alloc::vec![(1, *ch_in)];
                    if *epilogue != EpilogueKind::None {
                        v.push((1, *ch_out));
                    }
                    v
                }
                NodeOp::Scores => alloc::vec![(1, c.hidden), (1, c.kv_dim())],
                NodeOp::Softmax => alloc::vec![(c.heads, c.max_token)],
                NodeOp::Context => alloc::vec![(c.heads, c.max_token), (1, c.kv_dim())],
            };
            for (&t, (outer, ch)) in n.inputs.iter().zip(want_in) {
                let d = &self.tensors[t];
                if d.t_out != c.t_out || d.outer != outer || d.ch != ch {
                    conversions += 1;
                }
            }
        }
        Ok(conversions)
    }

    pub fn count_kind(&self, k: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == k).count()
    }
}

struct Builder {
    t_out: usize,
    norm: OpKind,
    tensors: Vec<TensorDesc>,
    nodes: Vec<Node>,
}

impl Builder {
    fn tensor(&mut self, name: String, class: TensorClass, outer: usize, ch: usize) -> TensorId {
        self.tensors.push(TensorDesc { name, class, outer, ch, t_out: self.t_out });
        self.tensors.len() - 1
    }

    fn node(&mut self, step: u8, layer: usize, op: NodeOp, inputs: Vec<TensorId>, output: TensorId) {
        let name = if step <= 17 { BLOCK_STEPS[step as usize - 1] } else { OUTLAYER_STEPS[step as usize - 18] };
        let kind = match (step, &op) {
            (1 | 13, _) => self.norm,
            (18, _) => OpKind::OutlayerLn,
            (19, _) => OpKind::VmmArgmax,
            (_, NodeOp::Vmm { .. }) => OpKind::VmmBn,
            (_, NodeOp::Rotary { .. }) => OpKind::RotaryEmb,
            (_, NodeOp::KvWrite { .. }) => OpKind::KvWriteHbm,
            (_, NodeOp::Scores) => OpKind::Transpose,
            (_, NodeOp::Softmax) => OpKind::Softmax,
            (_, NodeOp::Context) => OpKind::MhaMatmul,
            (_, NodeOp::Activation { .. }) => OpKind::Activation,
            (_, NodeOp::Norm { .. }) => self.norm,
        };
        self.nodes.push(Node { step, name, kind, layer, op, inputs, output });
    }
}

/// Builds the fused graph of a whole model.
pub fn build_block_graph(cfg: &ModelConfig) -> Result<OpGraph> {
    cfg.validate()?;
    let norm = match cfg.norm {
        NormKind::Rms => OpKind::RmsNorm,
        NormKind::Layer => OpKind::LayerNorm,
    };
    let mut b = Builder { t_out: cfg.t_out, norm, tensors: Vec::new(), nodes: Vec::new() };
    let (h, kv, ffn) = (cfg.hidden, cfg.kv_dim(), cfg.ffn);
    let mut x = b.tensor("input".into(), TensorClass::Input, 1, h);
    for l in 0..cfg.layers {
        let specs = cfg.block_layers(l);
        let vmm = |i: usize, e: EpilogueKind| NodeOp::Vmm {
            weight: specs[i].name.clone(),
            ch_in: specs[i].ch_in,
            ch_out: specs[i].ch_out,
            format: specs[i].format,
            epilogue: e,
        };
        let act = |b: &mut Builder, n: &str, ch: usize| b.tensor(format!("l{l}.{n}"), TensorClass::Activation, 1, ch);
        let g1 = b.tensor(format!("l{l}.norm1"), TensorClass::Gamma, 1, h);
        let g2 = b.tensor(format!("l{l}.norm2"), TensorClass::Gamma, 1, h);
        let kc = b.tensor(format!("l{l}.kcache"), TensorClass::KCache, 1, kv);
        let vc = b.tensor(format!("l{l}.vcache"), TensorClass::VCache, 1, kv);

        let n1 = act(&mut b, "n1", h);
        b.node(1, l, NodeOp::Norm { ch: h }, alloc::vec![x, g1], n1);
        let q = act(&mut b, "q", h);
        b.node(2, l, vmm(0, EpilogueKind::None), alloc::vec![n1], q);
        let qr = act(&mut b, "q_rot", h);
        b.node(3, l, NodeOp::Rotary { ch: h }, alloc::vec![q], qr);
        let k = act(&mut b, "k", kv);
        b.node(4, l, vmm(1, EpilogueKind::None), alloc::vec![n1], k);
        let kr = act(&mut b, "k_rot", kv);
        b.node(5, l, NodeOp::Rotary { ch: kv }, alloc::vec![k], kr);
        b.node(6, l, NodeOp::KvWrite { ch: kv }, alloc::vec![kr], kc);
        let s = b.tensor(format!("l{l}.scores"), TensorClass::Scores, cfg.heads, cfg.max_token);
        b.node(7, l, NodeOp::Scores, alloc::vec![qr, kc], s);
        let p = b.tensor(format!("l{l}.probs"), TensorClass::Scores, cfg.heads, cfg.max_token);
        b.node(8, l, NodeOp::Softmax, alloc::vec![s], p);
        let v = act(&mut b, "v", kv);
        b.node(9, l, vmm(2, EpilogueKind::None), alloc::vec![n1], v);
        b.node(10, l, NodeOp::KvWrite { ch: kv }, alloc::vec![v], vc);
        let ctx = act(&mut b, "ctx", h);
        b.node(11, l, NodeOp::Context, alloc::vec![p, vc], ctx);
        let hres = act(&mut b, "h", h);
        b.node(12, l, vmm(3, EpilogueKind::Residual), alloc::vec![ctx, x], hres);
        let n2 = act(&mut b, "n2", h);
        b.node(13, l, NodeOp::Norm { ch: h }, alloc::vec![hres, g2], n2);
        let g = act(&mut b, "gate", ffn);
        b.node(14, l, vmm(4, EpilogueKind::None), alloc::vec![n2], g);
        let a = act(&mut b, "act", ffn);
        b.node(15, l, NodeOp::Activation { ch: ffn }, alloc::vec![g], a);
        let u = act(&mut b, "up", ffn);
        b.node(16, l, vmm(5, EpilogueKind::Multiply), alloc::vec![n2, a], u);
        let y = act(&mut b, "out", h);
        b.node(17, l, vmm(6, EpilogueKind::Residual), alloc::vec![u, hres], y);
        x = y;
    }
    let last = cfg.layers - 1;
    let gf = b.tensor("final_norm".into(), TensorClass::Gamma, 1, h);
    let nf = b.tensor("final".into(), TensorClass::Activation, 1, h);
    b.node(18, last, NodeOp::Norm { ch: h }, alloc::vec![x, gf], nf);
    let out = cfg.outlayer();
    let logits = b.tensor("logits".into(), TensorClass::Logits, 1, cfg.vocab);
    b.node(
        19,
        last,
        NodeOp::Vmm { weight: out.name, ch_in: h, ch_out: cfg.vocab, format: out.format, epilogue: EpilogueKind::None },
        alloc::vec![nf],
        logits,
    );
    Ok(OpGraph { cfg: cfg.clone(), tensors: b.tensors, nodes: b.nodes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glm_step_counts() {
        let g = build_block_graph(&ModelConfig::glm6b()).unwrap();
        assert_eq!(g.nodes.len(), 17 * 28 + 2);
        for (i, n) in g.nodes[..17].iter().enumerate() {
            assert_eq!(n.name, BLOCK_STEPS[i]);
            assert!(OpKind::for_step(n.name).is_some());
        }
        assert_eq!(g.nodes[476].name, "Outlayer_LN");
        assert_eq!(g.nodes[477].name, "VMMBN_Arg");
        assert_eq!(g.validate().unwrap(), 0);
        assert_eq!(g.count_kind(OpKind::VmmBn), 7 * 28);
    }

    #[test]
    fn one_block_toy() {
        let mut c = ModelConfig::toy();
        c.layers = 1;
        let g = build_block_graph(&c).unwrap();
        assert_eq!(g.nodes.len(), 19);
        assert_eq!(g.validate().unwrap(), 0);
    }

    #[test]
    fn validator_counts_mismatch() {
        let mut g = build_block_graph(&ModelConfig::toy()).unwrap();
        let q = g.find_tensor("l0.q").unwrap();
        g.tensors[q].t_out = 8;
        assert_eq!(g.validate().unwrap(), 1);
        g.nodes.swap(1, 2);
        assert!(g.validate().is_err());
    }
}
