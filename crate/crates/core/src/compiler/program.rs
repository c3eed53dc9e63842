//! Instruction words, lowering, runtime patching and the last-token pass.
//!
//! Every instruction is a header word `opcode | nfields << 8 | step << 16`
//! followed by one 32-bit word per field of the opcode's schema, padded with
//! zeros to a multiple of four words. Addresses are in 32-byte beats.

use alloc::format;
use alloc::vec::Vec;

use super::expr::{eval_rpn, RpnOp, SymExpr};
use super::graph::{EpilogueKind, NodeOp, OpGraph, TensorClass, TensorId};
use super::memory::{MemoryMap, Space};
use crate::config::{ModelConfig, RotaryStyle};
use crate::error::{Error, Result};
use crate::ops::OpKind;
use crate::perf::Phase;
use crate::sparse::PackFormat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: &'static str,
    pub width: u8,
}

const fn f(name: &'static str, width: u8) -> FieldSpec {
    FieldSpec { name, width }
}

const ADDR: u8 = 32;
const DIM: u8 = 24;
const CODE: u8 = 8;

const NORM: &[FieldSpec] =
    &[f("layer", 16), f("src", ADDR), f("dst", ADDR), f("gamma", ADDR), f("ch", DIM), f("rows", DIM), f("src_row", DIM)];
const VMM: &[FieldSpec] = &[
    f("layer", 16),
    f("src", ADDR),
    f("dst", ADDR),
    f("aux", ADDR),
    f("weight", ADDR),
    f("ch_in", DIM),
    f("ch_out", DIM),
    f("format", CODE),
    f("epilogue", CODE),
    f("rows", DIM),
    f("src_row", DIM),
    f("aux_row", DIM),
];
const VMM_ARG: &[FieldSpec] = &[
    f("layer", 16),
    f("src", ADDR),
    f("dst", ADDR),
    f("aux", ADDR),
    f("weight", ADDR),
    f("ch_in", DIM),
    f("ch_out", DIM),
    f("format", CODE),
    f("epilogue", CODE),
    f("rows", DIM),
    f("src_row", DIM),
    f("aux_row", DIM),
    f("arg_row", DIM),
];
const ROTARY: &[FieldSpec] = &[
    f("layer", 16),
    f("src", ADDR),
    f("dst", ADDR),
    f("ch", DIM),
    f("head_dim", DIM),
    f("style", CODE),
    f("rows", DIM),
    f("pos0", DIM),
];
const KV_WRITE: &[FieldSpec] =
    &[f("layer", 16), f("src", ADDR), f("dst", ADDR), f("ch", DIM), f("rows", DIM), f("kv_row", DIM)];
const ATTN: &[FieldSpec] = &[
    f("layer", 16),
    f("src", ADDR),
    f("cache", ADDR),
    f("dst", ADDR),
    f("heads", DIM),
    f("kv_heads", DIM),
    f("head_dim", DIM),
    f("rows", DIM),
    f("kv_len", DIM),
    f("q_pos0", DIM),
];
const SOFTMAX: &[FieldSpec] =
    &[f("layer", 16), f("src", ADDR), f("dst", ADDR), f("heads", DIM), f("rows", DIM), f("kv_len", DIM), f("q_pos0", DIM)];
const ACT: &[FieldSpec] =
    &[f("layer", 16), f("src", ADDR), f("dst", ADDR), f("ch", DIM), f("rows", DIM), f("src_row", DIM)];

pub fn opcode(k: OpKind) -> u8 {
    match k {
        OpKind::LayerNorm => 1,
        OpKind::RmsNorm => 2,
        OpKind::VmmBn => 3,
        OpKind::RotaryEmb => 4,
        OpKind::KvWriteHbm => 5,
        OpKind::Transpose => 6,
        OpKind::Softmax => 7,
        OpKind::Activation => 8,
        OpKind::MhaMatmul => 9,
        OpKind::OutlayerLn => 10,
        OpKind::VmmArgmax => 11,
    }
}

pub fn kind_of_opcode(op: u8) -> Result<OpKind> {
    use OpKind::*;
    [LayerNorm, RmsNorm, VmmBn, RotaryEmb, KvWriteHbm, Transpose, Softmax, Activation, MhaMatmul, OutlayerLn, VmmArgmax]
        .into_iter()
        .find(|&k| opcode(k) == op)
        .ok_or_else(|| Error::Malformed(format!("unknown opcode {op}")))
}

pub fn schema(k: OpKind) -> &'static [FieldSpec] {
    match k {
        OpKind::LayerNorm | OpKind::RmsNorm | OpKind::OutlayerLn => NORM,
        OpKind::VmmBn => VMM,
        OpKind::VmmArgmax => VMM_ARG,
        OpKind::RotaryEmb => ROTARY,
        OpKind::KvWriteHbm => KV_WRITE,
        OpKind::Transpose | OpKind::MhaMatmul => ATTN,
        OpKind::Softmax => SOFTMAX,
        OpKind::Activation => ACT,
    }
}

/// Words an instruction of kind `k` occupies.
pub fn instruction_words(k: OpKind) -> usize {
    (1 + schema(k).len()).div_ceil(4) * 4
}

pub fn format_code(f: PackFormat) -> i64 {
    PackFormat::ALL.iter().position(|&x| x == f).unwrap() as i64
}

pub fn format_of_code(c: u32) -> Result<PackFormat> {
    PackFormat::ALL.get(c as usize).copied().ok_or_else(|| Error::Malformed(format!("format code {c}")))
}

pub fn rotary_code(r: RotaryStyle) -> i64 {
    match r {
        RotaryStyle::GlmHalf => 0,
        RotaryStyle::NeoxFull => 1,
    }
}

pub fn rotary_of_code(c: u32) -> Result<RotaryStyle> {
    match c {
        0 => Ok(RotaryStyle::GlmHalf),
        1 => Ok(RotaryStyle::NeoxFull),
        _ => Err(Error::Malformed(format!("rotary code {c}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub kind: OpKind,
    pub step: u8,
    /// One expression per schema field.
    pub fields: Vec<SymExpr>,
    pub inputs: Vec<TensorId>,
    pub output: TensorId,
}

impl Instruction {
    pub fn schema(&self) -> &'static [FieldSpec] {
        schema(self.kind)
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.schema().iter().position(|s| s.name == name)
    }

    pub fn field(&self, name: &str) -> Option<&SymExpr> {
        self.field_index(name).map(|i| &self.fields[i])
    }

    fn set(&mut self, name: &str, e: SymExpr) {
        let i = self.field_index(name).expect("field in schema");
        self.fields[i] = e.fold();
    }
}

/// A field whose value depends on the token, patched at runtime.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Residual {
    pub instr: usize,
    pub field: usize,
    /// Absolute word index in the encoded program.
    pub word: usize,
    pub rpn: Vec<RpnOp>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledProgram {
    pub cfg: ModelConfig,
    pub phase: Phase,
    pub max_token: usize,
    pub memory: MemoryMap,
    pub instructions: Vec<Instruction>,
    pub residuals: Vec<Residual>,
    pub last_token: bool,
}

/// How the token enters lowering: as a variable or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenBinding {
    Symbolic,
    Constant(usize),
}

impl TokenBinding {
    fn expr(self) -> SymExpr {
        match self {
            TokenBinding::Symbolic => SymExpr::Token,
            TokenBinding::Constant(t) => SymExpr::Const(t as i64),
        }
    }
}

/// Rows processed per instruction, cache length, write row and position of
/// the first query row.
fn phase_exprs(p: Phase, tok: &SymExpr) -> (SymExpr, SymExpr, SymExpr, SymExpr) {
    match p {
        Phase::Decode => (SymExpr::c(1), tok.clone(), tok.clone() - SymExpr::c(1), tok.clone() - SymExpr::c(1)),
        Phase::Prefill => (tok.clone(), tok.clone(), SymExpr::c(0), SymExpr::c(0)),
    }
}

/// One instruction per node with every field an expression of the token.
pub fn lower(g: &OpGraph, map: &MemoryMap, phase: Phase, binding: TokenBinding) -> Result<CompiledProgram> {
    let cfg = &g.cfg;
    if let TokenBinding::Constant(t) = binding {
        if t == 0 || t > cfg.max_token {
            return Err(Error::TokenOutOfRange { token: t as u32, max_token: cfg.max_token as u32 });
        }
    }
    let tok = binding.expr();
    let (rows, kv_len, kv_row, pos0) = phase_exprs(phase, &tok);
    let beat = |t: TensorId| -> Result<SymExpr> {
        let r = map
            .tensor_region(t)
            .ok_or_else(|| Error::Malformed(format!("tensor {} has no region", g.tensors[t].name)))?;
        Ok(SymExpr::c(r.beat() as i64))
    };
    let c = |v: usize| SymExpr::c(v as i64);
    let mut instructions = Vec::with_capacity(g.nodes.len());
    for n in &g.nodes {
        let layer = c(n.layer);
        let src = beat(n.inputs[0])?;
        let dst = beat(n.output)?;
        let fields: Vec<SymExpr> = match &n.op {
            NodeOp::Norm { ch } => {
                alloc::vec![layer, src, dst, beat(n.inputs[1])?, c(*ch), rows.clone(), c(0)]
            }
            NodeOp::Vmm { weight, ch_in, ch_out, format, epilogue } => {
                let w = map.region(weight).ok_or_else(|| Error::Malformed(format!("no region for {weight}")))?;
                debug_assert_eq!(w.space, Space::HbmStriped);
                let aux = if *epilogue == EpilogueKind::None { c(0) } else { beat(n.inputs[1])? };
                let mut v = alloc::vec![
                    layer,
                    src,
                    dst,
                    aux,
                    SymExpr::c(w.beat() as i64),
                    c(*ch_in),
                    c(*ch_out),
                    SymExpr::c(format_code(*format)),
                    SymExpr::c(epilogue.code()),
                    rows.clone(),
                    c(0),
                    c(0),
                ];
                if n.kind == OpKind::VmmArgmax {
                    v.push(rows.clone() - c(1));
                }
                v
            }
            NodeOp::Rotary { ch } => alloc::vec![
                layer,
                src,
                dst,
                c(*ch),
                c(cfg.head_dim),
                SymExpr::c(rotary_code(cfg.rotary)),
                rows.clone(),
                pos0.clone()
            ],
            NodeOp::KvWrite { ch } => alloc::vec![layer, src, dst, c(*ch), rows.clone(), kv_row.clone()],
            NodeOp::Scores | NodeOp::Context => alloc::vec![
                layer,
                src,
                beat(n.inputs[1])?,
                dst,
                c(cfg.heads),
                c(cfg.kv_heads),
                c(cfg.head_dim),
                rows.clone(),
                kv_len.clone(),
                pos0.clone()
            ],
            NodeOp::Softmax => alloc::vec![layer, src, dst, c(cfg.heads), rows.clone(), kv_len.clone(), pos0.clone()],
            NodeOp::Activation { ch } => alloc::vec![layer, src, dst, c(*ch), rows.clone(), c(0)],
        };
        debug_assert_eq!(fields.len(), schema(n.kind).len());
        instructions.push(Instruction {
            kind: n.kind,
            step: n.step,
            fields: fields.into_iter().map(|e| e.fold()).collect(),
            inputs: n.inputs.clone(),
            output: n.output,
        });
    }
    let mut p = CompiledProgram {
        cfg: cfg.clone(),
        phase,
        max_token: cfg.max_token,
        memory: map.clone(),
        instructions,
        residuals: Vec::new(),
        last_token: false,
    };
    p.finalize()?;
    Ok(p)
}

/// Restricts everything after the final attention context to the last
/// token row. Rows already reduced to one read at offset 0; full-height
/// inputs read at `rows − 1`. Programs that process one row are unchanged.
pub fn last_token_optimize(p: &CompiledProgram) -> Result<CompiledProgram> {
    let mut q = p.clone();
    let Some(cut) = q.instructions.iter().rposition(|i| i.kind == OpKind::MhaMatmul) else {
        return Ok(q);
    };
    let rows = q.instructions[cut].field("rows").cloned().unwrap_or(SymExpr::c(1));
    let last_row = (rows - SymExpr::c(1)).fold();
    let mut reduced: Vec<TensorId> = Vec::new();
    for ins in &mut q.instructions[cut + 1..] {
        let row_of = |t: TensorId| if reduced.contains(&t) { SymExpr::c(0) } else { last_row.clone() };
        let src_row = row_of(ins.inputs[0]);
        ins.set("src_row", src_row);
        if ins.field_index("aux_row").is_some() {
            let aux = ins.inputs.get(1).map(|&t| row_of(t)).unwrap_or(SymExpr::c(0));
            let has_aux = ins.field("epilogue").and_then(|e| e.as_const()).unwrap_or(0) != 0;
            ins.set("aux_row", if has_aux { aux } else { SymExpr::c(0) });
        }
        ins.set("rows", SymExpr::c(1));
        if ins.field_index("arg_row").is_some() {
            ins.set("arg_row", SymExpr::c(0));
        }
        reduced.push(ins.output);
    }
    q.last_token = true;
    q.finalize()?;
    Ok(q)
}

/// Full compilation: graph, memory map, lowering and, for prefill, the
/// last-token pass.
pub fn compile(cfg: &ModelConfig, phase: Phase, binding: TokenBinding) -> Result<CompiledProgram> {
    let g = super::graph::build_block_graph(cfg)?;
    let map = super::memory::allocate_memory(&g)?;
    let p = lower(&g, &map, phase, binding)?;
    match phase {
        Phase::Prefill => last_token_optimize(&p),
        Phase::Decode => Ok(p),
    }
}

impl CompiledProgram {
    /// Checks field ranges over every token and rebuilds the residual
    /// table.
    fn finalize(&mut self) -> Result<()> {
        self.residuals.clear();
        let mut word = 0;
        for (ii, ins) in self.instructions.iter().enumerate() {
            for (fi, (e, spec)) in ins.fields.iter().zip(ins.schema()).enumerate() {
                let check = |v: i64| -> Result<()> {
                    if v < 0 || (spec.width < 64 && v >= 1i64 << spec.width) {
                        return Err(Error::FieldOverflow { instruction: ii, field: spec.name, value: v });
                    }
                    Ok(())
                };
                match e.as_const() {
                    Some(v) => check(v)?,
                    None => {
                        for t in 1..=self.max_token as i64 {
                            check(e.eval(t)?)?;
                        }
                        self.residuals.push(Residual { instr: ii, field: fi, word: word + 1 + fi, rpn: e.to_rpn() });
                    }
                }
            }
            word += instruction_words(ins.kind);
        }
        Ok(())
    }

    pub fn total_words(&self) -> usize {
        self.instructions.iter().map(|i| instruction_words(i.kind)).sum()
    }

    pub fn total_fields(&self) -> usize {
        self.instructions.iter().map(|i| i.fields.len()).sum()
    }

    /// Share of fields that need runtime patching.
    pub fn residual_fraction(&self) -> f64 {
        self.residuals.len() as f64 / self.total_fields() as f64
    }

    /// Encoded words with constant fields filled and residual slots zero.
    pub fn base_words(&self) -> Vec<u32> {
        let mut w = Vec::with_capacity(self.total_words());
        for ins in &self.instructions {
            let start = w.len();
            w.push(opcode(ins.kind) as u32 | (ins.fields.len() as u32) << 8 | (ins.step as u32) << 16);
            for e in &ins.fields {
                w.push(e.as_const().map(|v| v as u32).unwrap_or(0));
            }
            w.resize(start + instruction_words(ins.kind), 0);
        }
        w
    }

    /// Words of a program whose fields are all constant.
    pub fn encode(&self) -> Result<Vec<u32>> {
        if let Some(r) = self.residuals.first() {
            return Err(Error::InvalidConfig(format!(
                "instruction {} field {} depends on the token",
                r.instr,
                self.instructions[r.instr].schema()[r.field].name
            )));
        }
        Ok(self.base_words())
    }
}

/// Instruction words for a concrete token: constant words plus every
/// residual expression evaluated from its reverse-Polish form.
pub fn patch_for_token(p: &CompiledProgram, token: usize) -> Result<Vec<u32>> {
    if token == 0 || token > p.max_token {
        return Err(Error::TokenOutOfRange { token: token as u32, max_token: p.max_token as u32 });
    }
    let mut w = p.base_words();
    apply_residuals(&mut w, &p.residuals, token)?;
    Ok(w)
}

/// Writes every residual value for `token` into `words`.
pub fn apply_residuals(words: &mut [u32], residuals: &[Residual], token: usize) -> Result<()> {
    for r in residuals {
        let v = eval_rpn(&r.rpn, token as i64)?;
        let slot = words.get_mut(r.word).ok_or_else(|| Error::Malformed(format!("residual word {} out of range", r.word)))?;
        *slot = u32::try_from(v).map_err(|_| Error::FieldOverflow { instruction: r.instr, field: "residual", value: v })?;
    }
    Ok(())
}

/// A decoded instruction word group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedInstruction {
    pub kind: OpKind,
    pub step: u8,
    pub fields: Vec<u32>,
}

impl DecodedInstruction {
    pub fn get(&self, name: &str) -> Result<u32> {
        schema(self.kind)
            .iter()
            .position(|s| s.name == name)
            .map(|i| self.fields[i])
            .ok_or_else(|| Error::Malformed(format!("{:?} has no field {name}", self.kind)))
    }

    pub fn usize(&self, name: &str) -> Result<usize> {
        self.get(name).map(|v| v as usize)
    }
}

/// Splits an instruction stream into instructions.
pub fn decode_words(words: &[u32]) -> Result<Vec<DecodedInstruction>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let h = words[i];
        let kind = kind_of_opcode(h as u8)?;
        let n = (h >> 8 & 0xFF) as usize;
        if n != schema(kind).len() {
            return Err(Error::Malformed(format!("{kind:?} with {n} fields")));
        }
        let len = instruction_words(kind);
        if i + len > words.len() {
            return Err(Error::Malformed("truncated instruction".into()));
        }
        out.push(DecodedInstruction { kind, step: (h >> 16) as u8, fields: words[i + 1..i + 1 + n].to_vec() });
        i += len;
    }
    Ok(out)
}

/// Rows of the logits buffer holding the final token's output.
pub fn logits_row(p: &CompiledProgram, token: usize) -> Result<usize> {
    let last = p.instructions.last().ok_or_else(|| Error::Malformed("empty program".into()))?;
    match last.field("arg_row") {
        Some(e) => Ok(e.eval(token as i64)? as usize),
        None => Ok(0),
    }
}

/// Regions by tensor class, for inspection.
pub fn tensors_of(g: &OpGraph, class: TensorClass) -> Vec<TensorId> {
    (0..g.tensors.len()).filter(|&i| g.tensors[i].class == class).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy1() -> ModelConfig {
        let mut c = ModelConfig::toy();
        c.layers = 1;
        c
    }

    #[test]
    fn encode_decode_round_trip() {
        let p = compile(&ModelConfig::toy(), Phase::Decode, TokenBinding::Constant(5)).unwrap();
        let w = p.encode().unwrap();
        assert_eq!(w.len() % 4, 0);
        let d = decode_words(&w).unwrap();
        assert_eq!(d.len(), p.instructions.len());
        for (a, b) in d.iter().zip(&p.instructions) {
            assert_eq!(a.kind, b.kind);
            for (x, e) in a.fields.iter().zip(&b.fields) {
                assert_eq!(*x as i64, e.as_const().unwrap());
            }
        }
        assert!(decode_words(&w[..3]).is_err());
    }

    #[test]
    fn patch_equals_recompile_toy() {
        for phase in [Phase::Decode, Phase::Prefill] {
            let p = compile(&ModelConfig::toy(), phase, TokenBinding::Symbolic).unwrap();
            for t in 1..=p.max_token {
                let c = compile(&ModelConfig::toy(), phase, TokenBinding::Constant(t)).unwrap();
                assert_eq!(patch_for_token(&p, t).unwrap(), c.encode().unwrap(), "{phase:?} {t}");
            }
            assert!(patch_for_token(&p, 0).is_err());
            assert!(patch_for_token(&p, p.max_token + 1).is_err());
        }
    }

    #[test]
    fn decode_fields() {
        let p = compile(&toy1(), Phase::Decode, TokenBinding::Symbolic).unwrap();
        assert_eq!(p.instructions.len(), 19);
        for ins in &p.instructions {
            if let Some(r) = ins.field("rows") {
                assert_eq!(r.as_const(), Some(1));
            }
            if let Some(w) = ins.field("weight") {
                assert!(!w.depends_on_token());
            }
        }
        let s = &p.instructions[6];
        assert_eq!(s.kind, OpKind::Transpose);
        assert_eq!(s.field("kv_len"), Some(&SymExpr::Token));
    }

    #[test]
    fn decode_unchanged_by_last_token_pass() {
        let g = super::super::graph::build_block_graph(&ModelConfig::toy()).unwrap();
        let m = super::super::memory::allocate_memory(&g).unwrap();
        let p = lower(&g, &m, Phase::Decode, TokenBinding::Symbolic).unwrap();
        let q = last_token_optimize(&p).unwrap();
        assert_eq!(p.base_words(), q.base_words());
        assert_eq!(p.residuals, q.residuals);
    }

    #[test]
    fn last_token_shrinks_outlayer() {
        let g = super::super::graph::build_block_graph(&ModelConfig::toy()).unwrap();
        let m = super::super::memory::allocate_memory(&g).unwrap();
        let p = lower(&g, &m, Phase::Prefill, TokenBinding::Constant(64)).unwrap();
        let q = last_token_optimize(&p).unwrap();
        let rows = |p: &CompiledProgram| p.instructions.last().unwrap().field("rows").unwrap().as_const().unwrap();
        assert_eq!(rows(&p), 64);
        assert_eq!(rows(&q), 1);
        let n = q.instructions.len();
        // First reduced instruction reads the last row of full-height inputs.
        let first = &q.instructions[n - 8];
        assert_eq!(first.step, 12);
        assert_eq!(first.field("src_row").unwrap().as_const(), Some(63));
        assert_eq!(first.field("aux_row").unwrap().as_const(), Some(63));
        assert_eq!(q.instructions[n - 2].field("src_row").unwrap().as_const(), Some(0));
    }

    #[test]
    fn glm_program_shape() {
        let p = compile(&ModelConfig::glm6b(), Phase::Decode, TokenBinding::Symbolic).unwrap();
        assert_eq!(p.instructions.len(), 17 * 28 + 2);
        assert!(p.residual_fraction() < 0.3, "{}", p.residual_fraction());
        let q = compile(&ModelConfig::glm6b(), Phase::Prefill, TokenBinding::Symbolic).unwrap();
        assert_eq!(q.instructions.len(), p.instructions.len());
        assert!(q.residual_fraction() < 0.3, "{}", q.residual_fraction());
        for t in [1, 500, 1024] {
            assert_eq!(patch_for_token(&q, t).unwrap().len(), q.total_words());
        }
    }

    #[test]
    fn field_overflow_detected() {
        let mut p = compile(&ModelConfig::toy(), Phase::Prefill, TokenBinding::Symbolic).unwrap();
        p.instructions[1].set("rows", SymExpr::token() * SymExpr::c(1 << 18));
        let r = p.finalize();
        assert!(matches!(r, Err(Error::FieldOverflow { instruction: 1, field: "rows", value: 16_777_216 })), "{r:?}");
        p.instructions[1].set("rows", SymExpr::token() - SymExpr::c(2));
        assert!(matches!(p.finalize(), Err(Error::FieldOverflow { value: -1, .. })));
    }
}
