//! Binary containers for packed weights (`ELWP`) and compiled programs
//! (`ELPG`).
//!
//! Both start with a 4-byte magic, a little-endian `u32` version and a
//! length-prefixed JSON header, followed by raw sections:
//!
//! * `ELWP`: for every layer, the 32 HBM port streams in port order (each
//!   the concatenated groups of channels `port, port + 32, ...`), then
//!   every norm vector as little-endian FP16.
//! * `ELPG`: per program, the instruction words (`u32` LE) and the residual
//!   table, each entry `instr, field, word, rpn_len` (`u32` LE) followed by
//!   `rpn_len` bytes of reverse-Polish expression.

use std::io::Write;

use edgellm_core::compiler::expr::{RpnOp, SymExpr};
use edgellm_core::compiler::graph::TensorId;
use edgellm_core::compiler::memory::MemoryMap;
use edgellm_core::compiler::program::{decode_words, instruction_words, Residual};
use edgellm_core::compiler::{CompiledProgram, Instruction};
use edgellm_core::config::ModelConfig;
use edgellm_core::fp16::Fp16Bits;
use edgellm_core::model::{ModelWeights, NormVector};
use edgellm_core::perf::Phase;
use edgellm_core::sparse::{LayerSpec, PackedGroup, PackedLayer, WeightPackage, HBM_PORTS};
use serde::{Deserialize, Serialize};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"ELWP";
pub const PROGRAM_MAGIC: [u8; 4] = *b"ELPG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    Magic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("file truncated in {0}")]
    Truncated(&'static str),
    #[error("{0}")]
    Core(#[from] edgellm_core::Error),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, FormatError>;

struct Cursor<'a> {
    b: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.b.len() < n {
            return Err(FormatError::Truncated(what));
        }
        let (h, t) = self.b.split_at(n);
        self.b = t;
        Ok(h)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn write_preamble(out: &mut Vec<u8>, magic: [u8; 4], header: &impl Serialize) -> Result<()> {
    let h = serde_json::to_vec(header)?;
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&h);
    Ok(())
}

fn read_preamble<'a, H: Deserialize<'a>>(bytes: &'a [u8], magic: [u8; 4]) -> Result<(H, Cursor<'a>)> {
    let mut c = Cursor { b: bytes };
    let found: [u8; 4] = c.take(4, "magic")?.try_into().unwrap();
    if found != magic {
        return Err(FormatError::Magic { expected: magic, found });
    }
    let v = c.u32("version")?;
    if v != FORMAT_VERSION {
        return Err(FormatError::Version(v));
    }
    let n = c.u32("header length")? as usize;
    let h = serde_json::from_slice(c.take(n, "header")?)?;
    Ok((h, c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub spec: LayerSpec,
    /// Byte length of each port stream.
    pub port_bytes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub model: ModelConfig,
    /// Seed of synthetic weights, if that is their source.
    pub seed: Option<u64>,
    pub layers: Vec<LayerEntry>,
    pub norms: Vec<NormEntry>,
}

fn port_bytes(spec: &LayerSpec) -> Vec<usize> {
    let per_ch = spec.portions() * spec.format.total_bytes();
    (0..HBM_PORTS).map(|p| spec.ch_out.saturating_sub(p).div_ceil(HBM_PORTS) * per_ch).collect()
}

pub fn encode_weights(cfg: &ModelConfig, seed: Option<u64>, w: &ModelWeights) -> Result<Vec<u8>> {
    let header = WeightsHeader {
        model: cfg.clone(),
        seed,
        layers: w
            .package
            .layers
            .iter()
            .map(|l| LayerEntry { spec: l.spec.clone(), port_bytes: port_bytes(&l.spec) })
            .collect(),
        norms: w.norms.iter().map(|n| NormEntry { name: n.name.clone(), len: n.values.len() }).collect(),
    };
    let mut out = Vec::new();
    write_preamble(&mut out, WEIGHTS_MAGIC, &header)?;
    for l in &w.package.layers {
        let gb = l.spec.format.total_bytes();
        if l.groups.len() != l.spec.ch_out * l.spec.portions() || l.groups.iter().any(|g| g.bytes.len() != gb) {
            return Err(FormatError::Invalid(format!("layer {} has malformed groups", l.spec.name)));
        }
        for p in 0..HBM_PORTS {
            out.extend_from_slice(&l.port_stream(p));
        }
    }
    for n in &w.norms {
        for v in &n.values {
            out.extend_from_slice(&v.0.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<(WeightsHeader, ModelWeights)> {
    let (h, mut c): (WeightsHeader, _) = read_preamble(bytes, WEIGHTS_MAGIC)?;
    let mut layers = Vec::with_capacity(h.layers.len());
    for e in &h.layers {
        let spec = &e.spec;
        if e.port_bytes != port_bytes(spec) {
            return Err(FormatError::Invalid(format!("layer {} has an inconsistent port map", spec.name)));
        }
        let gb = spec.format.total_bytes();
        let portions = spec.portions();
        let mut groups = vec![None; spec.ch_out * portions];
        for (p, &n) in e.port_bytes.iter().enumerate() {
            let raw = c.take(n, "port streams")?;
            for (k, b) in raw.chunks_exact(gb).enumerate() {
                let ch = p + (k / portions) * HBM_PORTS;
                groups[ch * portions + k % portions] = Some(PackedGroup { format: spec.format, bytes: b.to_vec() });
            }
        }
        let groups = groups.into_iter().map(|g| g.expect("every group lies on one port")).collect();
        layers.push(PackedLayer { spec: spec.clone(), groups });
    }
    let mut norms = Vec::with_capacity(h.norms.len());
    for e in &h.norms {
        let raw = c.take(e.len * 2, "norm vectors")?;
        let values = raw.chunks_exact(2).map(|b| Fp16Bits(u16::from_le_bytes([b[0], b[1]]))).collect();
        norms.push(NormVector { name: e.name.clone(), values });
    }
    if !c.b.is_empty() {
        return Err(FormatError::Invalid(format!("{} trailing bytes", c.b.len())));
    }
    Ok((h, ModelWeights { package: WeightPackage { layers }, norms }))
}

/// Checks that a weight file holds every matrix and gain `cfg` needs.
pub fn check_weights(cfg: &ModelConfig, h: &WeightsHeader) -> Result<()> {
    let want = cfg.all_layers();
    let have: Vec<&LayerSpec> = h.layers.iter().map(|e| &e.spec).collect();
    if have.len() != want.len() || have.iter().zip(&want).any(|(a, b)| *a != b) {
        let bad = want.iter().find(|s| !have.contains(s)).map(|s| s.name.clone()).unwrap_or_default();
        return Err(FormatError::Invalid(format!("weights do not match the model (first mismatch: {bad:?})")));
    }
    for n in edgellm_core::model::norm_names(cfg) {
        if !h.norms.iter().any(|e| e.name == n && e.len == cfg.hidden) {
            return Err(FormatError::Invalid(format!("weights lack norm vector {n}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProgramEntry {
    phase: Phase,
    last_token: bool,
    instructions: usize,
    words: usize,
    residuals: usize,
    /// Input and output tensors of every instruction.
    io: Vec<(Vec<TensorId>, TensorId)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProgramHeader {
    model: ModelConfig,
    max_token: usize,
    memory: MemoryMap,
    programs: Vec<ProgramEntry>,
}

/// Programs sharing one model and memory map, typically one per phase.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgramBundle {
    pub programs: Vec<CompiledProgram>,
}

impl ProgramBundle {
    pub fn new(programs: Vec<CompiledProgram>) -> Result<Self> {
        let first = programs.first().ok_or_else(|| FormatError::Invalid("no programs".into()))?;
        if programs.iter().any(|p| p.memory != first.memory || p.cfg != first.cfg) {
            return Err(FormatError::Invalid("programs disagree on model or memory map".into()));
        }
        Ok(Self { programs })
    }

    pub fn get(&self, phase: Phase) -> Option<&CompiledProgram> {
        self.programs.iter().find(|p| p.phase == phase)
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.programs[0].cfg
    }
}

pub fn encode_program(b: &ProgramBundle) -> Result<Vec<u8>> {
    let p0 = &b.programs[0];
    let header = ProgramHeader {
        model: p0.cfg.clone(),
        max_token: p0.max_token,
        memory: p0.memory.clone(),
        programs: b
            .programs
            .iter()
            .map(|p| ProgramEntry {
                phase: p.phase,
                last_token: p.last_token,
                instructions: p.instructions.len(),
                words: p.total_words(),
                residuals: p.residuals.len(),
                io: p.instructions.iter().map(|i| (i.inputs.clone(), i.output)).collect(),
            })
            .collect(),
    };
    let mut out = Vec::new();
    write_preamble(&mut out, PROGRAM_MAGIC, &header)?;
    for p in &b.programs {
        for w in p.base_words() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for r in &p.residuals {
            let mut rpn = Vec::new();
            RpnOp::encode(&r.rpn, &mut rpn);
            for v in [r.instr as u32, r.field as u32, r.word as u32, rpn.len() as u32] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&rpn);
        }
    }
    Ok(out)
}

pub fn decode_program(bytes: &[u8]) -> Result<ProgramBundle> {
    let (h, mut c): (ProgramHeader, _) = read_preamble(bytes, PROGRAM_MAGIC)?;
    let mut programs = Vec::new();
    for e in &h.programs {
        let raw = c.take(e.words * 4, "instruction words")?;
        let words: Vec<u32> = raw.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
        let decoded = decode_words(&words)?;
        if decoded.len() != e.instructions || e.io.len() != e.instructions {
            return Err(FormatError::Invalid("instruction count disagrees with header".into()));
        }
        let mut instructions: Vec<Instruction> = decoded
            .iter()
            .zip(&e.io)
            .map(|(d, (inputs, output))| Instruction {
                kind: d.kind,
                step: d.step,
                fields: d.fields.iter().map(|&v| SymExpr::Const(v as i64)).collect(),
                inputs: inputs.clone(),
                output: *output,
            })
            .collect();
        let mut starts = Vec::with_capacity(instructions.len());
        let mut at = 0;
        for i in &instructions {
            starts.push(at);
            at += instruction_words(i.kind);
        }
        let mut residuals = Vec::with_capacity(e.residuals);
        for _ in 0..e.residuals {
            let instr = c.u32("residual table")? as usize;
            let field = c.u32("residual table")? as usize;
            let word = c.u32("residual table")? as usize;
            let n = c.u32("residual table")? as usize;
            let rpn = RpnOp::decode(c.take(n, "residual expression")?)?;
            let ins = instructions
                .get_mut(instr)
                .filter(|i| field < i.fields.len())
                .ok_or_else(|| FormatError::Invalid(format!("residual for missing field {instr}.{field}")))?;
            if word != starts[instr] + 1 + field {
                return Err(FormatError::Invalid(format!("residual word {word} does not match its field")));
            }
            ins.fields[field] = SymExpr::from_rpn(&rpn)?;
            residuals.push(Residual { instr, field, word, rpn });
        }
        programs.push(CompiledProgram {
            cfg: h.model.clone(),
            phase: e.phase,
            max_token: h.max_token,
            memory: h.memory.clone(),
            instructions,
            residuals,
            last_token: e.last_token,
        });
    }
    if !c.b.is_empty() {
        return Err(FormatError::Invalid(format!("{} trailing bytes", c.b.len())));
    }
    ProgramBundle::new(programs)
}

pub fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}
