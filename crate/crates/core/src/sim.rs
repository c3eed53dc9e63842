//! Instruction-level execution of compiled programs over modeled HBM and
//! DDR.
//!
//! The host writes weights, norm gains and instruction words into memory,
//! then launches the accelerator through a small register file. Each
//! instruction is fetched from DDR, decoded, executed with the operator
//! library and timestamped with the performance model.
//!
//! Register map (64 × 32-bit):
//!
//! | index | name        | meaning                                   |
//! |-------|-------------|-------------------------------------------|
//! | 0     | INSTR_BASE  | instruction stream address in DDR, beats  |
//! | 1     | VALID_OPS   | instructions to execute                   |
//! | 2     | TOKEN       | token count of this launch                |
//! | 3     | PHASE       | 0 decode, 1 prefill                       |
//! | 4     | CONTROL     | bit 0 starts execution                    |
//! | 5     | STATUS      | bit 0 done, bit 1 fault (read only)       |
//! | 6     | ARGMAX      | index picked by the final instruction     |
//! | 7..63 | reserved    | read as zero                              |

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::arith::PeConfig;
use crate::compiler::memory::{MemoryMap, Region, RegionKind, Space, BEAT_BYTES, DDR_BYTES, HBM_BYTES, PORT_WINDOW};
use crate::compiler::program::{
    apply_residuals, decode_words, format_of_code, rotary_of_code, CompiledProgram, DecodedInstruction,
};
use crate::compiler::graph::EpilogueKind;
use crate::config::{ModelConfig, NormKind};
use crate::error::{Error, Result};
use crate::fp16::Fp16Bits;
use crate::layout::{SlabLayout, UnifiedTensor};
use crate::model::ModelWeights;
use crate::ops::{
    argmax, attention_context, attention_scores, norm, rotary_embed, silu, softmax_scores, vmm_bn, AttnShape,
    DecodedLayer, Epilogue, OpKind, BLOCK_STEPS, OUTLAYER_STEPS,
};
use crate::perf::{stream_work, vmm_work, Calibration, HwConfig, MemoryKind, Overheads, Phase, StepWork};
use crate::sparse::{decode_slots, LayerSpec, PackedGroup, HBM_PORTS};

pub const REG_COUNT: usize = 64;
pub const REG_INSTR_BASE: usize = 0;
pub const REG_VALID_OPS: usize = 1;
pub const REG_TOKEN: usize = 2;
pub const REG_PHASE: usize = 3;
pub const REG_CONTROL: usize = 4;
pub const REG_STATUS: usize = 5;
pub const REG_ARGMAX: usize = 6;

pub const STATUS_DONE: u32 = 1;
pub const STATUS_FAULT: u32 = 2;

const PAGE: u64 = 1 << 16;

/// Sparse byte-addressable memory; untouched bytes read as zero.
#[derive(Debug, Clone, Default)]
pub struct PagedMemory {
    capacity: u64,
    pages: BTreeMap<u64, Box<[u8]>>,
}

impl PagedMemory {
    pub fn new(capacity: u64) -> Self {
        Self { capacity, pages: BTreeMap::new() }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    /// Bytes backed by allocated pages.
    pub fn resident_bytes(&self) -> u64 {
        self.pages.len() as u64 * PAGE
    }

    fn bounds(&self, addr: u64, len: usize) -> Result<()> {
        match addr.checked_add(len as u64) {
            Some(end) if end <= self.capacity => Ok(()),
            _ => Err(Error::MemoryFault(format!("{len} bytes at {addr:#x} beyond {:#x}", self.capacity))),
        }
    }

    pub fn read(&self, addr: u64, buf: &mut [u8]) -> Result<()> {
        self.bounds(addr, buf.len())?;
        let mut done = 0;
        while done < buf.len() {
            let a = addr + done as u64;
            let (page, off) = (a / PAGE, (a % PAGE) as usize);
            let n = (PAGE as usize - off).min(buf.len() - done);
            match self.pages.get(&page) {
                Some(p) => buf[done..done + n].copy_from_slice(&p[off..off + n]),
                None => buf[done..done + n].fill(0),
            }
            done += n;
        }
        Ok(())
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) -> Result<()> {
        self.bounds(addr, data.len())?;
        let mut done = 0;
        while done < data.len() {
            let a = addr + done as u64;
            let (page, off) = (a / PAGE, (a % PAGE) as usize);
            let n = (PAGE as usize - off).min(data.len() - done);
            let p = self.pages.entry(page).or_insert_with(|| vec![0u8; PAGE as usize].into_boxed_slice());
            p[off..off + n].copy_from_slice(&data[done..done + n]);
            done += n;
        }
        Ok(())
    }

    pub fn read_fp16(&self, addr: u64, n: usize) -> Result<Vec<Fp16Bits>> {
        let mut b = vec![0u8; n * 2];
        self.read(addr, &mut b)?;
        Ok(b.chunks_exact(2).map(|c| Fp16Bits(u16::from_le_bytes([c[0], c[1]]))).collect())
    }

    pub fn write_fp16(&mut self, addr: u64, v: &[Fp16Bits]) -> Result<()> {
        let b: Vec<u8> = v.iter().flat_map(|x| x.0.to_le_bytes()).collect();
        self.write(addr, &b)
    }

    pub fn read_words(&self, addr: u64, n: usize) -> Result<Vec<u32>> {
        let mut b = vec![0u8; n * 4];
        self.read(addr, &mut b)?;
        Ok(b.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    pub fn write_words(&mut self, addr: u64, w: &[u32]) -> Result<()> {
        let b: Vec<u8> = w.iter().flat_map(|x| x.to_le_bytes()).collect();
        self.write(addr, &b)
    }
}

/// One executed instruction.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Event {
    pub index: usize,
    pub step: u8,
    pub layer: u16,
    pub name: String,
    pub start_ns: f64,
    pub end_ns: f64,
    pub bytes_hbm: f64,
    pub bytes_ddr: f64,
}

impl Event {
    pub fn duration_ns(&self) -> f64 {
        self.end_ns - self.start_ns
    }
}

/// Result of one launch.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// Logits of the final token.
    pub logits: Vec<Fp16Bits>,
    pub token: usize,
    pub events: Vec<Event>,
    pub start_ns: f64,
    pub end_ns: f64,
}

impl RunOutput {
    pub fn duration_ns(&self) -> f64 {
        self.end_ns - self.start_ns
    }
}

/// Table name of a step number (1-based, outlayer steps 18 and 19).
pub fn step_name(step: u8) -> &'static str {
    match step as usize {
        s @ 1..=17 => BLOCK_STEPS[s - 1],
        s @ 18..=19 => OUTLAYER_STEPS[s - 18],
        _ => "unknown",
    }
}

#[derive(Debug, Clone)]
struct LoadedProgram {
    program: CompiledProgram,
    base: u64,
    words: usize,
}

/// Accelerator state: memories, registers, loaded programs and clock.
#[derive(Debug, Clone)]
pub struct ExecState {
    pub cfg: ModelConfig,
    pub hw: HwConfig,
    pub pe: PeConfig,
    pub calibration: Calibration,
    pub memory: MemoryKind,
    pub hbm: PagedMemory,
    pub ddr: PagedMemory,
    regs: [u32; REG_COUNT],
    map: Option<MemoryMap>,
    programs: Vec<LoadedProgram>,
    instr_end: u64,
    weights: BTreeMap<u64, DecodedLayer>,
    clock_ns: f64,
    /// Instruction being executed; selects among regions sharing bytes.
    current: usize,
}

impl ExecState {
    pub fn new(cfg: &ModelConfig, hw: HwConfig, calibration: Calibration) -> Result<Self> {
        cfg.validate()?;
        hw.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            hbm: PagedMemory::new(hw.hbm_bytes.min(HBM_BYTES)),
            ddr: PagedMemory::new(hw.ddr_bytes.min(DDR_BYTES)),
            hw,
            pe: PeConfig::default(),
            calibration,
            memory: MemoryKind::Hbm,
            regs: [0; REG_COUNT],
            map: None,
            programs: Vec::new(),
            instr_end: 0,
            weights: BTreeMap::new(),
            clock_ns: 0.0,
            current: 0,
        })
    }

    pub fn clock_ns(&self) -> f64 {
        self.clock_ns
    }

    pub fn memory_map(&self) -> Option<&MemoryMap> {
        self.map.as_ref()
    }

    pub fn register(&self, i: usize) -> Result<u32> {
        self.regs.get(i).copied().ok_or_else(|| Error::Register(format!("register {i} outside 0..{REG_COUNT}")))
    }

    /// Host register writes, applied in order.
    pub fn write_registers(&mut self, writes: &[(usize, u32)]) -> Result<()> {
        for &(i, v) in writes {
            if i >= REG_COUNT {
                return Err(Error::Register(format!("register {i} outside 0..{REG_COUNT}")));
            }
            match i {
                REG_STATUS | REG_ARGMAX => return Err(Error::Register(format!("register {i} is read only"))),
                REG_INSTR_BASE if v as u64 * BEAT_BYTES >= self.ddr.capacity() => {
                    return Err(Error::Register(format!("instruction base {v:#x} outside DDR")))
                }
                REG_PHASE if v > 1 => return Err(Error::Register(format!("phase {v}"))),
                _ => self.regs[i] = v,
            }
        }
        Ok(())
    }

    /// Places a program's words after all data in DDR. Programs loaded
    /// into one state must share a memory map.
    pub fn load_program(&mut self, p: &CompiledProgram) -> Result<()> {
        if p.cfg != self.cfg {
            return Err(Error::InvalidConfig("program compiled for another model".into()));
        }
        match &self.map {
            Some(m) if *m != p.memory => return Err(Error::InvalidConfig("programs disagree on the memory map".into())),
            None => {
                self.instr_end = p.memory.ddr_used.div_ceil(BEAT_BYTES) * BEAT_BYTES;
                self.map = Some(p.memory.clone());
            }
            _ => {}
        }
        self.programs.retain(|l| l.program.phase != p.phase);
        let words = p.base_words();
        let base = self.instr_end;
        self.ddr.write_words(base, &words)?;
        self.instr_end = (base + words.len() as u64 * 4).div_ceil(BEAT_BYTES) * BEAT_BYTES;
        self.programs.push(LoadedProgram { program: p.clone(), base, words: words.len() });
        Ok(())
    }

    /// Instruction words of the loaded program for `phase` as stored.
    pub fn dump_program(&self, phase: Phase) -> Result<Vec<u32>> {
        let l = self.loaded(phase)?;
        self.ddr.read_words(l.base, l.words)
    }

    fn loaded(&self, phase: Phase) -> Result<&LoadedProgram> {
        self.programs
            .iter()
            .find(|l| l.program.phase == phase)
            .ok_or_else(|| Error::InvalidConfig(format!("no {} program loaded", phase.name())))
    }

    fn map(&self) -> Result<&MemoryMap> {
        self.map.as_ref().ok_or_else(|| Error::InvalidConfig("no program loaded".into()))
    }

    /// Writes packed matrices into their HBM stripes and norm gains into
    /// DDR.
    pub fn load_weights(&mut self, w: &ModelWeights) -> Result<()> {
        let map = self.map()?.clone();
        for r in &map.regions {
            match r.kind {
                RegionKind::Weight => {
                    let l = w.layer(&r.name)?;
                    for port in 0..HBM_PORTS {
                        let s = l.port_stream(port);
                        if s.len() as u64 > r.bytes {
                            return Err(Error::CapacityExceeded(format!("layer {} exceeds its region", r.name)));
                        }
                        self.hbm.write(port as u64 * PORT_WINDOW + r.addr, &s)?;
                    }
                }
                RegionKind::Gamma => {
                    let v = w.norm(&r.name)?;
                    if v.len() != r.ch {
                        return Err(Error::ShapeMismatch(format!("norm {} has {} values", r.name, v.len())));
                    }
                    self.ddr.write_fp16(r.addr, v)?;
                }
                _ => {}
            }
        }
        self.weights.clear();
        Ok(())
    }

    fn region_at(&self, space: Space, beat: u32) -> Result<&Region> {
        let addr = beat as u64 * BEAT_BYTES;
        self.map()?
            .regions
            .iter()
            .find(|r| r.addr == addr && same_space(r.space, space) && r.live.0 <= self.current && self.current <= r.live.1)
            .ok_or_else(|| Error::MemoryFault(format!("no {space:?} region at {addr:#x}")))
    }

    fn mem(&self, space: Space) -> &PagedMemory {
        if space == Space::Ddr {
            &self.ddr
        } else {
            &self.hbm
        }
    }

    /// Reads rows `row0..row0 + rows` of `ch` channels from a token-form
    /// region.
    fn read_tensor(&self, space: Space, beat: u32, ch: usize, row0: usize, rows: usize) -> Result<UnifiedTensor> {
        let r = self.region_at(space, beat)?;
        let map = self.map()?;
        let lay = map.layout(r);
        check_extent(r, &lay, ch, row0 + rows)?;
        let slabs = ch.div_ceil(lay.t_out);
        let mut data = Vec::with_capacity(r.outer * slabs * rows * lay.t_out);
        let mem = self.mem(space);
        for o in 0..r.outer {
            for s in 0..slabs {
                let a = lay.address(o, s * lay.t_out, row0) as u64 * 2;
                data.extend(mem.read_fp16(a, rows * lay.t_out)?);
            }
        }
        let mut t = UnifiedTensor::from_raw(r.outer, ch, 1, rows, lay.t_out, data)?;
        for o in 0..r.outer {
            for c in ch..slabs * lay.t_out {
                for x in 0..rows {
                    t.set(o, c, 0, x, Fp16Bits::ZERO);
                }
            }
        }
        Ok(t)
    }

    fn write_tensor(&mut self, space: Space, beat: u32, t: &UnifiedTensor, row0: usize) -> Result<()> {
        let r = self.region_at(space, beat)?.clone();
        let lay = self.map()?.layout(&r);
        if t.outer() != r.outer || t.t_out() != lay.t_out {
            return Err(Error::ShapeMismatch(format!(
                "tensor [{}, t_out {}] does not match region {} [{}, t_out {}]",
                t.outer(),
                t.t_out(),
                r.name,
                r.outer,
                lay.t_out
            )));
        }
        check_extent(&r, &lay, t.channels(), row0 + t.tokens())?;
        let mem = if space == Space::Ddr { &mut self.ddr } else { &mut self.hbm };
        for o in 0..t.outer() {
            for s in 0..t.slabs() {
                mem.write_fp16(lay.address(o, s * lay.t_out, row0) as u64 * 2, t.slab(o, s))?;
            }
        }
        Ok(())
    }

    fn gamma(&self, beat: u32, ch: usize) -> Result<Vec<Fp16Bits>> {
        let r = self.region_at(Space::Ddr, beat)?;
        if r.kind != RegionKind::Gamma || r.ch != ch {
            return Err(Error::MemoryFault(format!("{} is not a {ch}-channel gain", r.name)));
        }
        self.ddr.read_fp16(r.addr, ch)
    }

    /// Decodes a weight matrix from its HBM stripe.
    fn weight(&mut self, beat: u32, ch_in: usize, ch_out: usize, code: u32) -> Result<&DecodedLayer> {
        let key = beat as u64;
        if !self.weights.contains_key(&key) {
            let r = self.region_at(Space::HbmStriped, beat)?;
            let format = format_of_code(code)?;
            let spec = LayerSpec::new(r.name.clone(), ch_in, ch_out, format);
            let gb = format.total_bytes();
            if (ch_out.div_ceil(HBM_PORTS) * spec.portions() * gb) as u64 > r.bytes || r.ch != ch_out {
                return Err(Error::MemoryFault(format!("weight read beyond region {}", r.name)));
            }
            let mut groups = Vec::with_capacity(ch_out * spec.portions());
            for c in 0..ch_out {
                let base = (c % HBM_PORTS) as u64 * PORT_WINDOW + r.addr + ((c / HBM_PORTS) * spec.portions() * gb) as u64;
                for p in 0..spec.portions() {
                    let mut bytes = vec![0u8; gb];
                    self.hbm.read(base + (p * gb) as u64, &mut bytes)?;
                    groups.push(decode_slots(&PackedGroup { format, bytes })?);
                }
            }
            self.weights.insert(key, DecodedLayer { spec, groups });
        }
        Ok(&self.weights[&key])
    }

    fn read_cache(&self, beat: u32, ch: usize, kv_len: usize) -> Result<UnifiedTensor> {
        let r = self.region_at(Space::Hbm, beat)?;
        if r.kind != RegionKind::KvCache {
            return Err(Error::MemoryFault(format!("{} is not a cache", r.name)));
        }
        self.read_tensor(Space::Hbm, beat, ch, 0, kv_len)
    }

    /// Keys gathered through the segmented transpose: each slab tile is
    /// read once, in order, and yields a block of Kᵀ rows.
    fn gather_keys(&self, beat: u32, ch: usize, kv_len: usize) -> Result<UnifiedTensor> {
        let r = self.region_at(Space::Hbm, beat)?;
        if r.kind != RegionKind::KvCache {
            return Err(Error::MemoryFault(format!("{} is not a cache", r.name)));
        }
        let lay = self.map()?.layout(r);
        check_extent(r, &lay, ch, kv_len)?;
        let local = SlabLayout { base: 0, ..lay };
        let view = local.segmented_transpose_view(0, kv_len);
        let mut mem = vec![Fp16Bits::ZERO; local.footprint()];
        for seg in &view.segments {
            let v = self.hbm.read_fp16(r.addr + seg.start as u64 * 2, seg.len)?;
            mem[seg.start..seg.start + seg.len].copy_from_slice(&v);
        }
        let kt = view.gather(&mem);
        let mut k = UnifiedTensor::zeros_tokens(kv_len, ch, lay.t_out)?;
        for c in 0..ch {
            for j in 0..kv_len {
                k.set(0, c, 0, j, kt[c * kv_len + j]);
            }
        }
        Ok(k)
    }

    /// Writes the host-side input rows.
    fn write_input(&mut self, inputs: &[Fp16Bits], rows: usize) -> Result<()> {
        let h = self.cfg.hidden;
        if inputs.len() != rows * h {
            return Err(Error::ShapeMismatch(format!("{} input values for {rows} rows of {h}", inputs.len())));
        }
        let r = self.map()?.regions.iter().find(|r| r.kind == RegionKind::Input).cloned();
        let r = r.ok_or_else(|| Error::Malformed("program has no input region".into()))?;
        let t = crate::layout::to_unified(inputs, rows, h, self.cfg.t_out)?;
        self.current = 0;
        self.write_tensor(Space::Ddr, r.beat() as u32, &t, 0)
    }

    /// Host side of one inference: patch the token-dependent words, write
    /// inputs and registers, then launch. `inputs` holds the new rows: all
    /// `token` rows for prefill, one row for decode.
    pub fn run(&mut self, token: usize, phase: Phase, inputs: &[Fp16Bits]) -> Result<RunOutput> {
        let l = self.loaded(phase)?.clone();
        let p = &l.program;
        if token == 0 || token > p.max_token {
            return Err(Error::TokenOutOfRange { token: token as u32, max_token: p.max_token as u32 });
        }
        let mut words = self.ddr.read_words(l.base, l.words)?;
        apply_residuals(&mut words, &p.residuals, token)?;
        for r in &p.residuals {
            self.ddr.write_words(l.base + r.word as u64 * 4, &words[r.word..r.word + 1])?;
        }
        let rows = match phase {
            Phase::Decode => 1,
            Phase::Prefill => token,
        };
        self.write_input(inputs, rows)?;
        self.write_registers(&[
            (REG_INSTR_BASE, (l.base / BEAT_BYTES) as u32),
            (REG_VALID_OPS, p.instructions.len() as u32),
            (REG_TOKEN, token as u32),
            (REG_PHASE, matches!(phase, Phase::Prefill) as u32),
            (REG_CONTROL, 1),
        ])?;
        let events = match self.execute() {
            Ok(e) => e,
            Err(e) => {
                self.regs[REG_STATUS] = STATUS_FAULT;
                return Err(e);
            }
        };
        let last = decode_words(&words)?.pop().ok_or_else(|| Error::Malformed("empty program".into()))?;
        let row = last.usize("arg_row")?;
        self.current = p.instructions.len() - 1;
        let logits = self.read_tensor(Space::Ddr, last.get("dst")?, self.cfg.vocab, row, 1)?.token_row(0, 0);
        let start_ns = events.first().map(|e| e.start_ns).unwrap_or(self.clock_ns);
        Ok(RunOutput { logits, token: self.regs[REG_ARGMAX] as usize, events, start_ns, end_ns: self.clock_ns })
    }

    /// Accelerator side: fetch `VALID_OPS` instructions from `INSTR_BASE`
    /// and execute them in order.
    fn execute(&mut self) -> Result<Vec<Event>> {
        if self.regs[REG_CONTROL] & 1 == 0 {
            return Err(Error::Register("execution not started".into()));
        }
        self.regs[REG_STATUS] = 0;
        let base = self.regs[REG_INSTR_BASE] as u64 * BEAT_BYTES;
        let count = self.regs[REG_VALID_OPS] as usize;
        let phase = if self.regs[REG_PHASE] == 1 { Phase::Prefill } else { Phase::Decode };
        let overheads = self.calibration.get(phase, self.memory).clone();
        let mut events = Vec::with_capacity(count);
        let mut addr = base;
        for index in 0..count {
            if addr >= self.instr_end {
                return Err(Error::MemoryFault(format!("instruction fetch at {addr:#x} past the program")));
            }
            let head = self.ddr.read_words(addr, 1)?[0];
            let kind = crate::compiler::program::kind_of_opcode(head as u8)?;
            let n = crate::compiler::program::instruction_words(kind);
            let ins = decode_words(&self.ddr.read_words(addr, n)?)?.pop().unwrap();
            addr += n as u64 * 4;
            self.current = index;
            let work = self.step(&ins)?;
            let us = (work.model_time_us(self.memory, &self.hw) + step_overhead(&overheads, ins.step)).max(0.0);
            let (bytes_hbm, bytes_ddr) = work.bytes(self.memory);
            let start_ns = self.clock_ns;
            self.clock_ns += us * 1e3;
            events.push(Event {
                index,
                step: ins.step,
                layer: ins.get("layer")? as u16,
                name: step_name(ins.step).into(),
                start_ns,
                end_ns: self.clock_ns,
                bytes_hbm,
                bytes_ddr,
            });
        }
        self.regs[REG_CONTROL] = 0;
        self.regs[REG_STATUS] = STATUS_DONE;
        Ok(events)
    }

    fn attn_shape(&self, d: &DecodedInstruction) -> Result<AttnShape> {
        Ok(AttnShape {
            heads: d.usize("heads")?,
            kv_heads: d.usize("kv_heads").unwrap_or(self.cfg.kv_heads),
            head_dim: d.usize("head_dim").unwrap_or(self.cfg.head_dim),
            kv_len: d.usize("kv_len")?,
            q_pos0: d.usize("q_pos0")?,
        })
    }

    /// Executes one instruction and returns its work for timing.
    fn step(&mut self, d: &DecodedInstruction) -> Result<StepWork> {
        let c = self.cfg.clone();
        let rows = d.usize("rows")?;
        match d.kind {
            OpKind::LayerNorm | OpKind::RmsNorm | OpKind::OutlayerLn => {
                let ch = d.usize("ch")?;
                let x = self.read_tensor(Space::Ddr, d.get("src")?, ch, d.usize("src_row")?, rows)?;
                let g = self.gamma(d.get("gamma")?, ch)?;
                let kind = match d.kind {
                    OpKind::LayerNorm => NormKind::Layer,
                    OpKind::RmsNorm => NormKind::Rms,
                    _ => c.norm,
                };
                let y = norm(kind, &x, &g, c.norm_eps)?;
                self.write_tensor(Space::Ddr, d.get("dst")?, &y, 0)?;
                Ok(stream_work(rows * ch))
            }
            OpKind::VmmBn | OpKind::VmmArgmax => {
                let (ch_in, ch_out) = (d.usize("ch_in")?, d.usize("ch_out")?);
                let code = d.get("format")?;
                let epi = EpilogueKind::from_code(d.get("epilogue")?)?;
                let x = self.read_tensor(Space::Ddr, d.get("src")?, ch_in, d.usize("src_row")?, rows)?;
                let aux = match epi {
                    EpilogueKind::None => None,
                    _ => Some(self.read_tensor(Space::Ddr, d.get("aux")?, ch_out, d.usize("aux_row")?, rows)?),
                };
                let pe = self.pe;
                let w = self.weight(d.get("weight")?, ch_in, ch_out, code)?;
                let e = match (&epi, &aux) {
                    (EpilogueKind::Residual, Some(a)) => Epilogue::Residual(a),
                    (EpilogueKind::Multiply, Some(a)) => Epilogue::Multiply(a),
                    _ => Epilogue::None,
                };
                let y = vmm_bn(&pe, &x, w, e)?;
                if d.kind == OpKind::VmmArgmax {
                    let row = d.usize("arg_row")?;
                    if row >= rows {
                        return Err(Error::MemoryFault(format!("argmax row {row} of {rows}")));
                    }
                    self.regs[REG_ARGMAX] = argmax(&y, row) as u32;
                }
                self.write_tensor(Space::Ddr, d.get("dst")?, &y, 0)?;
                Ok(vmm_work(rows, ch_in, ch_out, format_of_code(code)?, epi != EpilogueKind::None))
            }
            OpKind::RotaryEmb => {
                let ch = d.usize("ch")?;
                let x = self.read_tensor(Space::Ddr, d.get("src")?, ch, 0, rows)?;
                let style = rotary_of_code(d.get("style")?)?;
                let y = rotary_embed(&x, d.usize("pos0")?, d.usize("head_dim")?, style, c.rope_theta)?;
                self.write_tensor(Space::Ddr, d.get("dst")?, &y, 0)?;
                Ok(stream_work(rows * ch))
            }
            OpKind::KvWriteHbm => {
                let ch = d.usize("ch")?;
                let x = self.read_tensor(Space::Ddr, d.get("src")?, ch, 0, rows)?;
                let dst = d.get("dst")?;
                if self.region_at(Space::Hbm, dst)?.kind != RegionKind::KvCache {
                    return Err(Error::MemoryFault("cache write outside a cache region".into()));
                }
                self.write_tensor(Space::Hbm, dst, &x, d.usize("kv_row")?)?;
                let b = 2.0 * (rows * ch) as f64;
                Ok(StepWork { act_bytes: b, kv_write_bytes: b, ..StepWork::default() })
            }
            OpKind::Transpose => {
                let s = self.attn_shape(d)?;
                let q = self.read_tensor(Space::Ddr, d.get("src")?, s.heads * s.head_dim, 0, rows)?;
                let k = self.gather_keys(d.get("cache")?, s.kv_heads * s.head_dim, s.kv_len)?;
                let y = attention_scores(&self.pe, &q, &k, &s)?;
                self.write_tensor(Space::Ddr, d.get("dst")?, &y, 0)?;
                Ok(mha_work(&s, rows))
            }
            OpKind::Softmax => {
                let s = AttnShape { heads: d.usize("heads")?, ..self.attn_shape_partial(d)? };
                let x = self.read_tensor(Space::Ddr, d.get("src")?, s.kv_len, 0, rows)?;
                let y = softmax_scores(&x, &s);
                self.write_tensor(Space::Ddr, d.get("dst")?, &y, 0)?;
                Ok(StepWork { act_bytes: 8.0 * s.heads as f64 * visible_pairs(&s, rows), ..StepWork::default() })
            }
            OpKind::MhaMatmul => {
                let s = self.attn_shape(d)?;
                let p = self.read_tensor(Space::Ddr, d.get("src")?, s.kv_len, 0, rows)?;
                let v = self.read_cache(d.get("cache")?, s.kv_heads * s.head_dim, s.kv_len)?;
                let y = attention_context(&self.pe, &p, &v, &s)?;
                self.write_tensor(Space::Ddr, d.get("dst")?, &y, 0)?;
                Ok(mha_work(&s, rows))
            }
            OpKind::Activation => {
                let ch = d.usize("ch")?;
                let x = self.read_tensor(Space::Ddr, d.get("src")?, ch, d.usize("src_row")?, rows)?;
                self.write_tensor(Space::Ddr, d.get("dst")?, &silu(&x), 0)?;
                Ok(stream_work(rows * ch))
            }
        }
    }

    fn attn_shape_partial(&self, d: &DecodedInstruction) -> Result<AttnShape> {
        Ok(AttnShape {
            heads: self.cfg.heads,
            kv_heads: self.cfg.kv_heads,
            head_dim: self.cfg.head_dim,
            kv_len: d.usize("kv_len")?,
            q_pos0: d.usize("q_pos0")?,
        })
    }

    /// Prefill of the first `prompt` rows, then one decode per remaining
    /// row, with a host update of `host_update_us` before each launch
    /// overlapped with the previous launch's compute.
    pub fn run_pipelined(
        &mut self,
        inputs: &[Fp16Bits],
        prompt: usize,
        host_update_us: f64,
    ) -> Result<(Vec<RunOutput>, crate::perf::Timeline)> {
        let h = self.cfg.hidden;
        let total = inputs.len() / h;
        if prompt == 0 || prompt > total || !inputs.len().is_multiple_of(h) {
            return Err(Error::ShapeMismatch(format!("prompt of {prompt} rows out of {total}")));
        }
        let mut outs = vec![self.run(prompt, Phase::Prefill, &inputs[..prompt * h])?];
        for t in prompt..total {
            outs.push(self.run(t + 1, Phase::Decode, &inputs[t * h..(t + 1) * h])?);
        }
        let compute: Vec<f64> = outs.iter().map(|o| o.duration_ns() / 1e3).collect();
        let update = vec![host_update_us; compute.len()];
        let tl = crate::perf::pipeline_timeline(&compute, &update)?;
        Ok((outs, tl))
    }
}

fn same_space(region: Space, access: Space) -> bool {
    match access {
        Space::Ddr => region == Space::Ddr,
        Space::Hbm => region == Space::Hbm,
        Space::HbmStriped => region == Space::HbmStriped,
    }
}

fn check_extent(r: &Region, lay: &SlabLayout, ch: usize, rows: usize) -> Result<()> {
    if ch > lay.slabs * lay.t_out || rows > lay.row_capacity {
        return Err(Error::MemoryFault(format!("{rows} rows of {ch} channels exceed region {}", r.name)));
    }
    Ok(())
}

fn step_overhead(o: &Overheads, step: u8) -> f64 {
    o.steps.get((step as usize).wrapping_sub(1)).copied().unwrap_or(0.0)
}

fn visible_pairs(s: &AttnShape, rows: usize) -> f64 {
    (0..rows).map(|i| s.visible(i)).sum::<usize>() as f64
}

fn mha_work(s: &AttnShape, rows: usize) -> StepWork {
    let pairs = visible_pairs(s, rows);
    let kv = (s.kv_heads * s.head_dim) as f64;
    StepWork {
        kv_read_bytes: 2.0 * s.kv_len as f64 * kv,
        mha_macs: (s.heads * s.head_dim) as f64 * pairs,
        act_bytes: 2.0 * s.heads as f64 * pairs + 2.0 * (rows * s.heads * s.head_dim) as f64,
        ..StepWork::default()
    }
}
