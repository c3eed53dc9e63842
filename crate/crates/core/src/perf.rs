//! Analytic timing and energy model: ideal weight-streaming time, bandwidth
//! utilization, roofline placement, per-step latency tables, calibration
//! against measured step delays, and the instruction-update pipeline.
//!
//! Step latencies are in microseconds.

use alloc::string::String;
use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::ops::{OpKind, BLOCK_STEPS, OUTLAYER_STEPS};
use crate::sparse::{size_report, PackFormat};

/// Measured reference data: per-step delays (µs) at 128 tokens for the
/// dense 28-block model, and per-step power (W).
pub mod reference {
    pub const DECODE_HBM: [f64; 19] = [
        9.55, 47.12, 7.79, 2.15, 0.44, 0.23, 5.83, 43.38, 1.97, 0.29, 5.73, 48.34, 9.52, 137.98, 15.36, 143.98, 191.41,
        9.75, 648.81,
    ];
    pub const DECODE_DDR: [f64; 19] = [
        15.84, 181.66, 13.70, 12.61, 1.57, 1.63, 10.06, 48.68, 10.72, 2.23, 9.64, 177.30, 14.48, 596.56, 33.83, 594.59,
        707.03, 14.40, 2759.7,
    ];
    pub const PREFILL_HBM: [f64; 19] = [
        533.35, 4770.07, 274.29, 476.38, 24.99, 70.42, 672.66, 872.54, 475.36, 69.95, 614.95, 4725.42, 533.76, 16063.43,
        890.43, 16007.04, 23429.09, 19.86, 639.63,
    ];
    pub const PREFILL_DDR: [f64; 19] = [
        694.86, 7840.94, 351.03, 649.70, 33.15, 36.46, 837.16, 1048.91, 650.17, 35.44, 837.49, 7845.11, 694.53,
        26306.36, 1142.23, 26319.11, 75931.96, 23.09, 2762.25,
    ];
    pub const TOKEN: usize = 128;
    pub const LAYERS: usize = 28;

    pub const STANDBY_W: f64 = 40.36;
    /// Steps 1–17; the two outlayer steps reuse the norm and VMM figures.
    pub const STEP_POWER_W: [f64; 17] = [
        41.02, 54.02, 40.81, 42.79, 40.63, 40.62, 41.01, 40.65, 42.84, 40.62, 40.92, 57.25, 40.97, 55.13, 41.11, 58.13,
        53.23,
    ];
    pub const AVERAGE_POWER_W: f64 = 56.86;
    pub const SPARSE_DECODE_TOKEN_PER_S: f64 = 85.8;
    pub const TOKEN_PER_J: f64 = 1.51;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Phase {
    Decode,
    Prefill,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Decode => "decode",
            Phase::Prefill => "prefill",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "decode" => Ok(Phase::Decode),
            "prefill" => Ok(Phase::Prefill),
            _ => Err(Error::InvalidConfig(alloc::format!("unknown phase {s:?}"))),
        }
    }
}

/// Where weights and the KV cache live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum MemoryKind {
    Hbm,
    Ddr,
}

impl MemoryKind {
    pub fn name(self) -> &'static str {
        match self {
            MemoryKind::Hbm => "hbm",
            MemoryKind::Ddr => "ddr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hbm" => Ok(MemoryKind::Hbm),
            "ddr" => Ok(MemoryKind::Ddr),
            _ => Err(Error::InvalidConfig(alloc::format!("unknown memory {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct HwConfig {
    pub compute_mhz: f64,
    /// Memory clock period as used for ideal streaming time.
    pub memory_period_ns: f64,
    pub hbm_ports: usize,
    pub hbm_port_bits: usize,
    pub ddr_bytes_per_s: f64,
    pub ffn_macs_per_cycle: usize,
    pub mha_macs_per_cycle: usize,
    pub efficiency: f64,
    pub standby_w: f64,
    pub hbm_bytes: u64,
    pub ddr_bytes: u64,
}

impl Default for HwConfig {
    fn default() -> Self {
        Self {
            compute_mhz: 140.0,
            memory_period_ns: 3.571,
            hbm_ports: 32,
            hbm_port_bits: 256,
            ddr_bytes_per_s: 60e9,
            ffn_macs_per_cycle: 4096,
            mha_macs_per_cycle: 1024,
            efficiency: 0.75,
            standby_w: reference::STANDBY_W,
            hbm_bytes: 8 << 30,
            ddr_bytes: 4 << 30,
        }
    }
}

impl HwConfig {
    pub fn hbm_bits_per_cycle(&self) -> f64 {
        (self.hbm_ports * self.hbm_port_bits) as f64
    }

    pub fn hbm_bytes_per_s(&self) -> f64 {
        self.hbm_bits_per_cycle() / 8.0 / (self.memory_period_ns * 1e-9)
    }

    pub fn compute_period_s(&self) -> f64 {
        1e-6 / self.compute_mhz
    }

    /// Weight bits the FFN array consumes per compute cycle.
    pub fn ffn_bits_per_compute_cycle(&self) -> usize {
        self.ffn_macs_per_cycle * 4
    }

    pub fn mha_bits_per_compute_cycle(&self) -> usize {
        self.mha_macs_per_cycle * 16
    }

    /// Peak FFN-array throughput in operations (2 per MAC) per second.
    pub fn peak_ops(&self) -> f64 {
        2.0 * self.ffn_macs_per_cycle as f64 / self.compute_period_s()
    }

    pub fn bandwidth(&self, m: MemoryKind) -> f64 {
        match m {
            MemoryKind::Hbm => self.hbm_bytes_per_s(),
            MemoryKind::Ddr => self.ddr_bytes_per_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.compute_mhz,
            self.memory_period_ns,
            self.ddr_bytes_per_s,
            self.efficiency,
            self.hbm_ports as f64,
            self.hbm_port_bits as f64,
            self.ffn_macs_per_cycle as f64,
            self.mha_macs_per_cycle as f64,
        ];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.efficiency > 1.0 {
            return Err(Error::InvalidConfig("hardware parameters must be positive, efficiency ≤ 1".into()));
        }
        Ok(())
    }
}

/// Weight bits streamed for a matrix: four bits per weight scaled by the
/// format's effective bitwidth relative to dense.
pub fn streamed_weight_bits(ch_in: usize, ch_out: usize, f: PackFormat) -> f64 {
    (ch_in * ch_out) as f64 * 4.0 * f.effective_bitwidth() / PackFormat::DENSE.effective_bitwidth()
}

/// Ideal time in seconds to stream a matrix's weights over HBM.
pub fn ideal_vmm_time(ch_in: usize, ch_out: usize, f: PackFormat, hw: &HwConfig) -> f64 {
    streamed_weight_bits(ch_in, ch_out, f) / hw.hbm_bits_per_cycle() * hw.memory_period_ns * 1e-9
}

/// Bandwidth utilization `ideal / real`. Values above 1 mean the model is
/// inconsistent with the measurement; `inconsistent` flags them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Utilization {
    pub fraction: f64,
    pub inconsistent: bool,
}

pub fn utilization(ideal: f64, real: f64) -> Utilization {
    let f = ideal / real;
    Utilization { fraction: f.min(1.0), inconsistent: f > 1.0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Bound {
    Memory,
    Compute,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RooflinePoint {
    /// Operations per byte.
    pub intensity: f64,
    /// Attainable operations per second.
    pub attainable: f64,
    pub bound: Bound,
}

/// Places a `rows × ch_in → ch_out` product on the roofline. Weight bytes
/// include the format's scale and mask overhead.
pub fn roofline_point(rows: usize, ch_in: usize, ch_out: usize, f: PackFormat, m: MemoryKind, hw: &HwConfig) -> RooflinePoint {
    let ops = 2.0 * (rows * ch_in * ch_out) as f64;
    let bytes = (ch_in * ch_out) as f64 * f.effective_bitwidth() / 8.0;
    let intensity = ops / bytes;
    let mem = intensity * hw.bandwidth(m);
    let peak = hw.peak_ops();
    RooflinePoint {
        intensity,
        attainable: mem.min(peak),
        bound: if mem < peak { Bound::Memory } else { Bound::Compute },
    }
}

/// Data movement and arithmetic of one step.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepWork {
    pub weight_bits: f64,
    pub kv_read_bytes: f64,
    pub kv_write_bytes: f64,
    /// Activation traffic to and from DDR.
    pub act_bytes: f64,
    pub ffn_macs: f64,
    pub mha_macs: f64,
}

impl StepWork {
    /// Streaming and arithmetic time in µs before efficiency and overhead.
    pub fn raw_time_us(&self, m: MemoryKind, hw: &HwConfig) -> f64 {
        let mem = self.weight_bits / 8.0 / hw.bandwidth(m)
            + (self.kv_read_bytes + self.kv_write_bytes) / hw.bandwidth(m)
            + self.act_bytes / hw.ddr_bytes_per_s;
        let comp = (self.ffn_macs / hw.ffn_macs_per_cycle as f64 + self.mha_macs / hw.mha_macs_per_cycle as f64)
            * hw.compute_period_s();
        mem.max(comp) * 1e6
    }

    pub fn model_time_us(&self, m: MemoryKind, hw: &HwConfig) -> f64 {
        self.raw_time_us(m, hw) / hw.efficiency
    }

    /// HBM and DDR bytes moved.
    pub fn bytes(&self, m: MemoryKind) -> (f64, f64) {
        let big = self.weight_bits / 8.0 + self.kv_read_bytes + self.kv_write_bytes;
        match m {
            MemoryKind::Hbm => (big, self.act_bytes),
            MemoryKind::Ddr => (0.0, big + self.act_bytes),
        }
    }
}

/// Work of a `rows`-row product through a `ch_in → ch_out` matrix.
pub fn vmm_work(rows: usize, ch_in: usize, ch_out: usize, f: PackFormat, residual: bool) -> StepWork {
    let r = rows as f64;
    StepWork {
        weight_bits: streamed_weight_bits(ch_in, ch_out, f),
        act_bytes: 2.0 * r * (ch_in + ch_out * if residual { 2 } else { 1 }) as f64,
        ffn_macs: r * (ch_in * ch_out) as f64 * f.level().kept_fraction(),
        ..StepWork::default()
    }
}

/// Elementwise work over `elements` values read and written once.
pub fn stream_work(elements: usize) -> StepWork {
    StepWork { act_bytes: 4.0 * elements as f64, ..StepWork::default() }
}

/// Keys seen by all query rows together.
fn visible_pairs(rows: usize, kv_len: usize) -> usize {
    let first = kv_len + 1 - rows;
    (first..=kv_len).sum()
}

/// Work of every step of one block and the outlayer. `rows` query rows sit
/// at the end of a cache of `kv_len` tokens; outlayer steps use one row.
pub fn model_steps(cfg: &ModelConfig, rows: usize, kv_len: usize) -> Vec<(&'static str, StepWork)> {
    let l = cfg.block_layers(0);
    let (h, kv, hd, heads) = (cfg.hidden, cfg.kv_dim(), cfg.head_dim, cfg.heads);
    let pairs = visible_pairs(rows, kv_len) as f64;
    let r = rows as f64;
    let kv_write = StepWork { act_bytes: 2.0 * r * kv as f64, kv_write_bytes: 2.0 * r * kv as f64, ..StepWork::default() };
    let mha = |extra: f64| StepWork {
        kv_read_bytes: 2.0 * (kv_len * kv) as f64,
        mha_macs: heads as f64 * hd as f64 * pairs,
        act_bytes: 2.0 * heads as f64 * pairs + extra,
        ..StepWork::default()
    };
    let works = [
        stream_work(rows * h),
        vmm_work(rows, h, h, l[0].format, false),
        stream_work(rows * h),
        vmm_work(rows, h, kv, l[1].format, false),
        stream_work(rows * kv),
        kv_write.clone(),
        mha(2.0 * r * h as f64),
        StepWork { act_bytes: 8.0 * heads as f64 * pairs, ..StepWork::default() },
        vmm_work(rows, h, kv, l[2].format, false),
        kv_write,
        mha(2.0 * r * h as f64),
        vmm_work(rows, h, h, l[3].format, true),
        stream_work(rows * h),
        vmm_work(rows, h, cfg.ffn, l[4].format, false),
        stream_work(rows * cfg.ffn),
        vmm_work(rows, h, cfg.ffn, l[5].format, true),
        vmm_work(rows, cfg.ffn, h, l[6].format, true),
        stream_work(h),
        vmm_work(1, h, cfg.vocab, PackFormat::DENSE, false),
    ];
    BLOCK_STEPS.iter().chain(OUTLAYER_STEPS.iter()).copied().zip(works).collect()
}

/// Deviation a sum of 17 delays printed to 0.01 µs can carry.
pub const BLOCK_ROUNDING_US: f64 = 17.0 * 0.005;
/// The same bound for 28 blocks plus two outlayer steps.
pub const TOTAL_ROUNDING_US: f64 = 28.0 * BLOCK_ROUNDING_US + 2.0 * 0.005;

/// Per-step additive overheads (µs) for the 19 steps.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Overheads {
    pub steps: Vec<f64>,
}

impl Overheads {
    pub fn zero() -> Self {
        Self { steps: alloc::vec![0.0; 19] }
    }
}

/// Overhead sets fitted for each phase and memory.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Calibration {
    pub decode_hbm: Overheads,
    pub decode_ddr: Overheads,
    pub prefill_hbm: Overheads,
    pub prefill_ddr: Overheads,
}

impl Calibration {
    pub fn get(&self, p: Phase, m: MemoryKind) -> &Overheads {
        match (p, m) {
            (Phase::Decode, MemoryKind::Hbm) => &self.decode_hbm,
            (Phase::Decode, MemoryKind::Ddr) => &self.decode_ddr,
            (Phase::Prefill, MemoryKind::Hbm) => &self.prefill_hbm,
            (Phase::Prefill, MemoryKind::Ddr) => &self.prefill_ddr,
        }
    }

    /// Fits the reference delays on the dense 28-block model.
    pub fn fit_reference(hw: &HwConfig) -> Self {
        let cfg = ModelConfig::glm6b();
        let t = reference::TOKEN;
        let f = |p, m, d: &[f64; 19]| fit_overheads(&cfg, hw, t, p, m, d);
        Self {
            decode_hbm: f(Phase::Decode, MemoryKind::Hbm, &reference::DECODE_HBM),
            decode_ddr: f(Phase::Decode, MemoryKind::Ddr, &reference::DECODE_DDR),
            prefill_hbm: f(Phase::Prefill, MemoryKind::Hbm, &reference::PREFILL_HBM),
            prefill_ddr: f(Phase::Prefill, MemoryKind::Ddr, &reference::PREFILL_DDR),
        }
    }
}

/// Rows processed and cache length of a phase at `token`.
pub fn phase_shape(p: Phase, token: usize) -> (usize, usize) {
    match p {
        Phase::Decode => (1, token),
        Phase::Prefill => (token, token),
    }
}

/// Overheads making the model reproduce `measured` exactly. They may be
/// negative where the streaming model overestimates a step.
pub fn fit_overheads(cfg: &ModelConfig, hw: &HwConfig, token: usize, p: Phase, m: MemoryKind, measured: &[f64; 19]) -> Overheads {
    let (rows, kv) = phase_shape(p, token);
    let steps = model_steps(cfg, rows, kv).iter().zip(measured).map(|((_, w), d)| d - w.model_time_us(m, hw)).collect();
    Overheads { steps }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepLatency {
    pub step: usize,
    pub name: String,
    pub us: f64,
}

/// Per-step delays with the whole-model aggregation.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LatencyTable {
    pub steps: Vec<StepLatency>,
    pub layers: usize,
    pub per_block_us: f64,
    pub total_us: f64,
    pub token_per_s: f64,
}

impl LatencyTable {
    /// Aggregates 19 step delays: block steps repeat per layer, outlayer
    /// steps run once.
    pub fn aggregate(delays: &[f64], layers: usize) -> Result<Self> {
        if delays.len() != 19 {
            return Err(Error::ShapeMismatch(alloc::format!("{} step delays, expected 19", delays.len())));
        }
        let steps = BLOCK_STEPS
            .iter()
            .chain(OUTLAYER_STEPS.iter())
            .zip(delays)
            .enumerate()
            .map(|(i, (n, &us))| StepLatency { step: i + 1, name: (*n).into(), us })
            .collect();
        let per_block_us: f64 = delays[..17].iter().sum();
        let total_us = per_block_us * layers as f64 + delays[17] + delays[18];
        Ok(Self { steps, layers, per_block_us, total_us, token_per_s: 1e6 / total_us })
    }

    pub fn delays(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.us).collect()
    }

    /// Delay attributed to attention (score, softmax and context steps),
    /// to matrix products, and to the rest, over the whole model.
    pub fn breakdown(&self) -> (f64, f64, f64) {
        let (mut mha, mut ffn, mut other) = (0.0, 0.0, 0.0);
        for s in &self.steps {
            let n = if s.step <= 17 { self.layers as f64 } else { 1.0 };
            match OpKind::for_step(&s.name) {
                Some(OpKind::Transpose | OpKind::Softmax | OpKind::MhaMatmul) => mha += s.us * n,
                Some(OpKind::VmmBn | OpKind::VmmArgmax) => ffn += s.us * n,
                _ => other += s.us * n,
            }
        }
        (mha, ffn, other)
    }
}

/// Modeled latency of the whole model at `token`.
pub fn block_latency(cfg: &ModelConfig, hw: &HwConfig, token: usize, p: Phase, m: MemoryKind, o: &Overheads) -> Result<LatencyTable> {
    if token == 0 || token > cfg.max_token {
        return Err(Error::TokenOutOfRange { token: token as u32, max_token: cfg.max_token as u32 });
    }
    if o.steps.len() != 19 {
        return Err(Error::InvalidConfig("overheads must list 19 steps".into()));
    }
    let (rows, kv) = phase_shape(p, token);
    let d: Vec<f64> =
        model_steps(cfg, rows, kv).iter().zip(&o.steps).map(|((_, w), oh)| (w.model_time_us(m, hw) + oh).max(0.0)).collect();
    LatencyTable::aggregate(&d, cfg.layers)
}

/// Dense-to-strategy ratio of one block's weight volume.
pub fn sparsity_speedup(cfg: &ModelConfig) -> f64 {
    let dense = size_report(&cfg.clone().with_strategy(crate::config::Strategy::Dense).block_size_specs());
    size_report(&cfg.block_size_specs()).speedup_over(&dense)
}

/// Power per step (W) for the 19 steps.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PowerTable {
    pub standby_w: f64,
    pub steps: Vec<f64>,
}

impl PowerTable {
    pub fn reference() -> Self {
        let mut steps = reference::STEP_POWER_W.to_vec();
        steps.push(reference::STEP_POWER_W[0]);
        steps.push(reference::STEP_POWER_W[1]);
        Self { standby_w: reference::STANDBY_W, steps }
    }

    pub fn constant(w: f64) -> Self {
        Self { standby_w: w, steps: alloc::vec![w; 19] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Energy {
    pub average_w: f64,
    pub token_per_j: f64,
    pub joules_per_token: f64,
}

/// Time-weighted average power of a latency table and the implied
/// tokens per joule.
pub fn energy_estimate(t: &LatencyTable, p: &PowerTable) -> Result<Energy> {
    let mut e = 0.0;
    for s in &t.steps {
        let w = *p.steps.get(s.step - 1).ok_or(Error::MissingStepPower(s.name.clone()))?;
        e += s.us * w * if s.step <= 17 { t.layers as f64 } else { 1.0 };
    }
    let average_w = e / t.total_us;
    Ok(Energy {
        average_w,
        token_per_j: t.token_per_s / average_w,
        joules_per_token: average_w / t.token_per_s,
    })
}

/// Tokens per joule at a given throughput and power.
pub fn token_per_joule(token_per_s: f64, watts: f64) -> f64 {
    token_per_s / watts
}

/// One iteration of the host-update/compute pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PipelineSlot {
    pub update_start: f64,
    pub update_end: f64,
    pub compute_start: f64,
    pub compute_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Timeline {
    pub slots: Vec<PipelineSlot>,
    pub total: f64,
}

impl Timeline {
    /// Interval between the last two compute starts.
    pub fn steady_period(&self) -> Option<f64> {
        let n = self.slots.len();
        (n >= 2).then(|| self.slots[n - 1].compute_start - self.slots[n - 2].compute_start)
    }
}

/// Instruction updates for iteration `i+1` run on the host while the
/// accelerator computes iteration `i`; iteration `i+1` starts when both
/// finish.
pub fn pipeline_timeline(compute: &[f64], update: &[f64]) -> Result<Timeline> {
    if compute.is_empty() || compute.len() != update.len() {
        return Err(Error::ShapeMismatch("pipeline needs equal, nonempty compute and update lists".into()));
    }
    let mut slots = Vec::with_capacity(compute.len());
    let mut update_end = update[0];
    let mut slot = PipelineSlot { update_start: 0.0, update_end, compute_start: update_end, compute_end: update_end + compute[0] };
    slots.push(slot);
    for i in 1..compute.len() {
        let update_start = slot.update_end.max(slot.compute_start);
        update_end = update_start + update[i];
        let start = slot.compute_end.max(update_end);
        slot = PipelineSlot { update_start, update_end, compute_start: start, compute_end: start + compute[i] };
        slots.push(slot);
    }
    Ok(Timeline { total: slot.compute_end, slots })
}
