//! Static placement of every buffer at its maximum-sequence extent.
//!
//! Weights are striped over the HBM ports: output channel `c` lives in port
//! `c % 32`, and every layer sits at the same offset inside each port
//! window. KV caches follow the weights, spread round-robin over ports.
//! Gains, activations, scores and logits live in DDR; activations whose
//! lifetimes do not overlap share addresses.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::graph::{NodeOp, OpGraph, TensorClass, TensorId};
use crate::error::{Error, Result};
use crate::layout::SlabLayout;
use crate::sparse::{LayerSpec, HBM_PORTS};

pub const BEAT_BYTES: u64 = 32;
pub const PORT_WINDOW: u64 = 256 << 20;
pub const HBM_BYTES: u64 = PORT_WINDOW * HBM_PORTS as u64;
pub const DDR_BYTES: u64 = 4 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Space {
    /// Same offset in every HBM port window.
    HbmStriped,
    /// Global HBM address.
    Hbm,
    Ddr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum RegionKind {
    Weight,
    KvCache,
    Gamma,
    Input,
    Activation,
    Scores,
    Logits,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Region {
    pub name: String,
    pub kind: RegionKind,
    pub space: Space,
    /// Byte address, a multiple of [`BEAT_BYTES`].
    pub addr: u64,
    pub bytes: u64,
    /// First and last instruction touching the region.
    pub live: (usize, usize),
    pub tensor: Option<TensorId>,
    pub outer: usize,
    pub ch: usize,
}

impl Region {
    pub fn beat(&self) -> u64 {
        self.addr / BEAT_BYTES
    }

    pub fn end(&self) -> u64 {
        self.addr + self.bytes
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MemoryMap {
    pub max_token: usize,
    pub t_out: usize,
    pub regions: Vec<Region>,
    /// End of the weight stripe inside each port window.
    pub weight_bytes_per_port: u64,
    /// End of the allocated DDR range.
    pub ddr_used: u64,
}

fn align(x: u64) -> u64 {
    x.div_ceil(BEAT_BYTES) * BEAT_BYTES
}

/// Bytes each port holds for a striped layer.
pub fn weight_bytes_per_port(spec: &LayerSpec) -> u64 {
    (spec.ch_out.div_ceil(HBM_PORTS) * spec.portions() * spec.format.total_bytes()) as u64
}

impl MemoryMap {
    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }

    pub fn tensor_region(&self, t: TensorId) -> Option<&Region> {
        self.regions.iter().find(|r| r.tensor == Some(t))
    }

    /// Element placement of a token-form region.
    pub fn layout(&self, r: &Region) -> SlabLayout {
        SlabLayout {
            base: (r.addr / 2) as usize,
            outer: r.outer,
            slabs: r.ch.div_ceil(self.t_out),
            row_capacity: self.max_token,
            t_out: self.t_out,
        }
    }

    pub fn kv_bytes(&self) -> u64 {
        self.regions.iter().filter(|r| r.kind == RegionKind::KvCache).map(|r| r.bytes).sum()
    }

    /// Checks that no two regions live at the same time share bytes and
    /// that everything fits its space.
    pub fn audit(&self) -> Result<()> {
        let hbm_span = |r: &Region| -> (u64, u64) {
            match r.space {
                Space::HbmStriped => (r.addr, r.end()),
                _ => (r.addr % PORT_WINDOW, r.addr % PORT_WINDOW + r.bytes),
            }
        };
        for (i, a) in self.regions.iter().enumerate() {
            match a.space {
                Space::Ddr if a.end() > DDR_BYTES => return Err(cap(&a.name, "DDR")),
                Space::HbmStriped if a.end() > PORT_WINDOW => return Err(cap(&a.name, "HBM port window")),
                Space::Hbm if a.end() > HBM_BYTES || hbm_span(a).1 > PORT_WINDOW => {
                    return Err(cap(&a.name, "HBM port window"))
                }
                _ => {}
            }
            if a.addr % BEAT_BYTES != 0 {
                return Err(Error::Malformed(format!("region {} is not beat aligned", a.name)));
            }
            for b in &self.regions[i + 1..] {
                let time = a.live.0 <= b.live.1 && b.live.0 <= a.live.1;
                let space = match (a.space, b.space) {
                    (Space::Ddr, Space::Ddr) => a.addr < b.end() && b.addr < a.end(),
                    (Space::Ddr, _) | (_, Space::Ddr) => false,
                    (Space::Hbm, Space::Hbm) => a.addr < b.end() && b.addr < a.end(),
                    _ => {
                        let (x, y) = (hbm_span(a), hbm_span(b));
                        x.0 < y.1 && y.0 < x.1
                    }
                };
                if time && space && a.bytes > 0 && b.bytes > 0 {
                    return Err(Error::Malformed(format!("regions {} and {} overlap while both live", a.name, b.name)));
                }
            }
        }
        Ok(())
    }
}

fn cap(name: &str, what: &str) -> Error {
    Error::CapacityExceeded(format!("{name} does not fit in {what}"))
}

/// Live interval of every tensor over the node order.
pub fn liveness(g: &OpGraph) -> Vec<(usize, usize)> {
    let last = g.nodes.len().saturating_sub(1);
    let mut live: Vec<Option<(usize, usize)>> = alloc::vec![None; g.tensors.len()];
    let mut touch = |t: TensorId, i: usize| {
        live[t] = Some(match live[t] {
            None => (i, i),
            Some((a, b)) => (a.min(i), b.max(i)),
        })
    };
    for (i, n) in g.nodes.iter().enumerate() {
        for &t in &n.inputs {
            touch(t, i);
        }
        touch(n.output, i);
    }
    g.tensors
        .iter()
        .enumerate()
        .map(|(t, d)| match (d.class, live[t]) {
            (TensorClass::Input, Some((_, b))) => (0, b),
            (TensorClass::Logits, Some((a, _))) => (a, last),
            (TensorClass::Gamma | TensorClass::KCache | TensorClass::VCache, _) => (0, last),
            (_, Some(x)) => x,
            (_, None) => (0, 0),
        })
        .collect()
}

/// Places every weight layer, cache and tensor of the graph.
pub fn allocate_memory(g: &OpGraph) -> Result<MemoryMap> {
    let cfg = &g.cfg;
    let max = cfg.max_token;
    if max == 0 {
        return Err(Error::InvalidConfig("max_token must be positive".into()));
    }
    let t = cfg.t_out;
    let end = g.nodes.len().saturating_sub(1);
    let mut regions = Vec::new();

    let mut off = 0u64;
    for n in &g.nodes {
        if let NodeOp::Vmm { weight, ch_in, ch_out, format, .. } = &n.op {
            let spec = LayerSpec::new(weight.clone(), *ch_in, *ch_out, *format);
            let bytes = align(weight_bytes_per_port(&spec));
            regions.push(Region {
                name: weight.clone(),
                kind: RegionKind::Weight,
                space: Space::HbmStriped,
                addr: off,
                bytes,
                live: (0, end),
                tensor: None,
                outer: 1,
                ch: *ch_out,
            });
            off += bytes;
        }
    }
    if off > PORT_WINDOW {
        return Err(cap("weights", "HBM port window"));
    }
    let weight_end = off;

    let live = liveness(g);
    let tensor_bytes = |d: &super::graph::TensorDesc| -> u64 {
        let rows = match d.class {
            TensorClass::Gamma => 1,
            _ => max,
        };
        let lanes = if d.class == TensorClass::Gamma { d.ch } else { d.ch.div_ceil(t) * t };
        align((d.outer * lanes * rows * 2) as u64)
    };

    let mut port_next = [weight_end; HBM_PORTS];
    let mut kv_index = 0;
    for (id, d) in g.tensors.iter().enumerate() {
        if !matches!(d.class, TensorClass::KCache | TensorClass::VCache) {
            continue;
        }
        let port = kv_index % HBM_PORTS;
        kv_index += 1;
        let bytes = tensor_bytes(d);
        let o = port_next[port];
        if o + bytes > PORT_WINDOW {
            return Err(cap(&d.name, "HBM port window"));
        }
        port_next[port] += bytes;
        regions.push(Region {
            name: d.name.clone(),
            kind: RegionKind::KvCache,
            space: Space::Hbm,
            addr: port as u64 * PORT_WINDOW + o,
            bytes,
            live: live[id],
            tensor: Some(id),
            outer: d.outer,
            ch: d.ch,
        });
    }

    let mut ddr = 0u64;
    for (id, d) in g.tensors.iter().enumerate() {
        if d.class == TensorClass::Gamma {
            let bytes = tensor_bytes(d);
            regions.push(Region {
                name: d.name.clone(),
                kind: RegionKind::Gamma,
                space: Space::Ddr,
                addr: ddr,
                bytes,
                live: live[id],
                tensor: Some(id),
                outer: 1,
                ch: d.ch,
            });
            ddr += bytes;
        }
    }

    // Linear scan in definition order with first-fit reuse of dead ranges.
    let mut order: Vec<TensorId> = (0..g.tensors.len())
        .filter(|&i| matches!(g.tensors[i].class, TensorClass::Input | TensorClass::Activation | TensorClass::Scores | TensorClass::Logits))
        .collect();
    order.sort_by_key(|&i| (live[i].0, i));
    let base = ddr;
    let mut active: Vec<(u64, u64, usize)> = Vec::new();
    for id in order {
        let d = &g.tensors[id];
        let (start, _) = live[id];
        active.retain(|&(_, _, last)| last >= start);
        active.sort_by_key(|a| a.0);
        let bytes = tensor_bytes(d);
        let mut at = base;
        for &(a, e, _) in &active {
            if at + bytes <= a {
                break;
            }
            at = at.max(e);
        }
        active.push((at, at + bytes, live[id].1));
        ddr = ddr.max(at + bytes);
        regions.push(Region {
            name: d.name.clone(),
            kind: match d.class {
                TensorClass::Input => RegionKind::Input,
                TensorClass::Scores => RegionKind::Scores,
                TensorClass::Logits => RegionKind::Logits,
                _ => RegionKind::Activation,
            },
            space: Space::Ddr,
            addr: at,
            bytes,
            live: live[id],
            tensor: Some(id),
            outer: d.outer,
            ch: d.ch,
        });
    }
    if ddr > DDR_BYTES {
        return Err(cap("activations", "DDR"));
    }
    let map = MemoryMap { max_token: max, t_out: t, regions, weight_bytes_per_port: weight_end, ddr_used: ddr };
    map.audit()?;
    Ok(map)
}
