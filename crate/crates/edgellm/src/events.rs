//! Event logs of simulated runs as CSV, and their summaries.

use std::io::{Read, Write};

use anyhow::Result;
use edgellm_core::sim::Event;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub run: usize,
    pub token: usize,
    pub phase: String,
    pub index: usize,
    pub step: u8,
    pub name: String,
    pub layer: u16,
    pub start_ns: f64,
    pub end_ns: f64,
    pub bytes_hbm: f64,
    pub bytes_ddr: f64,
}

impl EventRecord {
    pub fn new(run: usize, token: usize, phase: &str, e: &Event) -> Self {
        Self {
            run,
            token,
            phase: phase.into(),
            index: e.index,
            step: e.step,
            name: e.name.clone(),
            layer: e.layer,
            start_ns: e.start_ns,
            end_ns: e.end_ns,
            bytes_hbm: e.bytes_hbm,
            bytes_ddr: e.bytes_ddr,
        }
    }

    pub fn duration_ns(&self) -> f64 {
        self.end_ns - self.start_ns
    }
}

pub fn write_csv<W: Write>(w: W, records: &[EventRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<EventRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: u8,
    pub name: String,
    pub count: usize,
    pub total_us: f64,
    pub bytes_hbm: f64,
    pub bytes_ddr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub token: usize,
    pub phase: String,
    pub events: usize,
    pub total_us: f64,
    pub steps: Vec<StepSummary>,
}

/// Groups records per run and per step, in order of first appearance.
pub fn summarize(records: &[EventRecord]) -> Vec<RunSummary> {
    let mut runs: Vec<RunSummary> = Vec::new();
    for r in records {
        if runs.last().is_none_or(|s| s.run != r.run) {
            runs.push(RunSummary {
                run: r.run,
                token: r.token,
                phase: r.phase.clone(),
                events: 0,
                total_us: 0.0,
                steps: Vec::new(),
            });
        }
        let s = runs.last_mut().unwrap();
        s.events += 1;
        s.total_us += r.duration_ns() / 1e3;
        let st = match s.steps.iter_mut().position(|x| x.step == r.step) {
            Some(i) => &mut s.steps[i],
            None => {
                s.steps.push(StepSummary {
                    step: r.step,
                    name: r.name.clone(),
                    count: 0,
                    total_us: 0.0,
                    bytes_hbm: 0.0,
                    bytes_ddr: 0.0,
                });
                s.steps.last_mut().unwrap()
            }
        };
        st.count += 1;
        st.total_us += r.duration_ns() / 1e3;
        st.bytes_hbm += r.bytes_hbm;
        st.bytes_ddr += r.bytes_ddr;
    }
    for s in &mut runs {
        s.steps.sort_by_key(|x| x.step);
    }
    runs
}
