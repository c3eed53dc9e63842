//! Overlap of host-side instruction updates with accelerator compute.

use alloc::vec::Vec;

use super::program::CompiledProgram;
use crate::error::Result;
use crate::perf::{pipeline_timeline, Timeline};

/// Host cost model for producing instruction words, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HostCost {
    /// Fixed cost per update: register writes and launch.
    pub fixed_us: f64,
    /// Writing one instruction word.
    pub per_word_us: f64,
    /// Evaluating one residual expression.
    pub per_residual_us: f64,
}

impl Default for HostCost {
    fn default() -> Self {
        HostCost { fixed_us: 5.0, per_word_us: 0.01, per_residual_us: 0.05 }
    }
}

impl HostCost {
    /// Writing the complete program.
    pub fn full_update_us(&self, p: &CompiledProgram) -> f64 {
        self.fixed_us + p.total_words() as f64 * self.per_word_us + p.residuals.len() as f64 * self.per_residual_us
    }

    /// Rewriting only the token-dependent words.
    pub fn residual_update_us(&self, p: &CompiledProgram) -> f64 {
        self.fixed_us + p.residuals.len() as f64 * (self.per_word_us + self.per_residual_us)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulePlan {
    /// Host update time per iteration; the first one writes everything.
    pub update_us: Vec<f64>,
    pub compute_us: Vec<f64>,
    pub timeline: Timeline,
}

impl SchedulePlan {
    /// Latency added by updates on top of pure compute.
    pub fn exposed_update_us(&self) -> f64 {
        self.timeline.total - self.compute_us.iter().sum::<f64>()
    }
}

/// Plans one update per inference, each running while the previous
/// inference computes.
pub fn schedule_latency_hiding(p: &CompiledProgram, cost: &HostCost, compute_us: &[f64]) -> Result<SchedulePlan> {
    let update_us: Vec<f64> = (0..compute_us.len())
        .map(|i| if i == 0 { cost.full_update_us(p) } else { cost.residual_update_us(p) })
        .collect();
    let timeline = pipeline_timeline(compute_us, &update_us)?;
    Ok(SchedulePlan { update_us, compute_us: compute_us.to_vec(), timeline })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::{compile, TokenBinding};
    use crate::config::ModelConfig;
    use crate::perf::Phase;

    #[test]
    fn hiding_and_saturation() {
        let p = compile(&ModelConfig::toy(), Phase::Decode, TokenBinding::Symbolic).unwrap();
        let free = HostCost { fixed_us: 0.0, per_word_us: 0.0, per_residual_us: 0.0 };
        let s = schedule_latency_hiding(&p, &free, &[10.0; 5]).unwrap();
        assert_eq!(s.timeline.total, 50.0);

        let c = HostCost::default();
        let first = c.full_update_us(&p);
        let r = c.residual_update_us(&p);
        assert!(r < first);
        let s = schedule_latency_hiding(&p, &c, &[r * 2.0; 6]).unwrap();
        assert!((s.timeline.total - (first + 12.0 * r)).abs() < 1e-9);
        assert!((s.exposed_update_us() - first).abs() < 1e-9);

        let s = schedule_latency_hiding(&p, &c, &[r / 2.0; 6]).unwrap();
        assert!((s.timeline.steady_period().unwrap() - r).abs() < 1e-9);
    }
}
