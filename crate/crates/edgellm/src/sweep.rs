//! Multi-threaded arithmetic error sweeps.

use anyhow::{ensure, Context, Result};
use edgellm_core::arith::{chunk_sizes, merge_chunks, sweep_chunk, Design, ErrorStats, PeConfig, PeMode};
use rayon::prelude::*;

/// Environment variable capping the number of sweep threads.
pub const THREADS_ENV: &str = "EDGELLM_THREADS";

pub fn sweep_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a count"))?;
        b = b.num_threads(n.max(1));
    }
    Ok(b.build()?)
}

/// Sharded sweep. Chunks merge in index order, so the result does not
/// depend on the thread count.
pub fn parallel_sweep(
    pool: &rayon::ThreadPool,
    cfg: &PeConfig,
    mode: PeMode,
    design: Design,
    trials: u64,
    seed: u64,
) -> Result<ErrorStats> {
    ensure!(trials > 0, "trials must be at least 1");
    cfg.validate()?;
    let idx: Vec<(u64, u64)> = chunk_sizes(trials).collect();
    let chunks = pool.install(|| {
        idx.par_iter()
            .map(|&(i, n)| sweep_chunk(cfg, mode, design, seed, i, n))
            .collect::<edgellm_core::Result<Vec<_>>>()
    })?;
    Ok(merge_chunks(&chunks))
}
