//! Emulation of the mixed-precision dot-product unit and of the two
//! adder-tree baselines it is compared against.

mod baseline;
mod pe;
mod sweep;

pub use baseline::{dot_baseline, Operand, TreeVariant};
pub use pe::{
    dot_ffn, dot_mha, trace_ffn, trace_mha, DotResult, DotTrace, Int4Weight, PeConfig, PeMode,
};
pub use sweep::{
    chunk_rng, chunk_sizes, error_sweep, exact_dot, merge_chunks, sweep_chunk, ChunkStats, Design, ErrorStats, Trial,
    RELATIVE_ERROR_FLOOR, SWEEP_CHUNK,
};

/// Reference figures for the three unit designs (28 nm ASIC flow and FPGA
/// resources). Carried as documentation constants; nothing here is derived.
pub mod reference {
    /// (design, FP16×INT4 error %, FP16×FP16 error %)
    pub const ERROR_RATES: [(&str, f64, f64); 3] = [
        ("proposed", 0.0472, 0.0044),
        ("fp16-tree", 2.864, 14.470),
        ("fp20-tree", 2.644, 0.020),
    ];
    /// Total area in µm².
    pub const AREA_UM2: [(&str, u32); 3] =
        [("proposed", 71_664), ("fp16-tree", 80_675 + 26_762), ("fp20-tree", 110_668 + 30_009)];
    pub const MAX_FREQUENCY_GHZ: [(&str, f64); 3] =
        [("proposed", 1.11), ("fp16-tree", 1.03), ("fp20-tree", 1.06)];
    /// LUT, FF, DSP.
    pub const FPGA_RESOURCES: [(&str, u32, u32, u32); 3] = [
        ("proposed", 24_714, 12_348, 128),
        ("fp16-tree", 24_060 + 6_425, 4_151 + 1_016, 128 + 32),
        ("fp20-tree", 37_320 + 7_870, 4_596 + 1_268, 128 + 32),
    ];
}
