//! Functional model of an FPGA accelerator for INT4-weight language-model
//! inference: bit-level arithmetic, sparse weight packing, the unified
//! tensor layout, operators, the instruction compiler, a performance model
//! and an instruction-level simulator.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod arith;
pub mod bits;
pub mod compiler;
pub mod config;
pub mod error;
pub mod fp16;
pub mod layout;
pub mod model;
pub mod ops;
pub mod perf;
pub mod sim;
pub mod sparse;

pub use error::{Error, Result};
pub use fp16::{Fp16Bits, RoundingMode};
