//! Lowering of the operator graph to token-parameterized instructions.

pub mod expr;
pub mod graph;
pub mod memory;
pub mod program;
pub mod schedule;

pub use expr::{BinOp, RpnOp, SymExpr};
pub use graph::{build_block_graph, OpGraph};
pub use memory::{allocate_memory, MemoryMap};
pub use program::{compile, last_token_optimize, patch_for_token, CompiledProgram, Instruction, TokenBinding};
