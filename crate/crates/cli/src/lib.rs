//! Library surface of the `equiseg` CLI: run configuration, the checkpoint
//! format, and the training loop. The binary in `main.rs` wires these to
//! subcommands; integration tests drive them directly.

pub mod checkpoint;
pub mod config;
pub mod train;
