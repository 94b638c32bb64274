//! Pipeline driver behind the `diffplan` binary: configuration, stage
//! wiring and the command implementations.

pub mod commands;
pub mod config;
pub mod pipeline;
