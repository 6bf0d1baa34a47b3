//! File formats, model backends and the command implementations behind the
//! `rotbench` binary. The algorithms themselves live in [`rotbench_core`].

pub mod backend;
pub mod commands;
pub mod format;
pub mod report;

pub use rotbench_core as core;
