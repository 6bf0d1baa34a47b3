//! Core algorithms for measuring how robust a language model's tool use is
//! when the tool catalog it sees has been corrupted.
//!
//! Everything in this crate is pure and allocation-only (`no_std` + `alloc`):
//!
//! - [`catalog`]: tool catalog and test-case data model with validation.
//! - [`noise`]: the seven name-noise transformations and the five
//!   environment levels built from them.
//! - [`eval`]: ReAct output parsing and the three gated stage scores.
//! - [`prompt`]: prompt templates and tool-document rendering.
//! - [`stats`]: per-level aggregation and Welch's ANOVA.
//! - [`augment`]: Rouge-L query dedup, trajectory rewriting, plan sampling
//!   and per-turn training-record export.
//!
//! File formats, the HTTP backend and the CLI live in the `rotbench` crate.
#![no_std]

extern crate alloc;

pub mod augment;
pub mod catalog;
pub mod eval;
pub mod noise;
pub mod prompt;
pub mod stats;

mod text;

pub use catalog::{
    validate_case, validate_catalog, Catalog, GoldCall, Parameter, Scenario, TestCase, Tool,
    ValueType, Violation,
};
pub use eval::{evaluate_case, parse_react, EvalRecord, ModelAction, Stage, StageScores, Turn};
pub use noise::{
    build_environment, NameMapping, NoiseError, NoiseKind, NoiseLevel, PerturbationTarget,
    PerturbedCase,
};

/// Tool names every environment implicitly offers alongside its catalog.
pub const META_TOOLS: [&str; 2] = ["finish", "ask_to_user"];

/// Whether `name` is one of the implicit meta tools.
pub fn is_meta_tool(name: &str) -> bool {
    META_TOOLS.contains(&name)
}
