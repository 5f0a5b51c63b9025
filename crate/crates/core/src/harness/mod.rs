//! Experiment harness: configuration, data, synthetic problems, reference
//! solutions, baselines, rate fits and trace output.

pub mod baseline;
pub mod config;
pub mod data;
pub mod experiment;
pub mod rate;
pub mod reference;
pub mod synth;
pub mod trace;

pub use config::RunConfig;
pub use experiment::{execute, Outcome};
pub use trace::{emit_trace, Trace, TraceRow};
