//! Federated optimization by dual preconditioning: the DualFL round engine,
//! inexact local solvers with gap certificates, an inexact dual FISTA
//! reference loop, and an experiment harness.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dual_fista;
pub mod engine;
pub mod error;
pub mod harness;
pub mod local_solver;
pub mod oracle;
pub mod prox_grad;
pub mod schedule;

pub use error::{Error, Result};
pub use oracle::{CompositeOracle, ParameterPoint};
