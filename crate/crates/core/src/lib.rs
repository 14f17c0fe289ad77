//! Sequential transaction foundation model.
//!
//! The crate covers the whole desk-scale pipeline: a declarative attribute
//! [`schema`], a deterministic synthetic transaction generator ([`syngen`]),
//! corpus assembly ([`corpus`]), a small reverse-mode autodiff engine
//! ([`tensor`], [`graph`]), the dual-head causal decoder ([`model`]), the
//! training objectives ([`objective`]), the optimization loop ([`trainer`]),
//! metrics and benchmarks ([`eval`]) and the two-tower recommendation
//! harness ([`rec`]).

pub mod alloc_track;
pub mod archive;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod objective;
pub mod rec;
pub mod schema;
pub mod syngen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
