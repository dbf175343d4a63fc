//! Test-time mixture of world models.
//!
//! A layered base world model carries one low-rank adapter per training
//! domain. A graph-processor router compares per-layer embeddings of the
//! current (instruction, observation) with per-expert prototypes and mixes
//! adapters layer by layer. Prototypes can be refined at test time, and new
//! experts can be distilled from the routed mixture using a few
//! demonstrations. [`graphworld`] provides the synthetic embodied environment
//! and [`harness`] the evaluation scenarios.

pub mod adapt;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod graphworld;
pub mod harness;
pub mod nncore;
pub mod pipeline;
pub mod router;
pub mod worldmodel;

pub use error::{Result, TmowError};
