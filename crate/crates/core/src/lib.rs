//! Tail-based sampling for distributed traces, built to run on an unbounded
//! stream: spans are assembled into trace trees, each trace is encoded as a
//! sparse call-path/duration vector, the vector is compressed into a short
//! locality-sensitive bit sketch, and an evolving set of micro-clusters over
//! those sketches decides — at trace completion time — whether the trace is
//! worth keeping. Rare structure is always kept; recurring structure is
//! sampled under a fixed budget.

pub mod clustering;
pub mod encoding;
pub mod error;
pub mod evalkit;
pub mod pipeline;
pub mod sketch;
pub mod trace_model;

pub use error::{Error, Result};
