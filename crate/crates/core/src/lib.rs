//! Deterministic discrete-event simulation of streaming driving pipelines:
//! reaction-time decomposition, safety envelopes and tail-latency mitigations.

pub mod analysis;
pub mod config;
pub mod engine;
pub mod error;
pub mod fixtures;
pub mod mitigation;
pub mod pipeline;
pub mod safety;
pub mod scenario;
pub mod simkernel;
pub mod sweep;

pub use error::{Error, Result};
pub use simkernel::SimTime;
