//! Gated sparse attention in a small pre-norm decoder-only transformer, and
//! the experiment protocols used to study routing absorption: the tendency of
//! jointly trained Q/K/V projections to soak up whatever routing a learned
//! attention gate tries to impose.

pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gating;
pub mod metrics;
pub mod model;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};
