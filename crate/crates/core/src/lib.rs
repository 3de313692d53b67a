//! Simulator for hierarchical split fine-tuning of low-rank adapters with
//! behaviour-aware client clustering, sketched activation exchange and
//! trust-weighted aggregation.

pub mod clustering;
pub mod codec;
pub mod config;
pub mod error;
pub mod fingerprint;
pub mod metrics;
pub mod model;
pub mod par;
pub mod protocol;
pub mod seed;

pub use error::{ElsaError, Result};
