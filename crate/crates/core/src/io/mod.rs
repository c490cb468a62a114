//! Dataset ingestion, synthetic data, artifact persistence, configuration,
//! and seed derivation.

pub mod bundle;
pub mod config;
pub mod idx;
pub mod seed;
pub mod synth;
