//! Experiment pipeline around `ibu-core`: config parsing, data ingestion,
//! sample -> obfuscate -> estimate -> measure runs, counterexample
//! verification, and result emission.

pub mod config;
pub mod counterexamples;
pub mod emit;
pub mod experiment;
pub mod gowalla;
