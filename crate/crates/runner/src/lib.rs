//! Runner for the reflection-aware anomaly detection toolkit: prompts,
//! response collection, scoring, dataset builds and toy training.

pub mod cli;
pub mod client;
pub mod collect;
pub mod config;
pub mod prompt;
pub mod score;
