//! Experiment driver around `fapl-core`: file-based configs, reproducible
//! data/train/eval commands, and comparison/sweep grids with aggregate CSVs.

pub mod commands;
pub mod config;

pub use config::ExperimentConfig;
