//! Experiment orchestration: data, metrics, configs and report emission.

pub mod config;
pub mod data;
pub mod metrics;
pub mod experiments;
pub mod report;
pub mod verify;
