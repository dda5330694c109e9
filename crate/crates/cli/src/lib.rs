//! Experiment orchestration for latentforge: configuration, cached stages
//! and report emission.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod stages;
