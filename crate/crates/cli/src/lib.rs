//! Experiment harness: run configs, sweeps over (method, alpha, seed),
//! adaptive binning for report aggregation, and static SVG plots.

pub mod binning;
pub mod config;
pub mod plot;
pub mod sweep;
