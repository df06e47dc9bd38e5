//! Experiment harness around the `vcotta` library: configuration files,
//! model checkpoints, run orchestration, parameter sweeps, and charts.
//! The `vcotta` binary is a thin command-line layer over these modules.

pub mod checkpoint;
pub mod experiment;
pub mod plot;
pub mod spec;
pub mod sweep;
