//! Experiment harness for lottery-ticket pipelines: datasets, checkpoints,
//! CSV/SVG output and the `ticketlab` command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod output;
pub mod plot;
pub mod run;
pub mod tables;
