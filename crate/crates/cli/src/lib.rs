//! Scenario configuration, the simulation pipeline and plotting for the
//! `eomshape` command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod pipeline;
pub mod plot;
pub mod presets;
pub mod report;

pub use config::{ConfigError, Scenario};
pub use pipeline::{run_plan, run_scenario, RunError};
pub use report::RunReport;
