//! Command-line harness: flat config files, metric persistence and the
//! train / align / ablate / distsim entry points.

pub mod config;
pub mod distsim;
pub mod metrics;
pub mod runner;

pub use config::FlatConfig;
pub use metrics::{MetricsWriter, RunSummary, CSV_HEADER};
pub use runner::{
    cmd_ablate, cmd_align, cmd_distsim, cmd_train, evaluate_accuracy, resolve, Method, RunSetup,
};
