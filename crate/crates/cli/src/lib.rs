//! Command-line front end for the `msca` crate: experiment specs, run
//! directories, ablation grids and the self-test.

pub mod ablate;
pub mod error;
pub mod run;
pub mod spec;

pub use ablate::{cmd_ablate, Sweep};
pub use error::CliError;
pub use run::{cmd_eval, cmd_train};
pub use spec::{parse_views, ExperimentSpec, SCHEMA};
