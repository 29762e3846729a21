//! Experiment pipeline, file formats and reports for the ADLP reserving
//! ensemble. The models themselves live in `adlp-core`.

pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod report;

pub use config::{DataSource, ExperimentConfig, IngestPaths, SimulationConfig, StrategySpec};
pub use error::{AdlpError, Result, Stage};
pub use pipeline::{run_experiment, sweep_split_points, EvalOptions, ExperimentReport, SweepReport};
