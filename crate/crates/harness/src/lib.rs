//! Scenario engine for pitting composed transport stacks against censor
//! policies, and the coverage matrix built on top of it.

pub mod addrs;
pub mod background;
pub mod config;
pub mod matrix;
pub mod report;
pub mod scenario;
pub mod training;

pub use config::{load_config, parse_config, ConfigError, ScenarioConfig};
pub use matrix::{evaluate_stack, render_markdown, MatrixRow};
pub use scenario::{run_scenario, MetricsReport, ScenarioRun, TrialResult};
