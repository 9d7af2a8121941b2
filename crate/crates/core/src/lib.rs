//! Staged adaptive observer for plants with unknown sinusoidal parameters
//! and a known constant output delay.
//!
//! The pipeline runs three estimators one after another on a shared
//! fixed-step grid: frequency identification ([`freq`]), coefficient
//! identification by regressor extension and mixing ([`amp`]), and a
//! finite-time state observer built on the fundamental matrix ([`gpebo`]).
//! [`run_simulation`] wires them to the [`plant`] and returns a
//! [`SimulationTrace`].

pub mod amp;
pub mod config;
pub mod error;
pub mod estimator;
pub mod filters;
pub mod freq;
pub mod gpebo;
pub mod pipeline;
pub mod plant;
pub mod report;
pub mod sim;
pub mod trace;

pub use config::{parse_config, ExperimentConfig};
pub use error::{Error, ErrorKind, Result, Stage};
pub use filters::{FilterBlock, InputSegment};
pub use pipeline::run_simulation;
pub use plant::PlantConfig;
pub use report::{compare_runs, RunSummary};
pub use sim::{rk4_step, HistoryBuffer, TimeGrid};
pub use trace::SimulationTrace;
