//! Deterministic discrete-time simulation of a proof-of-gradient-optimization
//! network: scenario files, adversary strategies, the block pipeline event
//! loop, reports, replay, detection-rate experiments and the safety property
//! suite.

pub mod config;
pub mod detect;
pub mod properties;
pub mod replay;
pub mod report;
pub mod runner;
pub mod strategy;

use pogo_core::protocol::ProtocolError;
use thiserror::Error;

pub use config::ScenarioConfig;
pub use detect::{detection_rate, DetectionReport};
pub use properties::{property_suite, PropertyReport, PropertyResult, PropertyStatus};
pub use replay::{replay, ReplayOutcome};
pub use report::SimReport;
pub use runner::{run_scenario, SimRun};
pub use strategy::Strategy;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Io(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}
