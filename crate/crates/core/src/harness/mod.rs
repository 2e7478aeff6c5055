//! Deterministic scenario runner, transcripts, and the adversary linker.

pub mod instant;
pub mod linker;
pub mod replay;
pub mod scenario;
pub mod sim;
pub mod transcript;

use thiserror::Error;

pub use linker::{adversary_link, Link};
pub use replay::{metrics_report, replay, validate, Report};
pub use scenario::{Mode, Scenario, ScenarioError, Topology};
pub use sim::run_scenario;
pub use transcript::{Role, Transcript, VantageRecord};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("simulation did not settle by tick {tick}")]
    Stalled { tick: u64 },
}
