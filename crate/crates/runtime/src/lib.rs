//! Four-lane training runtime and its lock-step baseline.
//!
//! Per node, every rollout worker runs a sampler lane (A) and a weight
//! receive lane (B); every actor rank runs a trainer lane (C); one
//! distribution lane (D) broadcasts new versions. Lanes share only immutable
//! snapshots, bounded data channels, weight mailboxes and progress counters.
//!
//! Costs are synthetic. In virtual-time mode each lane books them on its own
//! clock and timestamps travel with the messages, which makes a run's timing
//! deterministic; in real-time mode the costs are burned on the CPU.

pub mod board;
pub mod clock;
pub mod cost;
mod lanes;
pub mod reduce;
pub mod report;
pub mod run;
pub mod shutdown;
pub mod watchdog;

pub use report::{barrier_free_handoff_audit, throughput, BubbleStats, EpochReport, LaneSpan};
pub use run::{run, run_config, run_with, FaultPlan, RunOptions, RunResult};
pub use watchdog::{LaneId, LaneRef};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RuntimeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(
        "watchdog: {lane} silent for {silent_secs:.1}s at epoch {epoch}\nlane states:\n{dump}"
    )]
    Watchdog {
        lane: LaneRef,
        epoch: u64,
        silent_secs: f64,
        dump: String,
    },
    #[error("non-finite update on {lane} at epoch {epoch}: {detail}")]
    NanUpdate {
        lane: LaneRef,
        epoch: u64,
        detail: String,
    },
    #[error("staleness violation on {lane} at epoch {epoch}: trainer v{trainer}, behavior v{behavior}, limit {limit}")]
    Staleness {
        lane: LaneRef,
        epoch: u64,
        trainer: u64,
        behavior: u64,
        limit: u64,
    },
    #[error("{lane} failed at epoch {epoch}: {detail}")]
    Lane {
        lane: LaneRef,
        epoch: u64,
        detail: String,
    },
    /// A lane stopped because another lane failed.
    #[error("run aborted")]
    Aborted,
}
