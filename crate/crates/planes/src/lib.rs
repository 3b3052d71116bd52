//! Communication planes between rollout workers and the trainer.
//!
//! The data plane carries trajectories from many producers to the trainer
//! over bounded channels. The control plane carries weight snapshots from
//! the trainer to every rollout worker. Both share one wire format and can
//! run either as zero-copy handle passing (same process) or as serialized
//! bytes with a simulated link.

pub mod channel;
pub mod control;
pub mod msg;
pub mod socket;
pub mod transport;
pub mod wire;

pub use channel::{channel, Delivered, PlaneReceiver, PlaneSender};
pub use control::{ControlPlane, Subscription};
pub use msg::{ControlPlaneMsg, DataPlaneMsg, Metadata, Plane, PlaneMessage, TrajectoryBatch};
pub use transport::{InterNodeBytes, InterNodeCounters, Payload, Transport, TransportCounters};

pub type DataSender = PlaneSender<DataPlaneMsg>;
pub type DataReceiver = PlaneReceiver<DataPlaneMsg>;

#[derive(Debug, thiserror::Error)]
pub enum PlaneError {
    #[error("channel closed")]
    Closed,
    #[error("channel full")]
    Full,
    #[error("weight version went backwards: last broadcast {last}, got {got}")]
    VersionRegression { last: u64, got: u64 },
    #[error("transport carries {got:?} traffic, message belongs to {expected:?}")]
    PlaneMismatch { expected: Plane, got: Plane },
    #[error("frame of {len} bytes exceeds limit {max}")]
    FrameTooLarge { len: u64, max: u64 },
    #[error(transparent)]
    Encode(#[from] wire::EncodeError),
    #[error(transparent)]
    Decode(#[from] wire::DecodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
