//! Message types of the two planes.
//!
//! Data and control messages are distinct types, and each plane's channel is
//! typed by its message, so a trajectory can never travel on the weight path
//! or the other way round.

use swimlane_core::{GroupBatch, ParamSnapshot};

use crate::wire::MsgType;

/// Groups produced under one policy version.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub policy_version: u64,
    pub groups: Vec<GroupBatch>,
}

impl TrajectoryBatch {
    pub fn transitions(&self) -> u64 {
        self.groups.iter().map(|g| g.transitions()).sum()
    }
}

/// Ordered key/value table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Metadata {
    pub entries: Vec<(String, String)>,
}

impl Metadata {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn with(mut self, key: impl Into<String>, val: impl ToString) -> Self {
        self.entries.push((key.into(), val.to_string()));
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataPlaneMsg {
    TrajectoryBatch(TrajectoryBatch),
    Metadata(Metadata),
    Ack { epoch_id: u64 },
}

impl DataPlaneMsg {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Self::TrajectoryBatch(_) => MsgType::TrajectoryBatch,
            Self::Metadata(_) => MsgType::Metadata,
            Self::Ack { .. } => MsgType::Ack,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControlPlaneMsg {
    pub snapshot: ParamSnapshot,
}

/// Which traffic class a transport carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Plane {
    Data,
    Control,
    /// Cross-node gradient reduction.
    Gradient,
}

/// Implemented by the two plane message types.
pub trait PlaneMessage: Send + Sync + Sized + 'static {
    const PLANE: Plane;
    fn encode(&self) -> Result<Vec<u8>, crate::wire::EncodeError>;
    fn decode(bytes: &[u8]) -> Result<Self, crate::wire::DecodeError>;
}

impl PlaneMessage for DataPlaneMsg {
    const PLANE: Plane = Plane::Data;

    fn encode(&self) -> Result<Vec<u8>, crate::wire::EncodeError> {
        crate::wire::encode_data(self)
    }

    fn decode(bytes: &[u8]) -> Result<Self, crate::wire::DecodeError> {
        crate::wire::decode_data(bytes)
    }
}

impl PlaneMessage for ControlPlaneMsg {
    const PLANE: Plane = Plane::Control;

    fn encode(&self) -> Result<Vec<u8>, crate::wire::EncodeError> {
        Ok(crate::wire::encode_control(self))
    }

    fn decode(bytes: &[u8]) -> Result<Self, crate::wire::DecodeError> {
        crate::wire::decode_control(bytes)
    }
}
