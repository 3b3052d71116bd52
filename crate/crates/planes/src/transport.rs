//! Transports: zero-copy handle passing or serialized bytes, with a link
//! delay model and copy/byte counters.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use swimlane_core::placement::{LinkProfile, TransportKind};

use crate::msg::{Plane, PlaneMessage};
use crate::PlaneError;

/// Message body as it travels through a channel.
#[derive(Debug, Clone)]
pub enum Payload<M> {
    /// Shared handle; the consumer sees the producer's allocation.
    Shared(Arc<M>),
    /// Wire-format bytes.
    Encoded(Arc<[u8]>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TransportCounters {
    pub copies: u64,
    pub bytes: u64,
    pub messages: u64,
}

#[derive(Debug)]
pub struct Transport {
    plane: Plane,
    mode: TransportKind,
    link: Mutex<LinkProfile>,
    pace: AtomicBool,
    copies: AtomicU64,
    bytes: AtomicU64,
    messages: AtomicU64,
}

impl Transport {
    pub fn new(plane: Plane, mode: TransportKind) -> Arc<Self> {
        Arc::new(Self {
            plane,
            mode,
            link: Mutex::new(LinkProfile::unlimited()),
            pace: AtomicBool::new(false),
            copies: AtomicU64::new(0),
            bytes: AtomicU64::new(0),
            messages: AtomicU64::new(0),
        })
    }

    pub fn with_link(plane: Plane, mode: TransportKind, link: LinkProfile) -> Arc<Self> {
        let t = Self::new(plane, mode);
        *t.link.lock() = link;
        t
    }

    pub fn plane(&self) -> Plane {
        self.plane
    }

    pub fn mode(&self) -> TransportKind {
        self.mode
    }

    /// Sets the link model. Only Wire transports are affected.
    pub fn inject_link_profile(&self, latency_us: f64, bandwidth_bps: Option<f64>) {
        *self.link.lock() = LinkProfile {
            latency_us: latency_us.max(0.0),
            bandwidth_bps,
        };
    }

    pub fn link(&self) -> LinkProfile {
        *self.link.lock()
    }

    /// When set, receivers sleep until a message's real-time release instant.
    pub fn set_pacing(&self, on: bool) {
        self.pace.store(on, Ordering::Relaxed);
    }

    pub fn pacing(&self) -> bool {
        self.pace.load(Ordering::Relaxed)
    }

    /// Delivery delay of a message of `bytes`, ns. Zero for InProc.
    pub fn delay_ns(&self, bytes: u64) -> u64 {
        match self.mode {
            TransportKind::InProc => 0,
            TransportKind::Wire => self.link.lock().delay_ns(bytes),
        }
    }

    pub fn counters(&self) -> TransportCounters {
        TransportCounters {
            copies: self.copies.load(Ordering::Relaxed),
            bytes: self.bytes.load(Ordering::Relaxed),
            messages: self.messages.load(Ordering::Relaxed),
        }
    }

    pub(crate) fn check_plane<M: PlaneMessage>(&self) -> Result<(), PlaneError> {
        if self.plane != M::PLANE {
            return Err(PlaneError::PlaneMismatch {
                expected: M::PLANE,
                got: self.plane,
            });
        }
        Ok(())
    }

    /// Prepares a message for sending; returns the payload and its size.
    ///
    /// Wire mode serializes (one copy). InProc passes the handle through.
    pub fn pack<M: PlaneMessage>(&self, msg: Arc<M>) -> Result<(Payload<M>, u64), PlaneError> {
        self.check_plane::<M>()?;
        self.messages.fetch_add(1, Ordering::Relaxed);
        match self.mode {
            TransportKind::InProc => Ok((Payload::Shared(msg), 0)),
            TransportKind::Wire => {
                let bytes = msg.encode()?;
                let n = bytes.len() as u64;
                self.copies.fetch_add(1, Ordering::Relaxed);
                self.bytes.fetch_add(n, Ordering::Relaxed);
                Ok((Payload::Encoded(bytes.into()), n))
            }
        }
    }

    /// Recovers the message. Wire mode deserializes (one copy).
    pub fn unpack<M: PlaneMessage>(&self, payload: Payload<M>) -> Result<Arc<M>, PlaneError> {
        match payload {
            Payload::Shared(m) => Ok(m),
            Payload::Encoded(bytes) => {
                self.copies.fetch_add(1, Ordering::Relaxed);
                Ok(Arc::new(M::decode(&bytes)?))
            }
        }
    }
}

/// Byte counters of the link between two nodes, split by traffic class.
#[derive(Debug, Default)]
pub struct InterNodeCounters {
    data: AtomicU64,
    control: AtomicU64,
    gradient: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InterNodeBytes {
    pub data: u64,
    pub control: u64,
    pub gradient: u64,
}

impl InterNodeCounters {
    pub fn record(&self, plane: Plane, bytes: u64) {
        let c = match plane {
            Plane::Data => &self.data,
            Plane::Control => &self.control,
            Plane::Gradient => &self.gradient,
        };
        c.fetch_add(bytes, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> InterNodeBytes {
        InterNodeBytes {
            data: self.data.load(Ordering::Relaxed),
            control: self.control.load(Ordering::Relaxed),
            gradient: self.gradient.load(Ordering::Relaxed),
        }
    }
}
