//! Bounded multi-producer/single-consumer channel over a transport.
//!
//! A full channel blocks the producer; nothing is dropped. Messages from one
//! producer arrive in publish order.

use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel as cb;

use crate::msg::PlaneMessage;
use crate::transport::{Payload, Transport};
use crate::PlaneError;

#[derive(Debug)]
pub struct Envelope<M> {
    pub producer: u32,
    pub seq: u64,
    /// Virtual send time, ns.
    pub sent_vt: u64,
    /// Virtual time at which the message may be consumed, ns.
    pub release_vt: u64,
    release_at: Instant,
    pub bytes: u64,
    payload: Payload<M>,
}

/// A message handed to the consumer.
#[derive(Debug, Clone)]
pub struct Delivered<M> {
    pub producer: u32,
    pub seq: u64,
    pub sent_vt: u64,
    pub release_vt: u64,
    pub bytes: u64,
    pub msg: Arc<M>,
}

/// Stamps, packs and (for the receiver) paces messages.
pub(crate) fn envelope<M: PlaneMessage>(
    transport: &Transport,
    producer: u32,
    seq: u64,
    msg: Arc<M>,
    sent_vt: u64,
) -> Result<Envelope<M>, PlaneError> {
    let (payload, bytes) = transport.pack(msg)?;
    let delay = transport.delay_ns(bytes);
    Ok(Envelope {
        producer,
        seq,
        sent_vt,
        release_vt: sent_vt + delay,
        release_at: Instant::now() + Duration::from_nanos(delay),
        bytes,
        payload,
    })
}

pub(crate) fn deliver<M: PlaneMessage>(
    transport: &Transport,
    env: Envelope<M>,
) -> Result<Delivered<M>, PlaneError> {
    if transport.pacing() {
        let now = Instant::now();
        if env.release_at > now {
            std::thread::sleep(env.release_at - now);
        }
    }
    Ok(Delivered {
        producer: env.producer,
        seq: env.seq,
        sent_vt: env.sent_vt,
        release_vt: env.release_vt,
        bytes: env.bytes,
        msg: transport.unpack(env.payload)?,
    })
}

pub struct PlaneSender<M> {
    tx: cb::Sender<Envelope<M>>,
    transport: Arc<Transport>,
    producer: u32,
    seq: u64,
}

impl<M> Clone for PlaneSender<M> {
    fn clone(&self) -> Self {
        Self {
            tx: self.tx.clone(),
            transport: self.transport.clone(),
            producer: self.producer,
            seq: 0,
        }
    }
}

pub struct PlaneReceiver<M> {
    rx: cb::Receiver<Envelope<M>>,
    transport: Arc<Transport>,
}

/// Creates a bounded channel of `capacity` messages on `transport`.
pub fn channel<M: PlaneMessage>(
    transport: Arc<Transport>,
    capacity: usize,
) -> Result<(PlaneSender<M>, PlaneReceiver<M>), PlaneError> {
    transport.check_plane::<M>()?;
    let (tx, rx) = cb::bounded(capacity.max(1));
    Ok((
        PlaneSender {
            tx,
            transport: transport.clone(),
            producer: 0,
            seq: 0,
        },
        PlaneReceiver { rx, transport },
    ))
}

impl<M: PlaneMessage> PlaneSender<M> {
    /// Handle for another producer. Sequence numbers are per producer.
    pub fn for_producer(&self, producer: u32) -> Self {
        Self {
            producer,
            ..self.clone()
        }
    }

    pub fn producer(&self) -> u32 {
        self.producer
    }

    pub fn transport(&self) -> &Arc<Transport> {
        &self.transport
    }

    /// Blocks while the channel is full. Returns the virtual release time.
    pub fn publish(&mut self, msg: Arc<M>, sent_vt: u64) -> Result<u64, PlaneError> {
        let env = envelope(&self.transport, self.producer, self.seq, msg, sent_vt)?;
        let release = env.release_vt;
        self.tx.send(env).map_err(|_| PlaneError::Closed)?;
        self.seq += 1;
        Ok(release)
    }

    /// Like [`Self::publish`] but gives up after `timeout`.
    pub fn publish_timeout(
        &mut self,
        msg: Arc<M>,
        sent_vt: u64,
        timeout: Duration,
    ) -> Result<u64, PlaneError> {
        let env = envelope(&self.transport, self.producer, self.seq, msg, sent_vt)?;
        let release = env.release_vt;
        match self.tx.send_timeout(env, timeout) {
            Ok(()) => {
                self.seq += 1;
                Ok(release)
            }
            Err(cb::SendTimeoutError::Timeout(_)) => Err(PlaneError::Full),
            Err(cb::SendTimeoutError::Disconnected(_)) => Err(PlaneError::Closed),
        }
    }

    /// Non-blocking publish; `Full` when the channel is at capacity.
    pub fn try_publish(&mut self, msg: Arc<M>, sent_vt: u64) -> Result<u64, PlaneError> {
        self.publish_timeout(msg, sent_vt, Duration::ZERO)
    }

    pub fn len(&self) -> usize {
        self.tx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tx.is_empty()
    }
}

impl<M: PlaneMessage> PlaneReceiver<M> {
    /// Blocks until a message arrives or every sender is gone.
    pub fn recv(&self) -> Result<Delivered<M>, PlaneError> {
        let env = self.rx.recv().map_err(|_| PlaneError::Closed)?;
        deliver(&self.transport, env)
    }

    /// `Ok(None)` on timeout.
    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Delivered<M>>, PlaneError> {
        match self.rx.recv_timeout(timeout) {
            Ok(env) => deliver(&self.transport, env).map(Some),
            Err(cb::RecvTimeoutError::Timeout) => Ok(None),
            Err(cb::RecvTimeoutError::Disconnected) => Err(PlaneError::Closed),
        }
    }

    /// Waits for a message or a shutdown signal, whichever comes first.
    pub fn recv_or_shutdown(
        &self,
        shutdown: &cb::Receiver<()>,
    ) -> Result<Option<Delivered<M>>, PlaneError> {
        cb::select! {
            recv(self.rx) -> env => match env {
                Ok(env) => deliver(&self.transport, env).map(Some),
                Err(_) => Err(PlaneError::Closed),
            },
            recv(shutdown) -> _ => Ok(None),
        }
    }

    pub fn transport(&self) -> &Arc<Transport> {
        &self.transport
    }

    pub fn len(&self) -> usize {
        self.rx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rx.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.rx.capacity().unwrap_or(usize::MAX)
    }
}
