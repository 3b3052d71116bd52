//! Weight broadcast with per-subscriber mailboxes.
//!
//! Versions are strictly increasing. A mailbox keeps at most `depth` pending
//! snapshots and drops the oldest when full, so a depth of 1 is latest-wins.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use swimlane_core::ParamSnapshot;

use crate::channel::{deliver, envelope, Delivered, Envelope};
use crate::msg::ControlPlaneMsg;
use crate::transport::Transport;
use crate::PlaneError;

#[derive(Debug)]
struct MailboxState {
    entries: VecDeque<(u64, Envelope<ControlPlaneMsg>)>,
    depth: usize,
    closed: bool,
    dropped: u64,
}

#[derive(Debug)]
struct Mailbox {
    state: Mutex<MailboxState>,
    cv: Condvar,
}

impl Mailbox {
    fn put(&self, version: u64, env: Envelope<ControlPlaneMsg>) {
        let mut s = self.state.lock();
        while s.entries.len() >= s.depth {
            s.entries.pop_front();
            s.dropped += 1;
        }
        s.entries.push_back((version, env));
        drop(s);
        self.cv.notify_all();
    }

    fn close(&self) {
        self.state.lock().closed = true;
        self.cv.notify_all();
    }
}

#[derive(Debug)]
struct Inner {
    subs: Vec<Arc<Mailbox>>,
    last: Option<u64>,
}

#[derive(Debug)]
pub struct ControlPlane {
    transport: Arc<Transport>,
    inner: Mutex<Inner>,
}

/// Receiving end held by one rollout worker.
#[derive(Debug)]
pub struct Subscription {
    id: u32,
    mailbox: Arc<Mailbox>,
    transport: Arc<Transport>,
}

impl ControlPlane {
    pub fn new(transport: Arc<Transport>) -> Result<Self, PlaneError> {
        transport.check_plane::<ControlPlaneMsg>()?;
        Ok(Self {
            transport,
            inner: Mutex::new(Inner {
                subs: Vec::new(),
                last: None,
            }),
        })
    }

    pub fn transport(&self) -> &Arc<Transport> {
        &self.transport
    }

    pub fn subscribe(&self, depth: usize) -> Subscription {
        let mailbox = Arc::new(Mailbox {
            state: Mutex::new(MailboxState {
                entries: VecDeque::new(),
                depth: depth.max(1),
                closed: false,
                dropped: 0,
            }),
            cv: Condvar::new(),
        });
        let mut inner = self.inner.lock();
        let id = inner.subs.len() as u32;
        inner.subs.push(mailbox.clone());
        Subscription {
            id,
            mailbox,
            transport: self.transport.clone(),
        }
    }

    pub fn subscribers(&self) -> usize {
        self.inner.lock().subs.len()
    }

    pub fn last_version(&self) -> Option<u64> {
        self.inner.lock().last
    }

    /// Sends `snapshot` to every subscriber. On a Wire transport each
    /// subscriber gets its own serialized copy. Returns total bytes sent.
    pub fn broadcast(&self, snapshot: &ParamSnapshot, sent_vt: u64) -> Result<u64, PlaneError> {
        let mut inner = self.inner.lock();
        let version = snapshot.version();
        if let Some(last) = inner.last {
            if version <= last {
                return Err(PlaneError::VersionRegression { last, got: version });
            }
        }
        let msg = Arc::new(ControlPlaneMsg {
            snapshot: snapshot.clone(),
        });
        let mut total = 0;
        for (i, mb) in inner.subs.iter().enumerate() {
            let env = envelope(&self.transport, 0, i as u64, msg.clone(), sent_vt)?;
            total += env.bytes;
            mb.put(version, env);
        }
        inner.last = Some(version);
        Ok(total)
    }

    /// Wakes every subscriber; pending snapshots stay readable.
    pub fn close(&self) {
        for mb in &self.inner.lock().subs {
            mb.close();
        }
    }
}

impl Subscription {
    pub fn id(&self) -> u32 {
        self.id
    }

    /// Snapshots discarded because the mailbox was full.
    pub fn dropped(&self) -> u64 {
        self.mailbox.state.lock().dropped
    }

    pub fn pending(&self) -> usize {
        self.mailbox.state.lock().entries.len()
    }

    /// Newest pending version without consuming anything.
    pub fn peek_version(&self) -> Option<u64> {
        self.mailbox.state.lock().entries.back().map(|(v, _)| *v)
    }

    fn wait_nonempty(
        &self,
        timeout: Option<Duration>,
    ) -> Result<Vec<Envelope<ControlPlaneMsg>>, PlaneError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut s = self.mailbox.state.lock();
        loop {
            if !s.entries.is_empty() {
                return Ok(s.entries.drain(..).map(|(_, e)| e).collect());
            }
            if s.closed {
                return Err(PlaneError::Closed);
            }
            match deadline {
                None => self.mailbox.cv.wait(&mut s),
                Some(d) => {
                    if self.mailbox.cv.wait_until(&mut s, d).timed_out() && s.entries.is_empty() {
                        return if s.closed {
                            Err(PlaneError::Closed)
                        } else {
                            Ok(Vec::new())
                        };
                    }
                }
            }
        }
    }

    /// Drains every pending snapshot in version order. Blocks until at least
    /// one is available; an empty result means the timeout elapsed.
    pub fn recv_all(
        &self,
        timeout: Option<Duration>,
    ) -> Result<Vec<Delivered<ControlPlaneMsg>>, PlaneError> {
        self.wait_nonempty(timeout)?
            .into_iter()
            .map(|e| deliver(&self.transport, e))
            .collect()
    }

    /// Blocks for the newest snapshot, discarding older pending ones.
    pub fn recv_latest(
        &self,
        timeout: Option<Duration>,
    ) -> Result<Option<Delivered<ControlPlaneMsg>>, PlaneError> {
        let mut envs = self.wait_nonempty(timeout)?;
        match envs.pop() {
            Some(e) => deliver(&self.transport, e).map(Some),
            None => Ok(None),
        }
    }

    pub fn try_recv_latest(&self) -> Result<Option<Delivered<ControlPlaneMsg>>, PlaneError> {
        let env = {
            let mut s = self.mailbox.state.lock();
            let last = s.entries.pop_back();
            s.entries.clear();
            match last {
                Some((_, e)) => e,
                None if s.closed => return Err(PlaneError::Closed),
                None => return Ok(None),
            }
        };
        deliver(&self.transport, env).map(Some)
    }
}
