//! Shared progress state: the trainer's per-epoch outcomes and pop times
//! (one board per node), and the snapshot staging area of each rollout
//! worker.

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::{Condvar, Mutex};
use swimlane_core::PolicyParams;

use crate::shutdown::{Shutdown, TICK};
use crate::RuntimeError;

/// What the trainer did with one epoch of data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Updated { version: u64, publish_vt: u64 },
    Quarantined { publish_vt: u64 },
}

#[derive(Debug, Default)]
struct BoardState {
    resolved: Vec<Resolution>,
    pops: Vec<Vec<Option<u64>>>,
    latest: u64,
}

#[derive(Debug)]
pub struct Board {
    ranks: usize,
    state: Mutex<BoardState>,
    cv: Condvar,
    shutdown: Arc<Shutdown>,
}

impl Board {
    pub fn new(ranks: usize, shutdown: Arc<Shutdown>) -> Self {
        Self {
            ranks,
            state: Mutex::new(BoardState::default()),
            cv: Condvar::new(),
            shutdown,
        }
    }

    fn wait<T>(&self, mut ready: impl FnMut(&BoardState) -> Option<T>) -> Result<T, RuntimeError> {
        let mut s = self.state.lock();
        loop {
            if let Some(v) = ready(&s) {
                return Ok(v);
            }
            if self.shutdown.is_set() {
                return Err(RuntimeError::Aborted);
            }
            self.cv.wait_for(&mut s, TICK);
        }
    }

    /// Records the outcome of `epoch`. Epochs resolve in order.
    pub fn resolve(&self, epoch: u64, r: Resolution) {
        let mut s = self.state.lock();
        assert_eq!(s.resolved.len() as u64, epoch, "epochs resolve in order");
        if let Resolution::Updated { version, .. } = r {
            s.latest = version;
        }
        s.resolved.push(r);
        drop(s);
        self.cv.notify_all();
    }

    /// Newest published version.
    pub fn latest_version(&self) -> u64 {
        self.state.lock().latest
    }

    pub fn resolutions(&self) -> Vec<Resolution> {
        self.state.lock().resolved.clone()
    }

    /// Parameter version after the trainer has consumed epochs `0..epochs`.
    /// Blocks until those epochs are resolved.
    pub fn version_after(&self, epochs: u64) -> Result<u64, RuntimeError> {
        self.wait(|s| {
            (s.resolved.len() as u64 >= epochs).then(|| {
                s.resolved[..epochs as usize]
                    .iter()
                    .filter(|r| matches!(r, Resolution::Updated { .. }))
                    .count() as u64
            })
        })
    }

    /// Blocks until `version` is published (true) or epochs `0..epochs` are
    /// resolved without reaching it (false).
    pub fn wait_version_or_resolved(
        &self,
        version: u64,
        epochs: u64,
    ) -> Result<bool, RuntimeError> {
        self.wait(|s| {
            if s.latest >= version {
                Some(true)
            } else if s.resolved.len() as u64 >= epochs {
                Some(false)
            } else {
                None
            }
        })
    }

    pub fn record_pop(&self, epoch: u64, rank: usize, vt: u64) {
        let mut s = self.state.lock();
        let e = epoch as usize;
        if s.pops.len() <= e {
            let ranks = self.ranks;
            s.pops.resize_with(e + 1, || vec![None; ranks]);
        }
        s.pops[e][rank] = Some(vt);
        drop(s);
        self.cv.notify_all();
    }

    /// Time at which every local rank has popped `epoch`.
    pub fn wait_pop(&self, epoch: u64) -> Result<u64, RuntimeError> {
        self.wait(|s| {
            let row = s.pops.get(epoch as usize)?;
            row.iter().try_fold(0u64, |m, p| p.map(|p| m.max(p)))
        })
    }
}

/// A snapshot received by a worker's weight lane.
#[derive(Debug, Clone)]
pub struct Staged {
    pub version: u64,
    pub params: Arc<PolicyParams>,
    /// Time the snapshot reached the worker.
    pub release_vt: u64,
}

#[derive(Debug)]
struct StagingState {
    pending: BTreeMap<u64, Staged>,
    /// Version currently installed by the sampler.
    floor: u64,
    closed: bool,
    ignored: u64,
}

/// Snapshots received but not yet installed.
#[derive(Debug)]
pub struct Staging {
    state: Mutex<StagingState>,
    cv: Condvar,
    shutdown: Arc<Shutdown>,
}

impl Staging {
    pub fn new(shutdown: Arc<Shutdown>) -> Self {
        Self {
            state: Mutex::new(StagingState {
                pending: BTreeMap::new(),
                floor: 0,
                closed: false,
                ignored: 0,
            }),
            cv: Condvar::new(),
            shutdown,
        }
    }

    /// Stages a snapshot for the next epoch boundary. A version at or below
    /// one already installed or staged is ignored with a warning.
    pub fn install_weights(&self, s: Staged) -> bool {
        let mut st = self.state.lock();
        let newest = st.pending.keys().next_back().copied().unwrap_or(st.floor);
        if s.version <= newest.max(st.floor) {
            st.ignored += 1;
            tracing::warn!(got = s.version, newest, "ignoring stale weight broadcast");
            return false;
        }
        st.pending.insert(s.version, s);
        drop(st);
        self.cv.notify_all();
        true
    }

    /// Broadcasts that were ignored as regressions.
    pub fn ignored(&self) -> u64 {
        self.state.lock().ignored
    }

    pub fn close(&self) {
        self.state.lock().closed = true;
        self.cv.notify_all();
    }

    /// Blocks until some version `>= version` is staged and returns the
    /// oldest such version with its arrival time.
    pub fn wait_version(&self, version: u64) -> Result<(u64, u64), RuntimeError> {
        let mut st = self.state.lock();
        loop {
            if let Some((v, s)) = st.pending.range(version..).next() {
                return Ok((*v, s.release_vt));
            }
            if st.closed || self.shutdown.is_set() {
                return Err(RuntimeError::Aborted);
            }
            self.cv.wait_for(&mut st, TICK);
        }
    }

    /// Removes every snapshot that arrived by `at` and returns the newest.
    fn take_arrived(&self, at: u64) -> Option<Staged> {
        let mut st = self.state.lock();
        let newest = st
            .pending
            .values()
            .filter(|s| s.release_vt <= at)
            .map(|s| s.version)
            .max()?;
        let rest = st.pending.split_off(&(newest + 1));
        let chosen = st.pending.remove(&newest);
        st.pending = rest;
        st.floor = newest;
        chosen
    }
}

/// The sampler's installed weights. Swaps happen only in
/// [`WeightSlot::begin_epoch`], so an epoch samples with a single version.
#[derive(Debug)]
pub struct WeightSlot {
    current: Staged,
    staging: Arc<Staging>,
}

impl WeightSlot {
    pub fn new(initial: Staged, staging: Arc<Staging>) -> Self {
        staging.state.lock().floor = initial.version;
        Self {
            current: initial,
            staging,
        }
    }

    pub fn current(&self) -> &Staged {
        &self.current
    }

    pub fn version(&self) -> u64 {
        self.current.version
    }

    /// Installs the newest snapshot that arrived by `at`. Never blocks.
    /// Returns the installed version.
    pub fn begin_epoch(&mut self, at: u64) -> u64 {
        if let Some(s) = self.staging.take_arrived(at) {
            self.current = s;
        }
        self.current.version
    }
}
