//! Run-wide abort signal.
//!
//! Blocking channel receives select on [`Shutdown::receiver`], which becomes
//! ready once the sender is dropped. Condition-variable waits use a short
//! tick and re-check [`Shutdown::is_set`].

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel as cb;
use parking_lot::Mutex;

use crate::RuntimeError;

/// Re-check interval of condition-variable waits.
pub(crate) const TICK: Duration = Duration::from_millis(20);

#[derive(Debug)]
pub struct Shutdown {
    flag: AtomicBool,
    tx: Mutex<Option<cb::Sender<()>>>,
    rx: cb::Receiver<()>,
    reason: Mutex<Option<RuntimeError>>,
}

impl Shutdown {
    pub fn new() -> Arc<Self> {
        let (tx, rx) = cb::bounded(0);
        Arc::new(Self {
            flag: AtomicBool::new(false),
            tx: Mutex::new(Some(tx)),
            rx,
            reason: Mutex::new(None),
        })
    }

    pub fn is_set(&self) -> bool {
        self.flag.load(Ordering::Acquire)
    }

    /// Stops every lane. The first recorded reason is kept.
    pub fn trigger(&self, reason: Option<RuntimeError>) {
        if let Some(r) = reason {
            let mut slot = self.reason.lock();
            if slot.is_none() {
                *slot = Some(r);
            }
        }
        self.flag.store(true, Ordering::Release);
        self.tx.lock().take();
    }

    pub fn receiver(&self) -> &cb::Receiver<()> {
        &self.rx
    }

    pub fn take_reason(&self) -> Option<RuntimeError> {
        self.reason.lock().take()
    }
}
