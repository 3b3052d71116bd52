//! Time sources for the lanes.
//!
//! In virtual mode every lane carries its own cursor in nanoseconds and
//! synthetic costs are added to it; nothing sleeps. In real mode costs are
//! burned on the CPU and timestamps come from a shared monotonic origin.

use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy)]
pub enum Clock {
    Virtual,
    Real(Instant),
}

impl Clock {
    pub fn new(virtual_time: bool) -> Self {
        if virtual_time {
            Self::Virtual
        } else {
            Self::Real(Instant::now())
        }
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, Self::Virtual)
    }

    /// Nanoseconds since the run started; 0 in virtual mode.
    pub fn now_ns(&self) -> u64 {
        match self {
            Self::Virtual => 0,
            Self::Real(origin) => origin.elapsed().as_nanos() as u64,
        }
    }

    /// Timestamp of an event that may not happen before `earliest`.
    ///
    /// Virtual mode returns `earliest`; real mode returns the current time,
    /// since the caller has already waited for whatever `earliest` stands for.
    pub fn mark(&self, earliest: u64) -> u64 {
        match self {
            Self::Virtual => earliest,
            Self::Real(_) => self.now_ns(),
        }
    }

    /// Performs `cost_ns` of work starting at `at` and returns the finish time.
    pub fn spend(&self, at: u64, cost_ns: u64) -> u64 {
        match self {
            Self::Virtual => at + cost_ns,
            Self::Real(_) => {
                spin(cost_ns);
                self.now_ns()
            }
        }
    }
}

/// Busy-waits for `ns` nanoseconds.
pub fn spin(ns: u64) {
    if ns == 0 {
        return;
    }
    let deadline = Instant::now() + Duration::from_nanos(ns);
    while Instant::now() < deadline {
        std::hint::spin_loop();
    }
}
