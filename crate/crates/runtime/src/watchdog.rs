//! Per-lane heartbeats and the watchdog that aborts a stuck run.
//!
//! Lanes beat when they make progress, not while they wait, so a lane stuck
//! behind a deadlock goes silent. When any live lane stays silent past the
//! timeout the run aborts with a dump of every lane's last state.

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel as cb;
use serde::{Deserialize, Serialize};

use crate::shutdown::Shutdown;
use crate::RuntimeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneId {
    /// Lane A: steps the envs with the installed snapshot.
    Sampler,
    /// Lane B: receives broadcasts and stages them.
    WeightRecv,
    /// Lane C: consumes trajectories and updates the policy.
    Trainer,
    /// Lane D: broadcasts new versions.
    WeightDist,
}

impl fmt::Display for LaneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sampler => "sampler",
            Self::WeightRecv => "weight-recv",
            Self::Trainer => "trainer",
            Self::WeightDist => "weight-dist",
        })
    }
}

/// One lane instance: node, lane kind and worker/rank index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LaneRef {
    pub node: u32,
    pub lane: LaneId,
    pub index: u32,
}

impl fmt::Display for LaneRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node{}/{}{}", self.node, self.lane, self.index)
    }
}

/// What a lane was last doing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum LaneState {
    Starting = 0,
    Gate,
    Sampling,
    Enqueue,
    Receiving,
    Computing,
    Reducing,
    Broadcasting,
    Done,
}

impl LaneState {
    /// Blocked on another lane rather than doing work.
    pub fn is_waiting(self) -> bool {
        use LaneState::*;
        matches!(self, Starting | Gate | Enqueue | Receiving | Reducing)
    }

    fn from_u8(v: u8) -> Self {
        use LaneState::*;
        [
            Starting,
            Gate,
            Sampling,
            Enqueue,
            Receiving,
            Computing,
            Reducing,
            Broadcasting,
            Done,
        ]
        .get(v as usize)
        .copied()
        .unwrap_or(Starting)
    }
}

#[derive(Debug)]
struct Slot {
    lane: LaneRef,
    last_ms: AtomicU64,
    epoch: AtomicU64,
    state: AtomicU8,
}

#[derive(Debug)]
pub struct Heartbeats {
    origin: Instant,
    slots: Vec<Slot>,
}

impl Heartbeats {
    pub fn new(lanes: &[LaneRef]) -> Arc<Self> {
        Arc::new(Self {
            origin: Instant::now(),
            slots: lanes
                .iter()
                .map(|&lane| Slot {
                    lane,
                    last_ms: AtomicU64::new(0),
                    epoch: AtomicU64::new(0),
                    state: AtomicU8::new(LaneState::Starting as u8),
                })
                .collect(),
        })
    }

    pub fn handle(self: &Arc<Self>, lane: LaneRef) -> Beat {
        let idx = self
            .slots
            .iter()
            .position(|s| s.lane == lane)
            .expect("lane registered");
        Beat {
            hb: self.clone(),
            idx,
            quiet: Arc::new(AtomicBool::new(false)),
        }
    }

    fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }

    /// Text table of every lane's last state.
    pub fn dump(&self) -> String {
        let now = self.now_ms();
        let mut out = String::new();
        for s in &self.slots {
            let state = LaneState::from_u8(s.state.load(Ordering::Relaxed));
            out.push_str(&format!(
                "  {:<24} epoch {:>5}  {:<12} silent {:.1}s\n",
                s.lane.to_string(),
                s.epoch.load(Ordering::Relaxed),
                format!("{state:?}"),
                (now.saturating_sub(s.last_ms.load(Ordering::Relaxed))) as f64 / 1e3
            ));
        }
        out
    }

    /// The lane to blame, if any: a working lane silent past `timeout`, or,
    /// when no lane at all has made progress for `timeout`, the one silent
    /// longest.
    fn stalest(&self, timeout: Duration) -> Option<(&Slot, f64)> {
        let now = self.now_ms();
        let live: Vec<(&Slot, LaneState, f64)> = self
            .slots
            .iter()
            .map(|s| {
                let silent = now.saturating_sub(s.last_ms.load(Ordering::Relaxed)) as f64 / 1e3;
                (
                    s,
                    LaneState::from_u8(s.state.load(Ordering::Relaxed)),
                    silent,
                )
            })
            .filter(|(_, st, _)| *st != LaneState::Done)
            .collect();
        let limit = timeout.as_secs_f64();
        let pick = |working_only: bool| {
            live.iter()
                .filter(|(_, st, t)| !(working_only && st.is_waiting()) && *t >= limit)
                .max_by(|a, b| a.2.total_cmp(&b.2))
                .map(|&(s, _, t)| (s, t))
        };
        if let Some(hung) = pick(true) {
            return Some(hung);
        }
        if !live.is_empty() && live.iter().all(|(_, _, t)| *t >= limit) {
            return pick(false);
        }
        None
    }
}

/// A lane's handle on its heartbeat slot.
#[derive(Debug, Clone)]
pub struct Beat {
    hb: Arc<Heartbeats>,
    idx: usize,
    quiet: Arc<AtomicBool>,
}

impl Beat {
    pub fn beat(&self, state: LaneState, epoch: u64) {
        if self.quiet.load(Ordering::Relaxed) {
            return;
        }
        let s = &self.hb.slots[self.idx];
        s.state.store(state as u8, Ordering::Relaxed);
        s.epoch.store(epoch, Ordering::Relaxed);
        s.last_ms.store(self.hb.now_ms(), Ordering::Relaxed);
    }

    pub fn done(&self) {
        let s = &self.hb.slots[self.idx];
        s.state.store(LaneState::Done as u8, Ordering::Relaxed);
    }

    /// Stops further beats; used by fault injection to simulate a hung lane.
    pub fn silence(&self) {
        self.quiet.store(true, Ordering::Relaxed);
    }

    pub fn lane(&self) -> LaneRef {
        self.hb.slots[self.idx].lane
    }
}

/// Polls the heartbeats until `stop` fires or a lane stalls.
pub fn watch(hb: &Heartbeats, timeout: Duration, shutdown: &Shutdown, stop: &cb::Receiver<()>) {
    let tick = (timeout / 4).clamp(Duration::from_millis(5), Duration::from_millis(250));
    loop {
        cb::select! {
            recv(stop) -> _ => return,
            default(tick) => {
                if shutdown.is_set() {
                    return;
                }
                if let Some((slot, silent)) = hb.stalest(timeout) {
                    let err = RuntimeError::Watchdog {
                        lane: slot.lane,
                        epoch: slot.epoch.load(Ordering::Relaxed),
                        silent_secs: silent,
                        dump: hb.dump(),
                    };
                    tracing::error!("{err}");
                    shutdown.trigger(Some(err));
                    return;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lanes() -> Vec<LaneRef> {
        [LaneId::Sampler, LaneId::Trainer]
            .into_iter()
            .map(|lane| LaneRef {
                node: 0,
                lane,
                index: 0,
            })
            .collect()
    }

    #[test]
    fn a_silent_working_lane_is_blamed() {
        let l = lanes();
        let hb = Heartbeats::new(&l);
        let (s, t) = (hb.handle(l[0]), hb.handle(l[1]));
        t.beat(LaneState::Computing, 3);
        s.beat(LaneState::Gate, 4);
        std::thread::sleep(Duration::from_millis(30));
        s.beat(LaneState::Gate, 4);
        let (slot, _) = hb.stalest(Duration::from_millis(20)).unwrap();
        assert_eq!(slot.lane, l[1]);
    }

    #[test]
    fn waiting_lanes_are_fine_while_something_progresses() {
        let l = lanes();
        let hb = Heartbeats::new(&l);
        let (s, t) = (hb.handle(l[0]), hb.handle(l[1]));
        s.beat(LaneState::Gate, 1);
        t.beat(LaneState::Computing, 0);
        std::thread::sleep(Duration::from_millis(30));
        t.beat(LaneState::Computing, 0);
        assert!(hb.stalest(Duration::from_millis(20)).is_none());
        t.done();
        std::thread::sleep(Duration::from_millis(30));
        // everything left is waiting and silent: a deadlock
        assert_eq!(hb.stalest(Duration::from_millis(20)).unwrap().0.lane, l[0]);
    }
}
