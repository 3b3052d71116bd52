//! The event loop. One node is simulated; replicated nodes run the same
//! timeline because they share the global reduce barrier.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use swimlane_runtime::cost::{split, CostModel};

use crate::SimError;

/// Static inputs of one node's pipeline.
#[derive(Debug, Clone)]
pub(crate) struct Pipeline {
    pub epochs: u64,
    /// Queue bound in epochs; `usize::MAX` for unbounded.
    pub queue: usize,
    /// Staleness limit; `u64::MAX` for unbounded.
    pub staleness: u64,
    /// Rollout time of each worker's epoch.
    pub rollout_ns: Vec<u64>,
    /// Link delay of worker `w`'s shard for rank `r`, `[w][r]`.
    pub transfer_ns: Vec<Vec<u64>>,
    /// Gradient time of each rank.
    pub actor_ns: Vec<u64>,
    pub reduce_ns: u64,
    pub broadcast_ns: u64,
}

impl Pipeline {
    pub fn new(
        cost: &CostModel,
        n_groups: usize,
        workers: usize,
        ranks: usize,
        epochs: u64,
        queue: usize,
        staleness: u64,
    ) -> Self {
        let g = cost.group_size;
        let rank_groups = |r: usize| split(n_groups, ranks, r);
        let overlap = |a: &std::ops::Range<usize>, b: &std::ops::Range<usize>| {
            a.end.min(b.end).saturating_sub(a.start.max(b.start))
        };
        Self {
            epochs,
            queue,
            staleness,
            rollout_ns: (0..workers)
                .map(|w| cost.rollout_ns(split(n_groups, workers, w).len() * g))
                .collect(),
            transfer_ns: (0..workers)
                .map(|w| {
                    let wg = split(n_groups, workers, w);
                    (0..ranks)
                        .map(|r| {
                            cost.data_delay_ns(cost.shard_bytes(overlap(&wg, &rank_groups(r))))
                        })
                        .collect()
                })
                .collect(),
            actor_ns: (0..ranks)
                .map(|r| cost.actor_ns((rank_groups(r).len() * g) as u64 * cost.horizon as u64))
                .collect(),
            reduce_ns: cost.reduce_ns(),
            broadcast_ns: cost.broadcast_delay_ns(),
        }
    }
}

/// Timestamps of one epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct EpochTrace {
    /// Per worker `(start, done, enqueued, behavior version)`.
    pub samples: Vec<(u64, u64, u64, u64)>,
    /// Per rank `(pop, ready)`.
    pub trains: Vec<(u64, u64)>,
    pub transfer: u64,
    pub reduced: u64,
    pub end: u64,
}

// Ties at one timestamp resolve in this order: a snapshot released at t is
// visible to a sampler starting at t.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Release {
        version: u64,
    },
    Reduced {
        epoch: u64,
    },
    Ready {
        rank: usize,
        epoch: u64,
    },
    Arrive {
        worker: usize,
        rank: usize,
        epoch: u64,
    },
    SampleDone {
        worker: usize,
        epoch: u64,
    },
    SamplerFree {
        worker: usize,
    },
    TrainerFree {
        rank: usize,
    },
}

struct Sampler {
    epoch: u64,
    installed: u64,
    busy: bool,
    /// Epoch finished, waiting for queue room.
    pending: Option<(u64, u64)>,
}

struct Trainer {
    epoch: u64,
    busy: bool,
}

pub(crate) struct Engine<'a> {
    p: &'a Pipeline,
    now: u64,
    seq: u64,
    heap: BinaryHeap<Reverse<(u64, Ev, u64)>>,
    samplers: Vec<Sampler>,
    trainers: Vec<Trainer>,
    /// Release time of each version (version 0 at time 0).
    released: Vec<u64>,
    /// `arrived[epoch][rank]` counts worker messages delivered.
    arrived: Vec<Vec<usize>>,
    /// Pop time per epoch per rank.
    pops: Vec<Vec<Option<u64>>>,
    ready: Vec<Vec<Option<u64>>>,
    trace: Vec<EpochTrace>,
    resolved: u64,
}

impl<'a> Engine<'a> {
    pub fn new(p: &'a Pipeline) -> Self {
        let (w, r, e) = (p.rollout_ns.len(), p.actor_ns.len(), p.epochs as usize);
        Self {
            p,
            now: 0,
            seq: 0,
            heap: BinaryHeap::new(),
            samplers: (0..w)
                .map(|_| Sampler {
                    epoch: 0,
                    installed: 0,
                    busy: false,
                    pending: None,
                })
                .collect(),
            trainers: (0..r)
                .map(|_| Trainer {
                    epoch: 0,
                    busy: false,
                })
                .collect(),
            released: vec![0],
            arrived: vec![vec![0; r]; e],
            pops: vec![vec![None; r]; e],
            ready: vec![vec![None; r]; e],
            trace: (0..e)
                .map(|_| EpochTrace {
                    samples: vec![(0, 0, 0, 0); w],
                    trains: vec![(0, 0); r],
                    ..Default::default()
                })
                .collect(),
            resolved: 0,
        }
    }

    fn at(&mut self, t: u64, ev: Ev) {
        self.heap.push(Reverse((t, ev, self.seq)));
        self.seq += 1;
    }

    pub fn run(mut self) -> Result<Vec<EpochTrace>, SimError> {
        for w in 0..self.samplers.len() {
            self.at(0, Ev::SamplerFree { worker: w });
        }
        while let Some(Reverse((t, ev, _))) = self.heap.pop() {
            self.now = t;
            self.handle(ev);
        }
        if self.resolved < self.p.epochs {
            return Err(SimError::Blocked {
                time_ns: self.now,
                state: self.describe(),
            });
        }
        Ok(self.trace)
    }

    fn describe(&self) -> String {
        let mut s = format!("{} of {} epochs resolved;", self.resolved, self.p.epochs);
        for (w, x) in self.samplers.iter().enumerate() {
            s += &format!(
                " sampler{w}: epoch {} v{} busy {} pending {:?};",
                x.epoch, x.installed, x.busy, x.pending
            );
        }
        for (r, x) in self.trainers.iter().enumerate() {
            s += &format!(" trainer{r}: epoch {} busy {};", x.epoch, x.busy);
        }
        s
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::SamplerFree { worker } => self.try_sample(worker),
            Ev::Release { version } => {
                debug_assert_eq!(self.released.len() as u64, version);
                self.released.push(self.now);
                for w in 0..self.samplers.len() {
                    self.try_sample(w);
                }
            }
            Ev::SampleDone { worker, epoch } => {
                let s = &mut self.samplers[worker];
                s.pending = Some((epoch, self.now));
                self.try_enqueue(worker);
            }
            Ev::Arrive { rank, epoch, .. } => {
                self.arrived[epoch as usize][rank] += 1;
                self.try_pop(rank);
            }
            Ev::TrainerFree { rank } => {
                self.trainers[rank].busy = false;
                self.try_pop(rank);
            }
            Ev::Ready { rank, epoch } => {
                let e = epoch as usize;
                self.ready[e][rank] = Some(self.now);
                self.trace[e].trains[rank].1 = self.now;
                if self.ready[e].iter().all(Option::is_some) {
                    self.at(self.now + self.p.reduce_ns, Ev::Reduced { epoch });
                }
            }
            Ev::Reduced { epoch } => {
                let e = epoch as usize;
                let end = self.now + self.p.broadcast_ns;
                self.trace[e].reduced = self.now;
                self.trace[e].end = end;
                self.resolved = epoch + 1;
                self.at(end, Ev::Release { version: epoch + 1 });
                for r in 0..self.trainers.len() {
                    self.at(self.now, Ev::TrainerFree { rank: r });
                }
            }
        }
    }

    fn try_sample(&mut self, w: usize) {
        let s = &self.samplers[w];
        let k = s.epoch;
        if s.busy || s.pending.is_some() || k >= self.p.epochs {
            return;
        }
        let required = k.saturating_sub(self.p.staleness.min(k));
        let required = if self.p.staleness == u64::MAX {
            0
        } else {
            required
        };
        if (self.released.len() as u64) <= required {
            return;
        }
        // newest snapshot already at the worker
        let version = (self.released.len() as u64 - 1).max(s.installed);
        let start = self.now;
        let done = start + self.p.rollout_ns[w];
        let s = &mut self.samplers[w];
        s.installed = version;
        s.busy = true;
        self.trace[k as usize].samples[w] = (start, done, 0, version);
        self.at(
            done,
            Ev::SampleDone {
                worker: w,
                epoch: k,
            },
        );
    }

    fn try_enqueue(&mut self, w: usize) {
        let Some((k, _)) = self.samplers[w].pending else {
            return;
        };
        let q = self.p.queue as u64;
        if k >= q
            && self.p.queue != usize::MAX
            && self.pops[(k - q) as usize].iter().any(Option::is_none)
        {
            return;
        }
        let t = self.now;
        self.trace[k as usize].samples[w].2 = t;
        for r in 0..self.trainers.len() {
            let d = self.p.transfer_ns[w][r];
            let tr = &mut self.trace[k as usize].transfer;
            *tr = (*tr).max(d);
            self.at(
                t + d,
                Ev::Arrive {
                    worker: w,
                    rank: r,
                    epoch: k,
                },
            );
        }
        let s = &mut self.samplers[w];
        s.pending = None;
        s.busy = false;
        s.epoch += 1;
        self.at(t, Ev::SamplerFree { worker: w });
    }

    fn try_pop(&mut self, r: usize) {
        let tr = &self.trainers[r];
        let k = tr.epoch;
        if tr.busy || k >= self.p.epochs || self.arrived[k as usize][r] < self.samplers.len() {
            return;
        }
        let t = self.now;
        self.pops[k as usize][r] = Some(t);
        self.trace[k as usize].trains[r].0 = t;
        let tr = &mut self.trainers[r];
        tr.busy = true;
        tr.epoch += 1;
        self.at(t + self.p.actor_ns[r], Ev::Ready { rank: r, epoch: k });
        // a popped epoch may free queue room
        for w in 0..self.samplers.len() {
            self.try_enqueue(w);
        }
    }
}
