//! Rank-ordered gradient reduction across every actor rank of every node.
//!
//! Each rank deposits its partial sum for a round; the last one to arrive
//! merges the parts in rank order (f64 accumulation), so the result does not
//! depend on arrival order. A poisoned part poisons the round.

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::{Condvar, Mutex};
use swimlane_core::grpo::GradAccum;
use swimlane_planes::wire::encode_data;
use swimlane_planes::{DataPlaneMsg, InterNodeCounters, Metadata, Plane};

use crate::clock::Clock;
use crate::shutdown::{Shutdown, TICK};
use crate::RuntimeError;

#[derive(Debug, Clone)]
pub enum Part {
    Grad(GradAccum),
    /// Non-finite data in the rank's shard.
    Poisoned {
        group_id: Option<u64>,
    },
}

#[derive(Debug)]
pub struct Reduced {
    /// Merged gradient, or the first poisoned group in rank order.
    pub merged: Result<GradAccum, Option<u64>>,
    pub ready_max: u64,
    pub reduced_vt: u64,
}

#[derive(Debug)]
struct Round {
    parts: Vec<Option<(Part, u64)>>,
    result: Option<Arc<Reduced>>,
    taken: usize,
}

#[derive(Debug)]
pub struct Reducer {
    world: usize,
    nodes: usize,
    cost_ns: u64,
    gradient_bytes: u64,
    clock: Clock,
    rounds: Mutex<BTreeMap<u64, Round>>,
    cv: Condvar,
    inter_node: Arc<InterNodeCounters>,
    shutdown: Arc<Shutdown>,
}

impl Reducer {
    pub fn new(
        world: usize,
        nodes: usize,
        cost_ns: u64,
        gradient_bytes: u64,
        clock: Clock,
        inter_node: Arc<InterNodeCounters>,
        shutdown: Arc<Shutdown>,
    ) -> Self {
        Self {
            world,
            nodes,
            cost_ns,
            gradient_bytes,
            clock,
            rounds: Mutex::new(BTreeMap::new()),
            cv: Condvar::new(),
            inter_node,
            shutdown,
        }
    }

    pub fn world(&self) -> usize {
        self.world
    }

    /// Deposits `part` for `round` and blocks until every rank has done so.
    pub fn reduce(
        &self,
        round: u64,
        rank: usize,
        part: Part,
        ready_vt: u64,
    ) -> Result<Arc<Reduced>, RuntimeError> {
        let mut rounds = self.rounds.lock();
        let world = self.world;
        let r = rounds.entry(round).or_insert_with(|| Round {
            parts: vec![None; world],
            result: None,
            taken: 0,
        });
        r.parts[rank] = Some((part, ready_vt));
        if r.parts.iter().all(Option::is_some) {
            let parts: Vec<(Part, u64)> = r.parts.iter_mut().map(|p| p.take().unwrap()).collect();
            r.result = Some(Arc::new(self.merge(round, parts)));
            self.cv.notify_all();
        }
        loop {
            let r = rounds
                .get_mut(&round)
                .expect("round stays until every rank took it");
            if let Some(res) = r.result.clone() {
                r.taken += 1;
                if r.taken == world {
                    rounds.remove(&round);
                }
                return Ok(res);
            }
            if self.shutdown.is_set() {
                return Err(RuntimeError::Aborted);
            }
            self.cv.wait_for(&mut rounds, TICK);
        }
    }

    fn merge(&self, round: u64, parts: Vec<(Part, u64)>) -> Reduced {
        let ready_max = parts.iter().map(|(_, t)| *t).max().unwrap_or(0);
        let mut merged: Result<Option<GradAccum>, Option<u64>> = Ok(None);
        for (part, _) in parts {
            merged = match (merged, part) {
                (Err(g), _) => Err(g),
                (Ok(_), Part::Poisoned { group_id }) => Err(group_id),
                (Ok(None), Part::Grad(acc)) => Ok(Some(acc)),
                (Ok(Some(mut m)), Part::Grad(acc)) => {
                    m.merge(&acc);
                    Ok(Some(m))
                }
            };
        }
        if self.nodes > 1 {
            // Every non-coordinator node ships its partial sum up and gets the
            // merged sum back; the coordinator relays round metadata.
            let meta = DataPlaneMsg::Metadata(
                Metadata::default()
                    .with("round", round)
                    .with("members", self.nodes),
            );
            let meta_bytes = encode_data(&meta).map(|b| b.len() as u64).unwrap_or(0);
            for _ in 1..self.nodes {
                self.inter_node
                    .record(Plane::Gradient, 2 * self.gradient_bytes);
                self.inter_node.record(Plane::Control, meta_bytes);
            }
        }
        Reduced {
            merged: merged.map(|m| m.expect("world >= 1")),
            ready_max,
            reduced_vt: self.clock.spend(ready_max, self.cost_ns),
        }
    }
}
