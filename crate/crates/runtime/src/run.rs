//! Run orchestration: builds the planes, spawns the lanes of every node,
//! collects their events and checks the run afterwards.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel as cb;
use parking_lot::Mutex;
use serde::Serialize;
use swimlane_core::config::ExperimentConfig;
use swimlane_core::grpo::UpdateStats;
use swimlane_core::placement::{Component, Topology};
use swimlane_core::pool::PoolStats;
use swimlane_core::rng::domain;
use swimlane_core::{PolicyParams, Rng, RunMode};
use swimlane_planes::{
    channel, ControlPlane, InterNodeBytes, InterNodeCounters, Plane, Transport, TransportCounters,
};

use crate::board::{Board, Staging};
use crate::clock::Clock;
use crate::cost::CostModel;
use crate::lanes::{self, LaneOut, Node, Shared};
use crate::reduce::Reducer;
use crate::report::{self, assemble, BubbleStats, EpochReport, Event};
use crate::shutdown::Shutdown;
use crate::watchdog::{self, Beat, Heartbeats, LaneId, LaneRef};
use crate::RuntimeError;

/// Faults injected into a run, for tests of the failure paths.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FaultPlan {
    /// `(node, worker, epoch)`: corrupt one behavior log-prob with NaN.
    pub poison: Vec<(u32, u32, u64)>,
    /// Corrupt the merged gradient of this epoch before the optimizer step.
    pub nan_update_at: Option<u64>,
    /// Hang this lane, without heartbeats, when it reaches the epoch.
    pub stall: Option<(LaneRef, u64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub faults: FaultPlan,
    /// Overrides `runtime.watchdog_secs`.
    pub watchdog: Option<Duration>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub mode: RunMode,
    pub virtual_time: bool,
    pub reports: Vec<EpochReport>,
    pub updates: Vec<UpdateStats>,
    #[serde(skip)]
    pub final_params: PolicyParams,
    pub final_version: u64,
    pub quarantined: u64,
    pub produced_transitions: u64,
    pub consumed_transitions: u64,
    #[serde(skip)]
    pub data_plane: TransportCounters,
    #[serde(skip)]
    pub control_plane: TransportCounters,
    /// Bytes between env and inference slot groups.
    pub env_link_bytes: u64,
    #[serde(skip)]
    pub inter_node: InterNodeBytes,
    /// Parameter digest of every rank for each version.
    pub digests: BTreeMap<u64, Vec<u64>>,
    #[serde(skip)]
    pub pools: Vec<PoolStats>,
    /// Real seconds the run took.
    pub wall_time: f64,
    pub max_staleness: u64,
    /// Snapshots the weight lanes ignored as regressions.
    pub ignored_broadcasts: u64,
}

impl RunResult {
    pub fn throughput(&self, warmup: usize) -> f64 {
        report::throughput(&self.reports, warmup)
    }

    pub fn bubble_stats(&self, warmup: usize) -> BubbleStats {
        report::barrier_free_handoff_audit(&self.reports, warmup)
    }

    /// Every rank holds bitwise the same parameters after every version.
    pub fn replicas_agree(&self) -> bool {
        self.digests
            .values()
            .all(|d| d.windows(2).all(|w| w[0] == w[1]))
    }
}

fn add(a: &mut TransportCounters, b: TransportCounters) {
    a.copies += b.copies;
    a.bytes += b.bytes;
    a.messages += b.messages;
}

/// Runs the configuration's own mode, epochs and topology.
pub fn run_config(cfg: &ExperimentConfig) -> Result<RunResult, RuntimeError> {
    let topo = cfg
        .topology()
        .map_err(|e| RuntimeError::Config(e.to_string()))?;
    run(cfg, &topo, cfg.runtime.mode, cfg.runtime.epochs)
}

pub fn run(
    cfg: &ExperimentConfig,
    topo: &Topology,
    mode: RunMode,
    epochs: u64,
) -> Result<RunResult, RuntimeError> {
    run_with(cfg, topo, mode, epochs, &RunOptions::default())
}

pub fn run_with(
    cfg: &ExperimentConfig,
    topo: &Topology,
    mode: RunMode,
    epochs: u64,
    opts: &RunOptions,
) -> Result<RunResult, RuntimeError> {
    let config = |m: String| RuntimeError::Config(m);
    cfg.validate().map_err(|e| config(e.to_string()))?;
    let plan = &topo.plan;
    let workers = plan.rollout_workers() as usize;
    let ranks = plan.actor_workers() as usize;
    let n_nodes = topo.nodes as usize;
    if epochs == 0 || workers == 0 || ranks == 0 || n_nodes == 0 {
        return Err(config(format!(
            "need at least one epoch, worker, rank and node (got {epochs}, {workers}, {ranks}, {n_nodes})"
        )));
    }
    if cfg.n_groups() < ranks.max(workers) {
        return Err(config(format!(
            "{} groups cannot be split across {workers} rollout workers and {ranks} actor ranks",
            cfg.n_groups()
        )));
    }

    let started = Instant::now();
    let virt = cfg.runtime.virtual_time;
    let clock = Clock::new(virt);
    let shutdown = Shutdown::new();
    let cost = CostModel::new(cfg, topo, mode);
    let staleness_limit = match mode {
        RunMode::Sync => 0,
        RunMode::Async => cfg.runtime.staleness_limit,
    };
    let initial = PolicyParams::init(
        &cfg.policy,
        &mut Rng::keyed(cfg.runtime.seed, domain::PARAMS, 0, 0),
    )
    .map_err(|e| config(e.to_string()))?;
    let inter = Arc::new(InterNodeCounters::default());
    let reducer = Reducer::new(
        n_nodes * ranks,
        n_nodes,
        cost.reduce_ns(),
        cost.gradient_bytes(),
        clock,
        inter.clone(),
        shutdown.clone(),
    );
    let sh = Shared {
        cfg,
        cost,
        clock,
        epochs,
        staleness_limit,
        queue: cfg.runtime.queue_capacity as u64,
        shutdown: shutdown.clone(),
        faults: &opts.faults,
        reducer,
        initial,
        digests: Mutex::new(BTreeMap::new()),
    };

    // virtual time keeps every version in the mailbox: which one is current
    // is decided by timestamps, not by arrival order
    let depth = if virt { epochs as usize + 1 } else { 1 };
    let link = cfg.placement.local_link;
    let mut nodes = Vec::new();
    let mut wiring = Vec::new();
    for n in 0..n_nodes {
        let data = Transport::with_link(
            Plane::Data,
            plan.transport(Component::Rollout, Component::Actor),
            link,
        );
        let ctrl = Transport::with_link(
            Plane::Control,
            plan.transport(Component::Actor, Component::Rollout),
            link,
        );
        data.set_pacing(!virt);
        ctrl.set_pacing(!virt);
        let control = ControlPlane::new(ctrl).map_err(|e| config(e.to_string()))?;
        let subs: Vec<_> = (0..workers).map(|_| control.subscribe(depth)).collect();
        // one bounded channel per (worker, rank)
        let mut txs: Vec<Vec<_>> = (0..workers).map(|_| Vec::new()).collect();
        let mut rxs: Vec<Vec<_>> = (0..ranks).map(|_| Vec::new()).collect();
        for (w, tx_row) in txs.iter_mut().enumerate() {
            for rx_row in rxs.iter_mut() {
                let (tx, rx) = channel(data.clone(), cfg.runtime.queue_capacity)
                    .map_err(|e| config(e.to_string()))?;
                tx_row.push(tx.for_producer(w as u32));
                rx_row.push(rx);
            }
        }
        nodes.push(Node {
            node: n as u32,
            workers,
            ranks,
            board: Board::new(ranks, shutdown.clone()),
            control,
            data,
            stagings: (0..workers)
                .map(|_| Arc::new(Staging::new(shutdown.clone())))
                .collect(),
        });
        wiring.push((txs, rxs, subs));
    }

    let mut lane_refs = Vec::new();
    for n in 0..n_nodes as u32 {
        let lane = |lane, index| LaneRef {
            node: n,
            lane,
            index,
        };
        for w in 0..workers as u32 {
            lane_refs.push(lane(LaneId::Sampler, w));
            lane_refs.push(lane(LaneId::WeightRecv, w));
        }
        for r in 0..ranks as u32 {
            lane_refs.push(lane(LaneId::Trainer, r));
        }
        lane_refs.push(lane(LaneId::WeightDist, 0));
    }
    lane_refs.sort();
    let hb = Heartbeats::new(&lane_refs);
    let timeout = opts
        .watchdog
        .unwrap_or_else(|| Duration::from_secs_f64(cfg.runtime.watchdog_secs));

    let (ev_tx, ev_rx) = cb::unbounded::<Event>();
    let (stop_tx, stop_rx) = cb::bounded::<()>(0);
    let mut events = Vec::new();
    let outs: Vec<(LaneRef, Result<LaneOut, RuntimeError>)> = std::thread::scope(|s| {
        let (sh, hb, shutdown) = (&sh, &hb, &shutdown);
        let wd = s.spawn(move || watchdog::watch(hb, timeout, shutdown, &stop_rx));
        let mut handles = Vec::new();
        for (nd, (txs, rxs, subs)) in nodes.iter().zip(wiring) {
            let lane = |lane, index| LaneRef {
                node: nd.node,
                lane,
                index,
            };
            let (pub_tx, pub_rx) = cb::unbounded();
            let ev = ev_tx.clone();
            let id = lane(LaneId::WeightDist, 0);
            handles.push((
                id,
                spawn_lane(
                    s,
                    hb,
                    shutdown,
                    id,
                    Box::new(move |b| lanes::distributor(sh, nd, pub_rx, b, ev)),
                ),
            ));
            for (r, rx) in rxs.into_iter().enumerate() {
                let ev = ev_tx.clone();
                let dist = (r == 0).then(|| pub_tx.clone());
                let id = lane(LaneId::Trainer, r as u32);
                handles.push((
                    id,
                    spawn_lane(
                        s,
                        hb,
                        shutdown,
                        id,
                        Box::new(move |b| lanes::trainer(sh, nd, r, rx, dist, b, ev)),
                    ),
                ));
            }
            drop(pub_tx);
            for (w, (tx, sub)) in txs.into_iter().zip(subs).enumerate() {
                let ev = ev_tx.clone();
                let id = lane(LaneId::Sampler, w as u32);
                handles.push((
                    id,
                    spawn_lane(
                        s,
                        hb,
                        shutdown,
                        id,
                        Box::new(move |b| lanes::sampler(sh, nd, w, tx, b, ev)),
                    ),
                ));
                let id = lane(LaneId::WeightRecv, w as u32);
                handles.push((
                    id,
                    spawn_lane(
                        s,
                        hb,
                        shutdown,
                        id,
                        Box::new(move |b| lanes::weight_recv(sh, nd, w, sub, b)),
                    ),
                ));
            }
        }
        drop(ev_tx);
        events.extend(ev_rx.iter());
        let outs = handles
            .into_iter()
            .map(|(id, h)| {
                (
                    id,
                    h.join().unwrap_or_else(|_| {
                        Err(RuntimeError::Lane {
                            lane: id,
                            epoch: 0,
                            detail: "lane panicked".into(),
                        })
                    }),
                )
            })
            .collect();
        drop(stop_tx);
        wd.join().expect("watchdog thread");
        outs
    });

    if let Some(reason) = shutdown.take_reason() {
        return Err(reason);
    }
    let mut final_params = None;
    let mut pools = Vec::new();
    for (_, out) in outs {
        match out? {
            LaneOut::Nothing => {}
            LaneOut::Pools(p) => pools.extend(p),
            LaneOut::Trainer { params, pools: p } => {
                pools.extend(p);
                if params.is_some() {
                    final_params = params;
                }
            }
        }
    }

    let (reports, updates) = assemble(&events, epochs, &lane_refs);
    check_staleness(&events, staleness_limit)?;
    let mut data_plane = TransportCounters::default();
    let mut control_plane = TransportCounters::default();
    let mut ignored = 0;
    for nd in &nodes {
        add(&mut data_plane, nd.data.counters());
        add(&mut control_plane, nd.control.transport().counters());
        ignored += nd.stagings.iter().map(|s| s.ignored()).sum::<u64>();
    }
    let env_link_bytes = events
        .iter()
        .map(|e| match e {
            Event::Sampled(s) => s.env_link_bytes,
            _ => 0,
        })
        .sum();
    let digests = sh.digests.into_inner();
    Ok(RunResult {
        mode,
        virtual_time: virt,
        quarantined: reports.iter().filter(|r| r.quarantined).count() as u64,
        produced_transitions: reports.iter().map(|r| r.transitions).sum(),
        consumed_transitions: reports.iter().map(|r| r.consumed_transitions).sum(),
        max_staleness: reports.iter().map(|r| r.staleness).max().unwrap_or(0),
        final_version: updates.len() as u64,
        reports,
        updates,
        final_params: final_params.expect("rank 0 returns its parameters"),
        data_plane,
        control_plane,
        env_link_bytes,
        inter_node: inter.snapshot(),
        digests,
        pools,
        wall_time: started.elapsed().as_secs_f64(),
        ignored_broadcasts: ignored,
    })
}

type LaneFn<'a> = Box<dyn FnOnce(Beat) -> Result<LaneOut, RuntimeError> + Send + 'a>;

fn spawn_lane<'scope, 'env>(
    s: &'scope std::thread::Scope<'scope, 'env>,
    hb: &Arc<Heartbeats>,
    shutdown: &'scope Shutdown,
    id: LaneRef,
    f: LaneFn<'scope>,
) -> std::thread::ScopedJoinHandle<'scope, Result<LaneOut, RuntimeError>> {
    let beat = hb.handle(id);
    std::thread::Builder::new()
        .name(id.to_string())
        .spawn_scoped(s, move || {
            let out = f(beat.clone());
            beat.done();
            if let Err(e) = &out {
                if *e != RuntimeError::Aborted {
                    shutdown.trigger(Some(e.clone()));
                }
            }
            out
        })
        .expect("spawn lane thread")
}

/// Versions published by the time each sampler epoch finished must be
/// within the limit of the version it sampled with.
fn check_staleness(events: &[Event], limit: u64) -> Result<(), RuntimeError> {
    let mut reduced: BTreeMap<u64, (u64, bool)> = BTreeMap::new();
    for e in events {
        if let Event::Trained(t) = e {
            let r = reduced.entry(t.epoch).or_insert((0, true));
            r.0 = r.0.max(t.reduced);
            r.1 &= t.quarantined.is_none();
        }
    }
    let publish: Vec<u64> = reduced.values().filter(|r| r.1).map(|r| r.0).collect();
    for e in events {
        if let Event::Sampled(s) = e {
            let trainer = publish.iter().filter(|&&p| p < s.done).count() as u64;
            if trainer.saturating_sub(s.behavior_version) > limit {
                return Err(RuntimeError::Staleness {
                    lane: LaneRef {
                        node: s.node,
                        lane: LaneId::Sampler,
                        index: s.worker,
                    },
                    epoch: s.epoch,
                    trainer,
                    behavior: s.behavior_version,
                    limit,
                });
            }
        }
    }
    Ok(())
}
