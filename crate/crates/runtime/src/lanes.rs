//! The four lane bodies.

use std::collections::BTreeMap;
use std::sync::Arc;

use crossbeam_channel as cb;
use parking_lot::Mutex;
use swimlane_core::batch::n_chunks;
use swimlane_core::config::ExperimentConfig;
use swimlane_core::env::GroupLayout;
use swimlane_core::grpo::{finish_update, GrpoError, Learner};
use swimlane_core::pool::{align_up, Pool, PoolKind, PoolStats, WorkerPools};
use swimlane_core::rollout::RolloutWorker;
use swimlane_core::{GroupBatch, ParamSnapshot, PolicyParams};
use swimlane_planes::{
    ControlPlane, DataPlaneMsg, DataReceiver, DataSender, PlaneError, Subscription,
    TrajectoryBatch, Transport,
};

use crate::board::{Board, Resolution, Staged, Staging, WeightSlot};
use crate::clock::Clock;
use crate::cost::{split, CostModel};
use crate::reduce::{Part, Reducer};
use crate::report::{BroadcastRecord, Event, SamplerRecord, TrainerRecord};
use crate::run::FaultPlan;
use crate::shutdown::{Shutdown, TICK};
use crate::watchdog::{Beat, LaneState};
use crate::RuntimeError;

/// State shared by every lane of a run.
pub(crate) struct Shared<'a> {
    pub cfg: &'a ExperimentConfig,
    pub cost: CostModel,
    pub clock: Clock,
    pub epochs: u64,
    pub staleness_limit: u64,
    pub queue: u64,
    pub shutdown: Arc<Shutdown>,
    pub faults: &'a FaultPlan,
    pub reducer: Reducer,
    pub initial: PolicyParams,
    /// Parameter digest per version, one entry per rank.
    pub digests: Mutex<BTreeMap<u64, Vec<u64>>>,
}

/// State shared by the lanes of one node.
pub(crate) struct Node {
    pub node: u32,
    pub workers: usize,
    pub ranks: usize,
    pub board: Board,
    pub control: ControlPlane,
    pub data: Arc<Transport>,
    pub stagings: Vec<Arc<Staging>>,
}

/// A weight version on its way to Lane D.
pub(crate) struct Publish {
    pub snapshot: ParamSnapshot,
    pub sent: u64,
}

pub(crate) enum LaneOut {
    Nothing,
    Pools(Vec<PoolStats>),
    Trainer {
        params: Option<PolicyParams>,
        pools: Vec<PoolStats>,
    },
}

fn fail(beat: &Beat, epoch: u64, e: impl std::fmt::Display) -> RuntimeError {
    RuntimeError::Lane {
        lane: beat.lane(),
        epoch,
        detail: e.to_string(),
    }
}

fn plane_err(sh: &Shared, beat: &Beat, epoch: u64, e: PlaneError) -> RuntimeError {
    if sh.shutdown.is_set() {
        RuntimeError::Aborted
    } else {
        fail(beat, epoch, e)
    }
}

/// Fault injection: hangs the lane mid-work, without heartbeats, until the
/// run aborts.
fn maybe_stall(sh: &Shared, beat: &Beat, state: LaneState, epoch: u64) -> Result<(), RuntimeError> {
    if sh.faults.stall == Some((beat.lane(), epoch)) {
        beat.beat(state, epoch);
        beat.silence();
        while !sh.shutdown.is_set() {
            std::thread::sleep(TICK);
        }
        return Err(RuntimeError::Aborted);
    }
    Ok(())
}

/// Rank owning global group `g` of `n_groups`.
fn rank_of(g: usize, n_groups: usize, ranks: usize) -> usize {
    (0..ranks)
        .find(|&r| split(n_groups, ranks, r).contains(&g))
        .unwrap_or(0)
}

/// Lane A.
pub(crate) fn sampler(
    sh: &Shared,
    nd: &Node,
    w: usize,
    mut txs: Vec<DataSender>,
    beat: Beat,
    events: cb::Sender<Event>,
) -> Result<LaneOut, RuntimeError> {
    let cfg = sh.cfg;
    let n_groups = cfg.n_groups();
    let groups = split(n_groups, nd.workers, w);
    let layout = GroupLayout {
        n_groups: groups.len(),
        group_size: cfg.grpo.group_size,
    };
    let seed = cfg.runtime.seed + nd.node as u64;
    let mut worker = RolloutWorker::new(
        &cfg.env,
        seed,
        layout,
        groups.start as u64,
        cfg.policy.chunk,
        cfg.grpo.ratio_granularity,
    )
    .map_err(|e| fail(&beat, 0, e))?;
    let stage = align_up(worker.staging_bytes(), 64);
    let chunks = n_chunks(cfg.env.horizon, cfg.policy.chunk as u32) as u64;
    let mut pools = WorkerPools::new(&cfg.pools, cfg.policy.param_count(), chunks * stage)
        .map_err(|e| fail(&beat, 0, e))?;
    let staging = nd.stagings[w].clone();
    let mut slot = WeightSlot::new(
        Staged {
            version: 0,
            params: Arc::new(sh.initial.clone()),
            release_vt: 0,
        },
        staging.clone(),
    );
    let virt = sh.clock.is_virtual();
    let limit = sh.staleness_limit;
    let mut free = 0u64;

    for k in 0..sh.epochs {
        maybe_stall(sh, &beat, LaneState::Sampling, k)?;
        beat.beat(LaneState::Gate, k);
        let required = if k >= limit {
            nd.board.version_after(k - limit)?
        } else {
            0
        };
        let mut earliest = free;
        if slot.version() < required {
            let (_, arrived) = staging.wait_version(required)?;
            earliest = earliest.max(arrived);
        }
        if virt {
            // A newer snapshot is installed only if it arrived by the start
            // time, which may depend on versions not trained yet.
            let mut v = slot.version().max(required) + 1;
            while nd.board.wait_version_or_resolved(v, k)? {
                let (got, arrived) = staging.wait_version(v)?;
                if arrived > earliest {
                    break;
                }
                v = got + 1;
            }
        }
        let start = sh.clock.mark(earliest);
        let version = slot.begin_epoch(start);
        let trainer = if virt {
            required
        } else {
            nd.board.latest_version()
        };
        if version < required || trainer.saturating_sub(version) > limit {
            return Err(RuntimeError::Staleness {
                lane: beat.lane(),
                epoch: k,
                trainer,
                behavior: version,
                limit,
            });
        }

        beat.beat(LaneState::Sampling, k);
        let params = slot.current().params.clone();
        let mut cost_ns = 0u64;
        let mut env_bytes = 0u64;
        let mut pool_err = None;
        let cost = &sh.cost;
        let rollout = worker
            .run_epoch(&params, version, |work, obs, act| {
                beat.beat(LaneState::Sampling, k);
                let c = cost.chunk_ns(work.substeps, work.n_envs);
                cost_ns += c;
                if !virt {
                    crate::clock::spin(c);
                }
                if cost.env_link.is_some() {
                    env_bytes += cost.obs_bytes(work.n_envs) + cost.action_bytes(work.n_envs);
                }
                // host staging of the chunk's observations and actions
                let env = pools.env();
                match env.alloc(stage, 64) {
                    Ok(h) => {
                        let buf = env.bytes_mut(&h).expect("fresh handle");
                        for (dst, v) in buf.chunks_exact_mut(4).zip(obs.iter().chain(act)) {
                            dst.copy_from_slice(&v.to_le_bytes());
                        }
                    }
                    Err(e) => pool_err = Some(e),
                }
            })
            .map_err(|e| fail(&beat, k, e))?;
        if let Some(e) = pool_err {
            return Err(fail(&beat, k, e));
        }
        let done = sh.clock.mark(start + cost_ns);
        let mut groups_out = rollout.groups;
        if sh.faults.poison.contains(&(nd.node, w as u32, k)) {
            groups_out[0].trajectories[0].behavior_log_prob[0] = f32::NAN;
        }
        let trajectories: u64 = groups_out.iter().map(|g| g.trajectories.len() as u64).sum();
        let reward_sum: f64 = groups_out
            .iter()
            .flat_map(|g| &g.trajectories)
            .map(|t| t.reward as f64)
            .sum();

        beat.beat(LaneState::Enqueue, k);
        let floor = if virt && k >= sh.queue {
            nd.board.wait_pop(k - sh.queue)?
        } else {
            0
        };
        let sent = sh.clock.mark(done.max(floor));
        let mut per_rank: Vec<Vec<GroupBatch>> = vec![Vec::new(); nd.ranks];
        for (i, g) in groups_out.into_iter().enumerate() {
            per_rank[rank_of(groups.start + i, n_groups, nd.ranks)].push(g);
        }
        for (tx, gs) in txs.iter_mut().zip(per_rank) {
            let msg = DataPlaneMsg::TrajectoryBatch(TrajectoryBatch {
                policy_version: version,
                groups: gs,
            });
            tx.publish(Arc::new(msg), sent)
                .map_err(|e| plane_err(sh, &beat, k, e))?;
        }
        let enqueued = sh.clock.mark(sent);
        pools.env().epoch_reset().map_err(|e| fail(&beat, k, e))?;
        let _ = events.send(Event::Sampled(SamplerRecord {
            node: nd.node,
            worker: w as u32,
            epoch: k,
            behavior_version: version,
            required_version: required,
            start,
            done,
            enqueued,
            transitions: rollout.transitions,
            trajectories,
            reward_sum,
            env_link_bytes: env_bytes,
        }));
        free = enqueued;
    }
    Ok(LaneOut::Pools(pools.stats()))
}

/// Lane B.
pub(crate) fn weight_recv(
    sh: &Shared,
    nd: &Node,
    w: usize,
    sub: Subscription,
    beat: Beat,
) -> Result<LaneOut, RuntimeError> {
    let staging = &nd.stagings[w];
    let out = loop {
        match sub.recv_all(Some(TICK)) {
            Ok(batch) if batch.is_empty() => {
                if sh.shutdown.is_set() {
                    break Err(RuntimeError::Aborted);
                }
            }
            Ok(batch) => {
                for d in batch {
                    let snap = &d.msg.snapshot;
                    beat.beat(LaneState::Receiving, snap.version());
                    let params = PolicyParams::from_snapshot(&sh.cfg.policy, snap)
                        .map_err(|e| fail(&beat, snap.version(), e))?;
                    staging.install_weights(Staged {
                        version: snap.version(),
                        params: Arc::new(params),
                        release_vt: d.release_vt,
                    });
                }
            }
            Err(PlaneError::Closed) => break Ok(LaneOut::Nothing),
            Err(e) => break Err(plane_err(sh, &beat, 0, e)),
        }
    };
    staging.close();
    out
}

/// Lane C.
pub(crate) fn trainer(
    sh: &Shared,
    nd: &Node,
    local_rank: usize,
    rxs: Vec<DataReceiver>,
    dist: Option<cb::Sender<Publish>>,
    beat: Beat,
    events: cb::Sender<Event>,
) -> Result<LaneOut, RuntimeError> {
    let cfg = sh.cfg;
    let global_rank = nd.node as usize * nd.ranks + local_rank;
    let mut learner =
        Learner::new(sh.initial.clone(), cfg.grpo.clone()).map_err(|e| fail(&beat, 0, e))?;
    // parameters, gradients and two optimizer moments live in the model pool
    let p = cfg.policy.param_count() as u64;
    let mut pool = Pool::new(PoolKind::ModelCompute, cfg.pools.model_capacity(p as usize))
        .map_err(|e| fail(&beat, 0, e))?;
    for bytes in [4 * p, 8 * p, 8 * p, 8 * p] {
        pool.alloc(bytes, 64).map_err(|e| fail(&beat, 0, e))?;
    }
    let mut free = 0u64;

    for k in 0..sh.epochs {
        maybe_stall(sh, &beat, LaneState::Computing, k)?;
        beat.beat(LaneState::Receiving, k);
        let mut msgs = Vec::with_capacity(rxs.len());
        let mut arrival = 0u64;
        let mut data_delay = 0u64;
        for rx in &rxs {
            match rx.recv_or_shutdown(sh.shutdown.receiver()) {
                Ok(Some(d)) => {
                    arrival = arrival.max(d.release_vt);
                    data_delay = data_delay.max(d.release_vt - d.sent_vt);
                    msgs.push(d.msg);
                }
                Ok(None) => return Err(RuntimeError::Aborted),
                Err(e) => return Err(plane_err(sh, &beat, k, e)),
            }
        }
        let pop = sh.clock.mark(free.max(arrival));
        nd.board.record_pop(k, local_rank, pop);

        beat.beat(LaneState::Computing, k);
        let mut batches: Vec<&GroupBatch> = Vec::new();
        for m in &msgs {
            match &**m {
                DataPlaneMsg::TrajectoryBatch(b) => batches.extend(b.groups.iter()),
                other => {
                    return Err(fail(
                        &beat,
                        k,
                        format!("unexpected {:?} on the data queue", other.msg_type()),
                    ))
                }
            }
        }
        let transitions: u64 = batches.iter().map(|b| b.transitions()).sum();
        let min_behavior = batches
            .iter()
            .filter_map(|b| b.behavior_version())
            .min()
            .unwrap_or(learner.version);
        let part = match learner.gradient(&batches) {
            Ok(acc) => Part::Grad(acc),
            Err(e @ GrpoError::NonFinite { .. }) => {
                tracing::warn!(lane = %beat.lane(), epoch = k, "quarantining batch: {e}");
                Part::Poisoned {
                    group_id: e.group_id(),
                }
            }
            Err(e) => return Err(fail(&beat, k, e)),
        };
        let ready = sh.clock.spend(pop, sh.cost.actor_ns(transitions));

        beat.beat(LaneState::Reducing, k);
        let red = sh.reducer.reduce(k, global_rank, part, ready)?;
        let trainer_version = learner.version;
        let quarantined = match &red.merged {
            Ok(merged) => {
                let corrupted;
                let merged = if sh.faults.nan_update_at == Some(k) {
                    let mut m = merged.clone();
                    m.grad[0] = f64::NAN;
                    corrupted = m;
                    &corrupted
                } else {
                    merged
                };
                let mut stats =
                    finish_update(&mut learner.params, &mut learner.adam, merged, &cfg.grpo)
                        .map_err(|e| RuntimeError::NanUpdate {
                            lane: beat.lane(),
                            epoch: k,
                            detail: e.to_string(),
                        })?;
                learner.version += 1;
                stats.version = learner.version;
                let snapshot = learner
                    .params
                    .snapshot(learner.version)
                    .map_err(|e| fail(&beat, k, e))?;
                sh.digests
                    .lock()
                    .entry(learner.version)
                    .or_default()
                    .push(snapshot.digest());
                if let Some(tx) = &dist {
                    nd.board.resolve(
                        k,
                        Resolution::Updated {
                            version: learner.version,
                            publish_vt: red.reduced_vt,
                        },
                    );
                    let _ = tx.send(Publish {
                        snapshot,
                        sent: red.reduced_vt,
                    });
                }
                if global_rank == 0 {
                    let _ = events.send(Event::Updated { epoch: k, stats });
                }
                None
            }
            Err(group) => {
                if dist.is_some() {
                    nd.board.resolve(
                        k,
                        Resolution::Quarantined {
                            publish_vt: red.reduced_vt,
                        },
                    );
                }
                Some(*group)
            }
        };
        let _ = events.send(Event::Trained(TrainerRecord {
            node: nd.node,
            rank: local_rank as u32,
            epoch: k,
            pop,
            ready,
            reduced: red.reduced_vt,
            data_delay,
            transitions,
            trainer_version,
            min_behavior_version: min_behavior,
            quarantined,
        }));
        free = red.reduced_vt;
    }
    Ok(LaneOut::Trainer {
        params: (global_rank == 0).then_some(learner.params),
        pools: vec![pool.stats()],
    })
}

/// Lane D.
pub(crate) fn distributor(
    sh: &Shared,
    nd: &Node,
    rx: cb::Receiver<Publish>,
    beat: Beat,
    events: cb::Sender<Event>,
) -> Result<LaneOut, RuntimeError> {
    let out = loop {
        let p = cb::select! {
            recv(rx) -> m => match m {
                Ok(p) => p,
                Err(_) => break Ok(LaneOut::Nothing),
            },
            recv(sh.shutdown.receiver()) -> _ => break Err(RuntimeError::Aborted),
        };
        let version = p.snapshot.version();
        beat.beat(LaneState::Broadcasting, version);
        if let Err(e) = maybe_stall(sh, &beat, LaneState::Broadcasting, version) {
            break Err(e);
        }
        let sent = sh.clock.mark(p.sent);
        let bytes = match nd.control.broadcast(&p.snapshot, sent) {
            Ok(b) => b,
            Err(e) => break Err(plane_err(sh, &beat, version, e)),
        };
        let per_sub = bytes / nd.control.subscribers().max(1) as u64;
        let _ = events.send(Event::Broadcast(BroadcastRecord {
            node: nd.node,
            version,
            sent,
            delay: nd.control.transport().delay_ns(per_sub),
            bytes,
        }));
        beat.beat(LaneState::Receiving, version);
    };
    nd.control.close();
    out
}
