//! Per-epoch reports assembled from lane events, and the bubble audit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use swimlane_core::grpo::UpdateStats;

use crate::watchdog::{LaneId, LaneRef};

/// One rollout epoch of one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerRecord {
    pub node: u32,
    pub worker: u32,
    pub epoch: u64,
    pub behavior_version: u64,
    /// Oldest version the staleness gate allowed.
    pub required_version: u64,
    pub start: u64,
    pub done: u64,
    /// Time the data entered the queue (after any backpressure).
    pub enqueued: u64,
    pub transitions: u64,
    pub trajectories: u64,
    pub reward_sum: f64,
    pub env_link_bytes: u64,
}

/// One epoch on one actor rank.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerRecord {
    pub node: u32,
    pub rank: u32,
    pub epoch: u64,
    pub pop: u64,
    pub ready: u64,
    pub reduced: u64,
    /// Longest link delay among the epoch's data messages.
    pub data_delay: u64,
    pub transitions: u64,
    /// Parameter version the update started from.
    pub trainer_version: u64,
    pub min_behavior_version: u64,
    /// `Some(group)` when the epoch was quarantined.
    pub quarantined: Option<Option<u64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BroadcastRecord {
    pub node: u32,
    pub version: u64,
    pub sent: u64,
    pub delay: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Event {
    Sampled(SamplerRecord),
    Trained(TrainerRecord),
    Updated { epoch: u64, stats: UpdateStats },
    Broadcast(BroadcastRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneSpan {
    pub lane: LaneId,
    pub node: u32,
    pub index: u32,
    /// Seconds spent working inside the epoch's window.
    pub busy: f64,
    pub idle: f64,
}

/// Timing and accounting of one epoch. Times are seconds (virtual or real).
///
/// The epoch's window runs from the end of the previous epoch to the moment
/// the version trained on this epoch reaches the samplers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u64,
    /// Oldest snapshot version any worker sampled this epoch with.
    pub behavior_version: u64,
    /// Version the trainer held when it consumed the epoch.
    pub trainer_version: u64,
    /// Largest `trainer version − behavior version` seen by any chunk inference.
    pub staleness: u64,
    /// `trainer_version − behavior_version` at the update.
    pub update_staleness: u64,
    pub rollout_time: f64,
    pub transfer_time: f64,
    pub actor_time: f64,
    pub broadcast_time: f64,
    pub step_time: f64,
    pub end_time: f64,
    /// Transitions produced by the samplers.
    pub transitions: u64,
    /// Transitions that went into an update.
    pub consumed_transitions: u64,
    pub quarantined: bool,
    pub success_rate: f64,
    pub lanes: Vec<LaneSpan>,
}

fn secs(ns: u64) -> f64 {
    ns as f64 * 1e-9
}

fn overlap(a: (u64, u64), b: (u64, u64)) -> u64 {
    a.1.min(b.1).saturating_sub(a.0.max(b.0))
}

/// Builds the reports of epochs `0..epochs` from the collected events.
pub(crate) fn assemble(
    events: &[Event],
    epochs: u64,
    lanes: &[LaneRef],
) -> (Vec<EpochReport>, Vec<UpdateStats>) {
    let mut samples: BTreeMap<u64, Vec<&SamplerRecord>> = BTreeMap::new();
    let mut trains: BTreeMap<u64, Vec<&TrainerRecord>> = BTreeMap::new();
    let mut bcast: BTreeMap<u64, u64> = BTreeMap::new();
    let mut updates: BTreeMap<u64, UpdateStats> = BTreeMap::new();
    let mut busy: BTreeMap<LaneRef, Vec<(u64, u64)>> = BTreeMap::new();
    for e in events {
        match e {
            Event::Sampled(s) => {
                samples.entry(s.epoch).or_default().push(s);
                let lane = LaneRef {
                    node: s.node,
                    lane: LaneId::Sampler,
                    index: s.worker,
                };
                busy.entry(lane).or_default().push((s.start, s.done));
            }
            Event::Trained(t) => {
                trains.entry(t.epoch).or_default().push(t);
                let lane = LaneRef {
                    node: t.node,
                    lane: LaneId::Trainer,
                    index: t.rank,
                };
                busy.entry(lane).or_default().push((t.pop, t.reduced));
            }
            Event::Broadcast(b) => {
                let d = bcast.entry(b.version).or_default();
                *d = (*d).max(b.delay);
            }
            Event::Updated { epoch, stats } => {
                updates.insert(*epoch, stats.clone());
            }
        }
    }

    // publish time of every version, for the staleness seen at inference
    let mut publish: Vec<u64> = Vec::new();
    for k in 0..epochs {
        if let Some(ts) = trains.get(&k) {
            if ts.iter().all(|t| t.quarantined.is_none()) {
                publish.push(ts.iter().map(|t| t.reduced).max().unwrap_or(0));
            }
        }
    }
    let version_at = |t: u64| publish.iter().filter(|&&p| p < t).count() as u64;

    let mut reports = Vec::new();
    let mut prev_end = 0u64;
    for k in 0..epochs {
        let (Some(ss), Some(ts)) = (samples.get(&k), trains.get(&k)) else {
            break;
        };
        let quarantined = ts.iter().any(|t| t.quarantined.is_some());
        let reduced = ts.iter().map(|t| t.reduced).max().unwrap_or(0);
        let trainer_version = ts.iter().map(|t| t.trainer_version).max().unwrap_or(0);
        let bdelay = if quarantined {
            0
        } else {
            bcast.get(&(trainer_version + 1)).copied().unwrap_or(0)
        };
        let end = reduced + bdelay;
        let behavior_version = ss.iter().map(|s| s.behavior_version).min().unwrap_or(0);
        let staleness = ss
            .iter()
            .map(|s| version_at(s.done).saturating_sub(s.behavior_version))
            .max()
            .unwrap_or(0);
        let transitions: u64 = ss.iter().map(|s| s.transitions).sum();
        let trajectories: u64 = ss.iter().map(|s| s.trajectories).sum();
        let reward: f64 = ss.iter().map(|s| s.reward_sum).sum();
        let window = (prev_end, end);
        let spans = lanes
            .iter()
            .map(|l| {
                let b: u64 = busy
                    .get(l)
                    .map(|iv| iv.iter().map(|&i| overlap(i, window)).sum())
                    .unwrap_or(0);
                LaneSpan {
                    lane: l.lane,
                    node: l.node,
                    index: l.index,
                    busy: secs(b),
                    idle: secs((end - prev_end).saturating_sub(b)),
                }
            })
            .collect();
        reports.push(EpochReport {
            epoch: k,
            behavior_version,
            trainer_version,
            staleness,
            update_staleness: ts
                .iter()
                .map(|t| t.trainer_version.saturating_sub(t.min_behavior_version))
                .max()
                .unwrap_or(0),
            rollout_time: secs(ss.iter().map(|s| s.done - s.start).max().unwrap_or(0)),
            transfer_time: secs(ts.iter().map(|t| t.data_delay).max().unwrap_or(0)),
            actor_time: secs(ts.iter().map(|t| t.reduced - t.pop).max().unwrap_or(0)),
            broadcast_time: secs(bdelay),
            step_time: secs(end.saturating_sub(prev_end)),
            end_time: secs(end),
            transitions,
            consumed_transitions: if quarantined {
                0
            } else {
                ts.iter().map(|t| t.transitions).sum()
            },
            quarantined,
            success_rate: if trajectories > 0 {
                reward / trajectories as f64
            } else {
                0.0
            },
            lanes: spans,
        });
        prev_end = end;
    }
    (reports, updates.into_values().collect())
}

/// Post-warmup transitions per second of step time.
pub fn throughput(reports: &[EpochReport], warmup: usize) -> f64 {
    let tail = reports.get(warmup..).unwrap_or(&[]);
    let t: f64 = tail.iter().map(|r| r.step_time).sum();
    let n: u64 = tail.iter().map(|r| r.transitions).sum();
    if t > 0.0 {
        n as f64 / t
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneIdle {
    pub lane: LaneId,
    pub node: u32,
    pub index: u32,
    pub idle_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleStats {
    pub lanes: Vec<LaneIdle>,
    /// Mean idle fraction of the sampler lanes.
    pub sampler_bubble: f64,
    pub wall_time: f64,
    pub epochs: usize,
    /// No epoch survived warmup exclusion; the stats cover the warmup.
    pub warmup_dominated: bool,
}

/// Idle fraction of every lane over the post-warmup epochs.
pub fn barrier_free_handoff_audit(reports: &[EpochReport], warmup: usize) -> BubbleStats {
    let warmup_dominated = reports.len() <= warmup;
    let used = if warmup_dominated {
        reports
    } else {
        &reports[warmup..]
    };
    let wall: f64 = used.iter().map(|r| r.step_time).sum();
    let mut acc: BTreeMap<(u32, LaneId, u32), f64> = BTreeMap::new();
    for r in used {
        for l in &r.lanes {
            *acc.entry((l.node, l.lane, l.index)).or_default() += l.idle;
        }
    }
    let lanes: Vec<LaneIdle> = acc
        .into_iter()
        .map(|((node, lane, index), idle)| LaneIdle {
            lane,
            node,
            index,
            idle_fraction: if wall > 0.0 {
                (idle / wall).min(1.0)
            } else {
                0.0
            },
        })
        .collect();
    let samplers: Vec<f64> = lanes
        .iter()
        .filter(|l| l.lane == LaneId::Sampler)
        .map(|l| l.idle_fraction)
        .collect();
    BubbleStats {
        sampler_bubble: if samplers.is_empty() {
            0.0
        } else {
            samplers.iter().sum::<f64>() / samplers.len() as f64
        },
        lanes,
        wall_time: wall,
        epochs: used.len(),
        warmup_dominated,
    }
}
