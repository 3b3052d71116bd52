//! Discrete-event simulator of the rollout/training pipeline.
//!
//! The four lanes reduce to two compute stages (rollout with inference, and
//! the actor) joined by two communication channels (trajectory transfer and
//! weight broadcast). The simulator shares the live runtime's cost model,
//! staleness gate, queue bound and weight-mailbox rules, so a virtual-time
//! live run and a simulation of the same config agree.

mod engine;

use std::fmt::Write as _;
use std::hash::{Hash, Hasher};

use serde::Serialize;
use swimlane_core::config::ExperimentConfig;
use swimlane_core::placement::Topology;
use swimlane_core::RunMode;
use swimlane_runtime::cost::CostModel;
use swimlane_runtime::RunResult;

use engine::{Engine, EpochTrace, Pipeline};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("simulation blocked at t={time_ns} ns: {state}")]
    Blocked { time_ns: u64, state: String },
    #[error("simulated and live runs use different configurations ({sim:016x} vs {live:016x})")]
    Mismatch { sim: u64, live: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Bottleneck {
    Rollout,
    Actor,
    Transfer,
}

impl std::fmt::Display for Bottleneck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Rollout => "rollout",
            Self::Actor => "actor",
            Self::Transfer => "transfer",
        })
    }
}

/// Stage times of one epoch, seconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochTiming {
    pub rollout_time: f64,
    pub transfer_time: f64,
    pub actor_time: f64,
    pub broadcast_time: f64,
    pub step_time: f64,
    pub end_time: f64,
    pub behavior_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    pub mode: RunMode,
    pub strategy: String,
    pub ratio: String,
    pub nodes: u32,
    pub n_envs: usize,
    pub epochs: u64,
    pub warmup: usize,
    /// Transitions per second over post-warmup epochs, all nodes.
    pub throughput: f64,
    /// Means over post-warmup epochs, seconds.
    pub step_time: f64,
    pub rollout_time: f64,
    pub actor_time: f64,
    pub transfer_time: f64,
    pub broadcast_time: f64,
    /// Busy fraction of the slowest sampler and rank after warmup.
    pub sampler_occupancy: f64,
    pub actor_occupancy: f64,
    pub bottleneck: Bottleneck,
    pub max_staleness: u64,
    pub timeline: Vec<EpochTiming>,
    pub config_digest: u64,
}

fn secs(ns: u64) -> f64 {
    ns as f64 * 1e-9
}

/// Hash of everything that shapes the timeline. Seeds, the clock choice and
/// the watchdog do not.
pub fn config_digest(cfg: &ExperimentConfig, mode: RunMode, epochs: u64) -> u64 {
    let mut c = cfg.clone();
    c.runtime.mode = mode;
    c.runtime.epochs = epochs;
    c.runtime.seed = 0;
    c.runtime.virtual_time = true;
    c.runtime.watchdog_secs = 0.0;
    let mut h = std::collections::hash_map::DefaultHasher::new();
    serde_json::to_string(&c)
        .expect("config serializes")
        .hash(&mut h);
    h.finish()
}

/// Simulates `epochs` epochs of `cfg` on `topo`.
pub fn simulate(
    cfg: &ExperimentConfig,
    topo: &Topology,
    mode: RunMode,
    epochs: u64,
) -> Result<SimResult, SimError> {
    let (queue, staleness) = match mode {
        RunMode::Sync => (cfg.runtime.queue_capacity, 0),
        RunMode::Async => (cfg.runtime.queue_capacity, cfg.runtime.staleness_limit),
    };
    simulate_bounds(cfg, topo, mode, epochs, queue, staleness)
}

/// Like [`simulate`] with explicit queue and staleness bounds; `usize::MAX`
/// and `u64::MAX` mean unbounded.
pub fn simulate_bounds(
    cfg: &ExperimentConfig,
    topo: &Topology,
    mode: RunMode,
    epochs: u64,
    queue: usize,
    staleness: u64,
) -> Result<SimResult, SimError> {
    cfg.validate()
        .map_err(|e| SimError::Config(e.to_string()))?;
    let plan = &topo.plan;
    let (workers, ranks) = (
        plan.rollout_workers() as usize,
        plan.actor_workers() as usize,
    );
    if epochs == 0 || queue == 0 || cfg.n_groups() < workers.max(ranks) {
        return Err(SimError::Config(format!(
            "need epochs >= 1, queue >= 1 and at least {} groups",
            workers.max(ranks)
        )));
    }
    let cost = CostModel::new(cfg, topo, mode);
    let staleness = if mode == RunMode::Sync { 0 } else { staleness };
    let pipeline = Pipeline::new(
        &cost,
        cfg.n_groups(),
        workers,
        ranks,
        epochs,
        queue,
        staleness,
    );
    let trace = Engine::new(&pipeline).run()?;
    let warmup = cfg.runtime.warmup_epochs.min(epochs as usize - 1);
    Ok(summarize(
        cfg, topo, mode, epochs, warmup, &pipeline, &trace,
    ))
}

fn summarize(
    cfg: &ExperimentConfig,
    topo: &Topology,
    mode: RunMode,
    epochs: u64,
    warmup: usize,
    p: &Pipeline,
    trace: &[EpochTrace],
) -> SimResult {
    let mut timeline = Vec::new();
    let mut prev = 0;
    // publish time of version v is trace[v - 1].reduced
    let version_at = |t: u64| trace.iter().filter(|e| e.reduced < t).count() as u64;
    let mut max_staleness = 0;
    for e in trace {
        let behavior = e.samples.iter().map(|s| s.3).min().unwrap_or(0);
        for s in &e.samples {
            max_staleness = max_staleness.max(version_at(s.1).saturating_sub(s.3));
        }
        timeline.push(EpochTiming {
            rollout_time: secs(e.samples.iter().map(|s| s.1 - s.0).max().unwrap_or(0)),
            transfer_time: secs(e.transfer),
            actor_time: secs(e.trains.iter().map(|t| e.reduced - t.0).max().unwrap_or(0)),
            broadcast_time: secs(p.broadcast_ns),
            step_time: secs(e.end - prev),
            end_time: secs(e.end),
            behavior_version: behavior,
        });
        prev = e.end;
    }
    let tail = &timeline[warmup..];
    let n = tail.len() as f64;
    let mean = |f: fn(&EpochTiming) -> f64| tail.iter().map(f).sum::<f64>() / n;
    let step_sum: f64 = tail.iter().map(|e| e.step_time).sum();
    let transitions =
        (cfg.env.n_envs as u64 * cfg.env.horizon as u64 * topo.nodes as u64) as f64 * n;
    let window = (
        if warmup == 0 {
            0
        } else {
            trace[warmup - 1].end
        },
        trace[trace.len() - 1].end,
    );
    let busy = |iv: &mut dyn Iterator<Item = (u64, u64)>| -> u64 {
        iv.map(|(a, b)| b.min(window.1).saturating_sub(a.max(window.0)))
            .sum()
    };
    let span = (window.1 - window.0).max(1) as f64;
    let sampler_occupancy = (0..p.rollout_ns.len())
        .map(|w| busy(&mut trace.iter().map(|e| (e.samples[w].0, e.samples[w].1))) as f64 / span)
        .fold(f64::INFINITY, f64::min);
    let actor_occupancy = (0..p.actor_ns.len())
        .map(|r| busy(&mut trace.iter().map(|e| (e.trains[r].0, e.reduced))) as f64 / span)
        .fold(f64::INFINITY, f64::min);
    let (rollout_time, actor_time, transfer_time) = (
        mean(|e| e.rollout_time),
        mean(|e| e.actor_time),
        mean(|e| e.transfer_time),
    );
    let bottleneck = bottleneck(rollout_time, actor_time, transfer_time);
    let plan = &topo.plan;
    SimResult {
        mode,
        strategy: plan.strategy.to_string(),
        ratio: plan
            .ratio
            .map_or_else(|| "-".to_string(), |r| r.to_string()),
        nodes: topo.nodes,
        n_envs: cfg.env.n_envs,
        epochs,
        warmup,
        throughput: transitions / step_sum,
        step_time: mean(|e| e.step_time),
        rollout_time,
        actor_time,
        transfer_time,
        broadcast_time: mean(|e| e.broadcast_time),
        sampler_occupancy,
        actor_occupancy,
        bottleneck,
        max_staleness,
        timeline,
        config_digest: config_digest(cfg, mode, epochs),
    }
}

/// Stage with the largest time; ties go to the earlier of rollout, actor,
/// transfer.
pub fn bottleneck(rollout: f64, actor: f64, transfer: f64) -> Bottleneck {
    let mut best = (Bottleneck::Rollout, rollout);
    for c in [(Bottleneck::Actor, actor), (Bottleneck::Transfer, transfer)] {
        if c.1 > best.1 {
            best = c;
        }
    }
    best.0
}

/// One simulation per env count.
pub fn sweep_envs(
    cfg: &ExperimentConfig,
    mode: RunMode,
    epochs: u64,
    env_counts: &[usize],
) -> Result<Vec<SimResult>, SimError> {
    if env_counts.windows(2).any(|w| w[0] > w[1]) {
        return Err(SimError::Config(
            "env counts must be sorted ascending".into(),
        ));
    }
    env_counts
        .iter()
        .map(|&n| {
            let mut c = cfg.clone();
            c.env.n_envs = n;
            let topo = c.topology().map_err(|e| SimError::Config(e.to_string()))?;
            simulate(&c, &topo, mode, epochs)
        })
        .collect()
}

pub const CSV_HEADER: &str = "n_envs,mode,strategy,ratio,throughput,step_time,rollout_time,actor_time,transfer_time,bottleneck";

pub fn curve_csv(curve: &[SimResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in curve {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.n_envs,
            r.mode,
            r.strategy,
            r.ratio,
            r.throughput,
            r.step_time,
            r.rollout_time,
            r.actor_time,
            r.transfer_time,
            r.bottleneck
        );
    }
    out
}

/// Post-warmup aggregates of a live run, in the simulator's terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LiveAggregate {
    pub config_digest: u64,
    pub throughput: f64,
    pub step_time: f64,
    pub rollout_time: f64,
    pub actor_time: f64,
    pub transfer_time: f64,
}

impl LiveAggregate {
    pub fn from_run(cfg: &ExperimentConfig, run: &RunResult) -> Self {
        let warmup = cfg
            .runtime
            .warmup_epochs
            .min(run.reports.len().saturating_sub(1));
        let tail = &run.reports[warmup..];
        let n = tail.len().max(1) as f64;
        let mean =
            |f: fn(&swimlane_runtime::EpochReport) -> f64| tail.iter().map(f).sum::<f64>() / n;
        Self {
            config_digest: config_digest(cfg, run.mode, run.reports.len() as u64),
            throughput: run.throughput(warmup),
            step_time: mean(|e| e.step_time),
            rollout_time: mean(|e| e.rollout_time),
            actor_time: mean(|e| e.actor_time),
            transfer_time: mean(|e| e.transfer_time),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    /// Relative deviations `|sim − live| / live`.
    pub throughput: f64,
    pub step_time: f64,
    pub rollout_time: f64,
    pub actor_time: f64,
    pub transfer_time: f64,
    pub max_deviation: f64,
    pub threshold: f64,
    pub pass: bool,
}

pub const FIT_THRESHOLD: f64 = 0.10;

fn rel(sim: f64, live: f64) -> f64 {
    if live == 0.0 {
        if sim == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (sim - live).abs() / live.abs()
    }
}

/// Compares a simulation with a live run of the same configuration.
pub fn fit_check(sim: &SimResult, live: &LiveAggregate) -> Result<FitReport, SimError> {
    if sim.config_digest != live.config_digest {
        return Err(SimError::Mismatch {
            sim: sim.config_digest,
            live: live.config_digest,
        });
    }
    let d = [
        rel(sim.throughput, live.throughput),
        rel(sim.step_time, live.step_time),
        rel(sim.rollout_time, live.rollout_time),
        rel(sim.actor_time, live.actor_time),
        rel(sim.transfer_time, live.transfer_time),
    ];
    let max_deviation = d.iter().copied().fold(0.0, f64::max);
    Ok(FitReport {
        throughput: d[0],
        step_time: d[1],
        rollout_time: d[2],
        actor_time: d[3],
        transfer_time: d[4],
        max_deviation,
        threshold: FIT_THRESHOLD,
        pass: max_deviation < FIT_THRESHOLD,
    })
}
