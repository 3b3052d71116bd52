//! Synthetic cost model shared by the live runtime and the simulator.
//!
//! Env stepping follows the env latency model, inference and training are
//! linear in work, slot sharing multiplies costs by the contention factor,
//! and links add latency plus bytes over bandwidth.

use swimlane_core::batch::n_chunks;
use swimlane_core::config::ExperimentConfig;
use swimlane_core::env::LatencyModel;
use swimlane_core::placement::{contention_cost, Component, LinkProfile, Topology, TransportKind};
use swimlane_core::{GroupBatch, RunMode, Trajectory};
use swimlane_planes::wire::{snapshot_message_len, trajectory_message_len};
use swimlane_planes::TrajectoryBatch;

pub fn us_to_ns(us: f64) -> u64 {
    (us * 1e3).round() as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub latency: LatencyModel,
    pub horizon: u32,
    pub chunk: u32,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub group_size: usize,
    pub infer_us: f64,
    pub train_us: f64,
    pub rollout_factor: u32,
    pub actor_factor: u32,
    /// Set when env and inference sit in different slot groups.
    pub env_link: Option<LinkProfile>,
    /// Set when rollout and actor sit in different slot groups.
    pub data_link: Option<LinkProfile>,
    pub control_link: Option<LinkProfile>,
    /// Set for multi-node topologies.
    pub inter_node: Option<LinkProfile>,
    pub param_count: usize,
}

impl CostModel {
    pub fn new(cfg: &ExperimentConfig, topo: &Topology, mode: RunMode) -> Self {
        let plan = &topo.plan;
        let overlapping = mode == RunMode::Async;
        let link = |a, b| {
            (plan.transport(a, b) == TransportKind::Wire).then_some(cfg.placement.local_link)
        };
        Self {
            latency: cfg.env.latency,
            horizon: cfg.env.horizon,
            chunk: cfg.policy.chunk as u32,
            obs_dim: cfg.env.obs_dim,
            act_dim: cfg.env.act_dim,
            group_size: cfg.grpo.group_size,
            infer_us: cfg.runtime.costs.infer_us_per_env_chunk,
            train_us: cfg.runtime.costs.train_us_per_transition,
            rollout_factor: plan.contention_factor(Component::Rollout, overlapping),
            actor_factor: plan.contention_factor(Component::Actor, overlapping),
            env_link: link(Component::Env, Component::Rollout),
            data_link: link(Component::Rollout, Component::Actor),
            control_link: link(Component::Actor, Component::Rollout),
            inter_node: (topo.nodes > 1).then_some(topo.link),
            param_count: cfg.policy.param_count(),
        }
    }

    /// Sub-steps of each chunk of one episode.
    pub fn chunk_substeps(&self) -> impl Iterator<Item = u32> + '_ {
        let (h, c) = (self.horizon, self.chunk.max(1));
        (0..n_chunks(h, c) as u32).map(move |i| c.min(h - i * c))
    }

    /// One vectorized chunk over `n_envs` envs, ns.
    pub fn chunk_ns(&self, substeps: u32, n_envs: usize) -> u64 {
        let work = substeps as f64 * self.latency.per_env_latency_us(n_envs)
            + n_envs as f64 * self.infer_us;
        let mut ns = us_to_ns(contention_cost(work, self.rollout_factor));
        if let Some(l) = self.env_link {
            ns += l.delay_ns(self.obs_bytes(n_envs)) + l.delay_ns(self.action_bytes(n_envs));
        }
        ns
    }

    /// Observation bytes sent to inference per chunk.
    pub fn obs_bytes(&self, n_envs: usize) -> u64 {
        (n_envs * self.obs_dim * 4) as u64
    }

    /// Action bytes sent back to the envs per chunk.
    pub fn action_bytes(&self, n_envs: usize) -> u64 {
        (n_envs * self.chunk as usize * self.act_dim * 4) as u64
    }

    /// One rollout epoch on a shard of `n_envs`, ns.
    pub fn rollout_ns(&self, n_envs: usize) -> u64 {
        self.chunk_substeps()
            .map(|k| self.chunk_ns(k, n_envs))
            .sum()
    }

    /// Gradient work over `transitions`, ns.
    pub fn actor_ns(&self, transitions: u64) -> u64 {
        us_to_ns(contention_cost(
            transitions as f64 * self.train_us,
            self.actor_factor,
        ))
    }

    /// Cross-node gradient exchange: partial sums up, merged sum down.
    pub fn reduce_ns(&self) -> u64 {
        match self.inter_node {
            Some(l) => 2 * l.delay_ns(self.gradient_bytes()),
            None => 0,
        }
    }

    /// One f64 gradient vector.
    pub fn gradient_bytes(&self) -> u64 {
        8 * self.param_count as u64
    }

    pub fn data_delay_ns(&self, bytes: u64) -> u64 {
        self.data_link.map_or(0, |l| l.delay_ns(bytes))
    }

    pub fn broadcast_delay_ns(&self) -> u64 {
        self.control_link
            .map_or(0, |l| l.delay_ns(self.snapshot_bytes()))
    }

    pub fn snapshot_bytes(&self) -> u64 {
        snapshot_message_len(self.param_count) as u64
    }

    /// Encoded size of a trajectory message carrying `groups` groups.
    pub fn shard_bytes(&self, groups: usize) -> u64 {
        let nc = n_chunks(self.horizon, self.chunk);
        let traj = Trajectory {
            reward: 0.0,
            behavior_version: 0,
            obs: vec![0.0; nc * self.obs_dim],
            actions: vec![0.0; nc * self.chunk as usize * self.act_dim],
            behavior_log_prob: vec![0.0; nc],
        };
        let group = GroupBatch {
            group_id: 0,
            horizon: self.horizon,
            chunk: self.chunk,
            obs_dim: self.obs_dim as u32,
            act_dim: self.act_dim as u32,
            trajectories: vec![traj; self.group_size],
        };
        let batch = TrajectoryBatch {
            policy_version: 0,
            groups: vec![group; groups],
        };
        trajectory_message_len(&batch).expect("well-formed dummy batch") as u64
    }
}

/// `i`-th of `parts` contiguous slices of `0..n`.
pub fn split(n: usize, parts: usize, i: usize) -> std::ops::Range<usize> {
    (i * n / parts)..((i + 1) * n / parts)
}
