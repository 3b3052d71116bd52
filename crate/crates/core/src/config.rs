//! Experiment configuration tree, loaded from JSON.
//!
//! Every section rejects unknown keys. Missing keys take the defaults below.

use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::grpo::{GrpoConfig, RatioGranularity};
use crate::placement::{
    plan_build, replicate, Component, LinkProfile, PlacementPlan, Ratio, Strategy, Topology,
    TransportKind,
};
use crate::policy::PolicyConfig;
use crate::pool::PoolsConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Lock-step rollout, transfer, train, broadcast.
    #[serde(alias = "sync_alternating")]
    Sync,
    /// Pipelined lanes with bounded staleness.
    #[default]
    #[serde(alias = "async_swimlane")]
    Async,
}

impl std::str::FromStr for RunMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sync" => Ok(Self::Sync),
            "async" => Ok(Self::Async),
            other => Err(ConfigError::Invalid(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sync => "sync",
            Self::Async => "async",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlacementConfig {
    pub strategy: Strategy,
    pub slots: u32,
    pub ratio: Ratio,
    pub nodes: u32,
    /// Link between slot groups inside a node.
    pub local_link: LinkProfile,
    /// Link between nodes.
    pub inter_node_link: LinkProfile,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Hybrid,
            slots: 2,
            ratio: Ratio::new(1, 1),
            nodes: 1,
            local_link: LinkProfile::unlimited(),
            inter_node_link: LinkProfile {
                latency_us: 50.0,
                bandwidth_bps: Some(10e9),
            },
        }
    }
}

/// Synthetic costs of the model-side work. Env costs come from the env
/// latency model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    /// Batched inference cost per env per chunk, microseconds.
    pub infer_us_per_env_chunk: f64,
    /// Learner cost per transition, microseconds.
    pub train_us_per_transition: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            infer_us_per_env_chunk: 0.0,
            train_us_per_transition: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeConfig {
    pub mode: RunMode,
    /// Rollout epochs, equal to the number of optimizer steps.
    pub epochs: u64,
    /// Data queue bound, counted in rollout epochs.
    pub queue_capacity: usize,
    pub staleness_limit: u64,
    pub seed: u64,
    /// Book synthetic costs on a virtual clock instead of spinning.
    pub virtual_time: bool,
    pub costs: CostConfig,
    /// Abort when a lane makes no progress for this long (real seconds).
    pub watchdog_secs: f64,
    /// Leading epochs excluded from throughput summaries.
    pub warmup_epochs: usize,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::Async,
            epochs: 20,
            queue_capacity: 2,
            staleness_limit: 1,
            seed: 0,
            virtual_time: true,
            costs: CostConfig::default(),
            watchdog_secs: 30.0,
            warmup_epochs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub grpo: GrpoConfig,
    pub placement: PlacementConfig,
    pub runtime: RuntimeConfig,
    pub pools: PoolsConfig,
}

impl ExperimentConfig {
    /// Parses and validates. Parse errors carry serde's line/column and name
    /// the offending key.
    pub fn from_json_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn n_groups(&self) -> usize {
        self.env.n_envs / self.grpo.group_size.max(1)
    }

    pub fn plan(&self) -> Result<PlacementPlan, ConfigError> {
        let p = &self.placement;
        plan_build(p.strategy, p.slots, p.ratio).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn topology(&self) -> Result<Topology, ConfigError> {
        let plan = self.plan()?;
        replicate(&plan, self.placement.nodes, self.placement.inter_node_link)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        self.env
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.policy
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.grpo
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.policy.obs_dim != self.env.obs_dim || self.policy.act_dim != self.env.act_dim {
            return inv(format!(
                "policy dims (obs {}, act {}) must match env dims (obs {}, act {})",
                self.policy.obs_dim, self.policy.act_dim, self.env.obs_dim, self.env.act_dim
            ));
        }
        if !self.env.n_envs.is_multiple_of(self.grpo.group_size) {
            return inv(format!(
                "group_size {} does not divide n_envs {}",
                self.grpo.group_size, self.env.n_envs
            ));
        }
        let plan = self.plan()?;
        self.topology()?;
        if (self.n_groups() as u32) < plan.rollout_workers() {
            return inv(format!(
                "{} groups cannot feed {} rollout workers",
                self.n_groups(),
                plan.rollout_workers()
            ));
        }
        let rt = &self.runtime;
        if rt.epochs == 0 {
            return inv("runtime.epochs must be >= 1".into());
        }
        if rt.queue_capacity == 0 {
            return inv("runtime.queue_capacity must be >= 1".into());
        }
        if rt.watchdog_secs.is_nan() || rt.watchdog_secs <= 0.0 {
            return inv("runtime.watchdog_secs must be > 0".into());
        }
        let c = &rt.costs;
        if !(c.infer_us_per_env_chunk >= 0.0 && c.train_us_per_transition >= 0.0) {
            return inv("runtime.costs values must be >= 0".into());
        }
        if self.grpo.ratio_granularity == RatioGranularity::Substep
            && plan.transport(Component::Rollout, Component::Actor) == TransportKind::Wire
        {
            return inv(
                "ratio_granularity \"substep\" needs an in-process data plane; \
                 the wire format carries one behavior log-prob per chunk"
                    .into(),
            );
        }
        Ok(())
    }
}
