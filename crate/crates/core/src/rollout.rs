//! One fixed-horizon rollout epoch over an env shard.
//!
//! Policy noise is keyed by `(seed, global env index, episode)`, so the data a
//! shard produces does not depend on how the env set is split across workers.

use crate::batch::{GroupBatch, Trajectory};
use crate::env::{EnvConfig, EnvError, GroupLayout, VecEnv};
use crate::grpo::RatioGranularity;
use crate::policy::{Params, PolicyError};
use crate::rng::{domain, Rng};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RolloutError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Work done for one inference chunk across the shard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChunkWork {
    /// Sub-steps applied (identical across envs).
    pub substeps: u32,
    /// Env cost of the vectorized step, microseconds. Envs step in parallel,
    /// so this is one env's `substeps × latency`.
    pub env_us: f64,
    pub n_envs: usize,
}

#[derive(Debug, Clone)]
pub struct EpochRollout {
    pub groups: Vec<GroupBatch>,
    pub chunks: Vec<ChunkWork>,
    pub transitions: u64,
    pub episode: u64,
}

impl EpochRollout {
    pub fn mean_reward(&self) -> f64 {
        let (sum, n) = self
            .groups
            .iter()
            .flat_map(|g| &g.trajectories)
            .fold((0.0, 0usize), |(s, n), t| (s + t.reward as f64, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Run-unique group id: episode in the high 32 bits, global group index low.
pub fn group_id(episode: u64, global_group: u64) -> u64 {
    (episode << 32) | global_group
}

pub struct RolloutWorker {
    env: VecEnv,
    seed: u64,
    chunk: usize,
    granularity: RatioGranularity,
}

impl RolloutWorker {
    /// Worker for global groups `first_group..first_group + n_groups`.
    pub fn new(
        cfg: &EnvConfig,
        seed: u64,
        layout: GroupLayout,
        first_group: u64,
        chunk: usize,
        granularity: RatioGranularity,
    ) -> Result<Self, RolloutError> {
        let (env, _) = VecEnv::shard(cfg, seed, layout, first_group)?;
        Ok(Self {
            env,
            seed,
            chunk,
            granularity,
        })
    }

    pub fn n_envs(&self) -> usize {
        self.env.n_envs()
    }

    pub fn env(&self) -> &VecEnv {
        &self.env
    }

    /// Bytes of observation and action staging one chunk needs.
    pub fn staging_bytes(&self) -> u64 {
        let c = self.env.config();
        (self.n_envs() * (c.obs_dim + self.chunk * c.act_dim) * 4) as u64
    }

    /// Runs one episode per env with a frozen snapshot and starts the next one.
    ///
    /// `on_chunk` is called after each vectorized step with the chunk's work
    /// and the observation/action staging of that chunk.
    pub fn run_epoch(
        &mut self,
        params: &Params<f32>,
        version: u64,
        mut on_chunk: impl FnMut(&ChunkWork, &[f32], &[f32]),
    ) -> Result<EpochRollout, RolloutError> {
        let cfg = self.env.config().clone();
        let layout = self.env.layout();
        let n = self.env.n_envs();
        let episode = self.env.episode();
        let chunk = self.chunk;
        let ad = cfg.act_dim;
        let od = cfg.obs_dim;
        let g = layout.group_size;
        let first_env = self.env.first_group() * g as u64;
        let mut noise: Vec<Rng> = (0..n)
            .map(|e| Rng::keyed(self.seed, domain::POLICY, first_env + e as u64, episode))
            .collect();
        let seg_len = match self.granularity {
            RatioGranularity::Chunk => chunk * ad,
            RatioGranularity::Substep => ad,
        };

        let mut trajs: Vec<Trajectory> = (0..n)
            .map(|_| Trajectory {
                reward: 0.0,
                behavior_version: version,
                obs: Vec::new(),
                actions: Vec::new(),
                behavior_log_prob: Vec::new(),
            })
            .collect();
        let mut obs = self.env.last_obs().to_vec();
        let mut actions = vec![0.0f32; n * chunk * ad];
        let mut chunks = Vec::new();
        let mut transitions = 0u64;
        while !self.env.all_done() {
            for e in 0..n {
                let o = &obs[e * od..(e + 1) * od];
                let s = params.sample_chunk(o, &mut noise[e])?;
                let t = &mut trajs[e];
                t.obs.extend_from_slice(o);
                t.actions.extend_from_slice(&s.sampled);
                let lps = if seg_len == chunk * ad {
                    vec![s.log_prob]
                } else {
                    params.segment_log_probs(o, &s.sampled, seg_len)?
                };
                t.behavior_log_prob
                    .extend(lps.into_iter().map(|x| x as f32));
                actions[e * chunk * ad..(e + 1) * chunk * ad].copy_from_slice(&s.sampled);
            }
            let out = self.env.step(&actions, chunk)?;
            let substeps = out.max_applied();
            transitions += out.applied.iter().map(|&a| a as u64).sum::<u64>();
            let work = ChunkWork {
                substeps,
                env_us: out.cost_us.first().copied().unwrap_or(0.0),
                n_envs: n,
            };
            on_chunk(&work, &obs, &actions);
            chunks.push(work);
            obs = out.obs.values.into_vec();
        }
        let rewards = self.env.episode_outcome()?;
        for (t, r) in trajs.iter_mut().zip(rewards) {
            t.reward = r;
        }
        self.env.next_episode()?;

        let mut groups = Vec::with_capacity(layout.n_groups);
        let mut it = trajs.into_iter();
        for k in 0..layout.n_groups {
            groups.push(GroupBatch {
                group_id: group_id(episode, self.env.first_group() + k as u64),
                horizon: cfg.horizon,
                chunk: chunk as u32,
                obs_dim: od as u32,
                act_dim: ad as u32,
                trajectories: it.by_ref().take(g).collect(),
            });
        }
        Ok(EpochRollout {
            groups,
            chunks,
            transitions,
            episode,
        })
    }
}
