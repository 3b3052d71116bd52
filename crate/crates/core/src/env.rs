//! Vectorized "reach the target" environment.
//!
//! Each env holds a 2-D agent position and a 2-D target inside the box
//! `[-1, 1]²`. An action moves the agent by `clamp(a, -1, 1) · dt` and the
//! result is clamped to the box. Episodes run for a fixed horizon and emit a
//! single binary reward at the end: 1 when the agent is strictly closer than
//! `success_radius` to the target.
//!
//! Envs are laid out in groups; all members of a group start from identical
//! agent/target positions so the learner can normalize rewards within the
//! group. Observation channels beyond the first four carry fresh seeded noise
//! every step. They hold no signal and only scale the payload size.
//!
//! Stepping does not burn time itself. It reports the synthetic cost of the
//! work, `applied_substeps × per_env_latency(n_envs)` per env, and the caller
//! either spins for it or books it on a virtual clock.

use serde::{Deserialize, Serialize};

use crate::rng::{domain, Rng};
use crate::tensor::Vector;

pub const ACT_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("invalid env config: {0}")]
    Config(String),
    #[error("group layout {n_groups}x{group_size} does not cover {n_envs} envs")]
    Layout {
        n_groups: usize,
        group_size: usize,
        n_envs: usize,
    },
    #[error("env {env} is done; reset before stepping")]
    SteppedDone { env: usize },
    #[error("episode still running for env {env} (t={t}, horizon={horizon})")]
    NotFinished { env: usize, t: u32, horizon: u32 },
    #[error("expected {expected} action values, got {got}")]
    ActionLen { expected: usize, got: usize },
}

/// Per-env step latency as a function of the number of co-simulated envs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    /// Base latency of one env sub-step, microseconds.
    pub ell0_us: f64,
    /// Env count where saturation starts.
    pub n0: u32,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            ell0_us: 100.0,
            n0: 768,
            beta: 0.0,
            gamma: 1.0,
        }
    }
}

impl LatencyModel {
    /// `ell0 · (1 + beta · max(0, (n − n0)/n0)^gamma)`, microseconds.
    pub fn per_env_latency_us(&self, n: usize) -> f64 {
        let n0 = self.n0.max(1) as f64;
        let excess = ((n as f64 - n0) / n0).max(0.0);
        if excess == 0.0 || self.beta == 0.0 {
            return self.ell0_us;
        }
        self.ell0_us * (1.0 + self.beta * excess.powf(self.gamma))
    }
}

/// Free-function form of [`LatencyModel::per_env_latency_us`].
pub fn per_env_latency(n: usize, cfg: &EnvConfig) -> f64 {
    cfg.latency.per_env_latency_us(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub n_envs: usize,
    pub horizon: u32,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub dt: f32,
    pub success_radius: f32,
    /// Agents spawn uniformly in `[-start_extent, start_extent]²`.
    pub start_extent: f32,
    /// Targets spawn uniformly in `[-target_extent, target_extent]²`.
    pub target_extent: f32,
    pub latency: LatencyModel,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_envs: 64,
            horizon: 16,
            obs_dim: 4,
            act_dim: ACT_DIM,
            dt: 0.15,
            success_radius: 0.1,
            start_extent: 0.5,
            target_extent: 0.8,
            latency: LatencyModel::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::Config(m.to_string()));
        if self.n_envs == 0 {
            return bad("n_envs must be >= 1");
        }
        if self.horizon == 0 {
            return bad("horizon must be >= 1");
        }
        if self.obs_dim < 4 {
            return bad("obs_dim must be >= 4");
        }
        if self.act_dim != ACT_DIM {
            return bad("act_dim must be 2");
        }
        if self.success_radius.is_nan() || self.success_radius <= 0.0 {
            return bad("success_radius must be > 0");
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad("dt must be > 0");
        }
        if !(0.0..=1.0).contains(&self.start_extent) || !(0.0..=1.0).contains(&self.target_extent) {
            return bad("spawn extents must lie in [0, 1]");
        }
        let l = &self.latency;
        if !(l.ell0_us >= 0.0 && l.beta >= 0.0 && l.gamma > 0.0 && l.n0 >= 1) {
            return bad("latency model needs ell0 >= 0, beta >= 0, gamma > 0, n0 >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    pub n_groups: usize,
    pub group_size: usize,
}

impl GroupLayout {
    pub fn n_envs(&self) -> usize {
        self.n_groups * self.group_size
    }
}

/// Observations for all envs, `n_envs × obs_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub values: Vector<f32>,
    pub obs_dim: usize,
}

impl Observation {
    pub fn row(&self, env: usize) -> &[f32] {
        &self.values[env * self.obs_dim..(env + 1) * self.obs_dim]
    }

    pub fn n_envs(&self) -> usize {
        self.values.len() / self.obs_dim
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub obs: Observation,
    pub done: Vec<bool>,
    /// Sub-steps applied per env in this call.
    pub applied: Vec<u32>,
    /// Synthetic cost per env, microseconds.
    pub cost_us: Vec<f64>,
}

impl StepOutcome {
    /// Largest applied sub-step count (envs step in lock-step, so all agree).
    pub fn max_applied(&self) -> u32 {
        self.applied.iter().copied().max().unwrap_or(0)
    }
}

/// Binary outcome reward per env.
pub type OutcomeReward = f32;

/// State of one shard of envs, owned by a single rollout worker.
#[derive(Debug, Clone)]
pub struct VecEnv {
    cfg: EnvConfig,
    layout: GroupLayout,
    seed: u64,
    first_group: u64,
    episode: u64,
    agent: Vec<[f32; 2]>,
    target: Vec<[f32; 2]>,
    t: Vec<u32>,
    noise: Vec<Rng>,
    last_obs: Vec<f32>,
}

impl VecEnv {
    /// Resets a full env set whose layout must cover `cfg.n_envs`.
    pub fn reset(
        cfg: &EnvConfig,
        seed: u64,
        layout: GroupLayout,
    ) -> Result<(Self, Observation), EnvError> {
        if layout.n_envs() != cfg.n_envs {
            return Err(EnvError::Layout {
                n_groups: layout.n_groups,
                group_size: layout.group_size,
                n_envs: cfg.n_envs,
            });
        }
        Self::shard(cfg, seed, layout, 0)
    }

    /// Resets a shard covering global groups `first_group..first_group + layout.n_groups`.
    ///
    /// Initial conditions and noise are keyed by global group/env index, so a
    /// shard sees the same episodes no matter how the env set is partitioned.
    pub fn shard(
        cfg: &EnvConfig,
        seed: u64,
        layout: GroupLayout,
        first_group: u64,
    ) -> Result<(Self, Observation), EnvError> {
        cfg.validate()?;
        if layout.group_size == 0 || layout.n_groups == 0 {
            return Err(EnvError::Layout {
                n_groups: layout.n_groups,
                group_size: layout.group_size,
                n_envs: cfg.n_envs,
            });
        }
        let n = layout.n_envs();
        let mut env = Self {
            cfg: cfg.clone(),
            layout,
            seed,
            first_group,
            episode: 0,
            agent: vec![[0.0; 2]; n],
            target: vec![[0.0; 2]; n],
            t: vec![0; n],
            noise: Vec::with_capacity(n),
            last_obs: Vec::new(),
        };
        env.draw_episode();
        let obs = env.observe();
        Ok((env, obs))
    }

    pub fn n_envs(&self) -> usize {
        self.t.len()
    }

    pub fn layout(&self) -> GroupLayout {
        self.layout
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn episode(&self) -> u64 {
        self.episode
    }

    pub fn first_group(&self) -> u64 {
        self.first_group
    }

    pub fn step_index(&self, env: usize) -> u32 {
        self.t[env]
    }

    pub fn agent_pos(&self, env: usize) -> [f32; 2] {
        self.agent[env]
    }

    pub fn target_pos(&self, env: usize) -> [f32; 2] {
        self.target[env]
    }

    pub fn set_agent_pos(&mut self, env: usize, pos: [f32; 2]) {
        self.agent[env] = [pos[0].clamp(-1.0, 1.0), pos[1].clamp(-1.0, 1.0)];
    }

    pub fn all_done(&self) -> bool {
        self.t.iter().all(|&t| t == self.cfg.horizon)
    }

    fn global_group(&self, local_group: usize) -> u64 {
        self.first_group + local_group as u64
    }

    fn draw_episode(&mut self) {
        let g = self.layout.group_size;
        let start = self.cfg.start_extent as f64;
        let reach = self.cfg.target_extent as f64;
        self.noise.clear();
        for group in 0..self.layout.n_groups {
            let gid = self.global_group(group);
            let mut init = Rng::keyed(self.seed, domain::INIT, gid, self.episode);
            let agent = [
                init.uniform_in(-start, start) as f32,
                init.uniform_in(-start, start) as f32,
            ];
            let target = [
                init.uniform_in(-reach, reach) as f32,
                init.uniform_in(-reach, reach) as f32,
            ];
            for member in 0..g {
                let env = group * g + member;
                self.agent[env] = agent;
                self.target[env] = target;
                self.t[env] = 0;
                let global_env = gid * g as u64 + member as u64;
                self.noise.push(Rng::keyed(
                    self.seed,
                    domain::OBS_NOISE,
                    global_env,
                    self.episode,
                ));
            }
        }
    }

    fn observe(&mut self) -> Observation {
        let d = self.cfg.obs_dim;
        let n = self.n_envs();
        let mut values = Vec::with_capacity(n * d);
        for env in 0..n {
            values.extend_from_slice(&self.agent[env]);
            values.extend_from_slice(&self.target[env]);
            let rng = &mut self.noise[env];
            values.extend((4..d).map(|_| rng.standard_normal() as f32));
        }
        self.last_obs.clone_from(&values);
        Observation {
            values: Vector::from_vec(values),
            obs_dim: d,
        }
    }

    /// Most recent observation, `n_envs × obs_dim`.
    pub fn last_obs(&self) -> &[f32] {
        &self.last_obs
    }

    /// Applies one action chunk per env.
    ///
    /// `actions` holds `n_envs × chunk × act_dim` values. Sub-steps beyond the
    /// horizon are dropped.
    pub fn step(&mut self, actions: &[f32], chunk: usize) -> Result<StepOutcome, EnvError> {
        let n = self.n_envs();
        let expected = n * chunk * ACT_DIM;
        if actions.len() != expected {
            return Err(EnvError::ActionLen {
                expected,
                got: actions.len(),
            });
        }
        if let Some(env) = self.t.iter().position(|&t| t >= self.cfg.horizon) {
            return Err(EnvError::SteppedDone { env });
        }
        let latency = self.cfg.latency.per_env_latency_us(n);
        let dt = self.cfg.dt;
        let mut applied = Vec::with_capacity(n);
        let mut done = Vec::with_capacity(n);
        let mut cost_us = Vec::with_capacity(n);
        for env in 0..n {
            let remaining = (self.cfg.horizon - self.t[env]) as usize;
            let k = chunk.min(remaining);
            let base = env * chunk * ACT_DIM;
            let mut pos = self.agent[env];
            for s in 0..k {
                for (axis, p) in pos.iter_mut().enumerate() {
                    let a = actions[base + s * ACT_DIM + axis].clamp(-1.0, 1.0);
                    *p = (*p + a * dt).clamp(-1.0, 1.0);
                }
            }
            self.agent[env] = pos;
            self.t[env] += k as u32;
            applied.push(k as u32);
            done.push(self.t[env] == self.cfg.horizon);
            cost_us.push(k as f64 * latency);
        }
        let obs = self.observe();
        Ok(StepOutcome {
            obs,
            done,
            applied,
            cost_us,
        })
    }

    /// Terminal reward per env. Every env must be at the horizon.
    pub fn episode_outcome(&self) -> Result<Vec<OutcomeReward>, EnvError> {
        let horizon = self.cfg.horizon;
        if let Some(env) = self.t.iter().position(|&t| t != horizon) {
            return Err(EnvError::NotFinished {
                env,
                t: self.t[env],
                horizon,
            });
        }
        let r = self.cfg.success_radius;
        Ok((0..self.n_envs())
            .map(|env| {
                let dx = self.agent[env][0] - self.target[env][0];
                let dy = self.agent[env][1] - self.target[env][1];
                if (dx * dx + dy * dy).sqrt() < r {
                    1.0
                } else {
                    0.0
                }
            })
            .collect())
    }

    /// Starts the next episode after all envs finished, keeping the layout.
    pub fn next_episode(&mut self) -> Result<Observation, EnvError> {
        self.episode_outcome()?;
        self.episode += 1;
        self.draw_episode();
        Ok(self.observe())
    }
}

/// Free-function form of [`VecEnv::reset`].
pub fn env_reset(
    cfg: &EnvConfig,
    seed: u64,
    layout: GroupLayout,
) -> Result<(VecEnv, Observation), EnvError> {
    VecEnv::reset(cfg, seed, layout)
}
