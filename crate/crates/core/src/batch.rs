//! Grouped rollout data handed from samplers to the learner.

/// One episode under a frozen behavior snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub reward: f32,
    pub behavior_version: u64,
    /// Observation at the start of each chunk, `n_chunks × obs_dim`.
    pub obs: Vec<f32>,
    /// Sampled chunks, `n_chunks × chunk × act_dim`.
    pub actions: Vec<f32>,
    /// Behavior log-density per ratio term. One per chunk at chunk
    /// granularity, `chunk` per chunk at sub-step granularity.
    pub behavior_log_prob: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub group_id: u64,
    pub horizon: u32,
    pub chunk: u32,
    pub obs_dim: u32,
    pub act_dim: u32,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BatchError {
    #[error("group {group_id}: trajectory {traj} has {field} length {got}, expected {expected}")]
    Length {
        group_id: u64,
        traj: usize,
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("group {group_id}: mixed behavior versions {a} and {b}")]
    MixedVersions { group_id: u64, a: u64, b: u64 },
    #[error("group {group_id}: chunk size must be >= 1")]
    ZeroChunk { group_id: u64 },
}

impl GroupBatch {
    pub fn n_chunks(&self) -> usize {
        n_chunks(self.horizon, self.chunk)
    }

    /// Environment transitions represented by the group.
    pub fn transitions(&self) -> u64 {
        self.trajectories.len() as u64 * self.horizon as u64
    }

    pub fn behavior_version(&self) -> Option<u64> {
        self.trajectories.first().map(|t| t.behavior_version)
    }

    pub fn mean_reward(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        self.trajectories
            .iter()
            .map(|t| t.reward as f64)
            .sum::<f64>()
            / self.trajectories.len() as f64
    }

    /// Ratio terms per chunk implied by the stored behavior log-densities.
    pub fn segments_per_chunk(&self) -> usize {
        match self.trajectories.first() {
            Some(t) if self.n_chunks() > 0 => t.behavior_log_prob.len() / self.n_chunks(),
            _ => 1,
        }
    }

    /// Checks buffer lengths and the single-version rule.
    pub fn validate(&self) -> Result<(), BatchError> {
        if self.chunk == 0 {
            return Err(BatchError::ZeroChunk {
                group_id: self.group_id,
            });
        }
        let nc = self.n_chunks();
        let obs_len = nc * self.obs_dim as usize;
        let act_len = nc * (self.chunk * self.act_dim) as usize;
        let seg = self.segments_per_chunk();
        let first_version = self.behavior_version();
        for (i, t) in self.trajectories.iter().enumerate() {
            let checks = [
                ("obs", obs_len, t.obs.len()),
                ("actions", act_len, t.actions.len()),
                ("behavior_log_prob", nc * seg, t.behavior_log_prob.len()),
            ];
            for (field, expected, got) in checks {
                if expected != got {
                    return Err(BatchError::Length {
                        group_id: self.group_id,
                        traj: i,
                        field,
                        expected,
                        got,
                    });
                }
            }
            if let Some(v) = first_version {
                if t.behavior_version != v {
                    return Err(BatchError::MixedVersions {
                        group_id: self.group_id,
                        a: v,
                        b: t.behavior_version,
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn n_chunks(horizon: u32, chunk: u32) -> usize {
    horizon.div_ceil(chunk.max(1)) as usize
}
