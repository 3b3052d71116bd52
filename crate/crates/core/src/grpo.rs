//! Group Relative Policy Optimization.
//!
//! Rewards are normalized within each group of `G` episodes that shared an
//! initial condition. Every ratio term (one per chunk, or one per sub-step)
//! contributes the clipped surrogate `-min(ρA, clip(ρ, 1-ε, 1+ε)A)` and the
//! loss is the mean over all ratio terms in the update.
//!
//! Gradients are accumulated in `f64` micro-batch buffers in a fixed order
//! (group id, then trajectory index). Data-parallel learners each produce a
//! [`GradAccum`] over their shard, the partials are merged in rank order and
//! every rank then applies the same [`finish_update`].

use serde::{Deserialize, Serialize};

use crate::batch::{BatchError, GroupBatch};
use crate::policy::{Params, PolicyError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrpoError {
    #[error("group {group_id}: expected {expected} trajectories, got {got}")]
    GroupSize {
        group_id: u64,
        expected: usize,
        got: usize,
    },
    #[error("group {group_id}: {what}")]
    Shape { group_id: u64, what: String },
    #[error("group {group_id}: non-finite {what}")]
    NonFinite { group_id: u64, what: &'static str },
    #[error("non-finite parameters after optimizer step")]
    NonFiniteUpdate,
    #[error("invalid grpo config: {0}")]
    Config(String),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

impl GrpoError {
    /// Group that triggered the error, if the error is attributable to one.
    pub fn group_id(&self) -> Option<u64> {
        match self {
            Self::GroupSize { group_id, .. }
            | Self::Shape { group_id, .. }
            | Self::NonFinite { group_id, .. } => Some(*group_id),
            Self::Batch(
                BatchError::Length { group_id, .. }
                | BatchError::MixedVersions { group_id, .. }
                | BatchError::ZeroChunk { group_id },
            ) => Some(*group_id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioGranularity {
    /// One joint ratio per inference chunk.
    #[default]
    Chunk,
    /// One ratio per executed action.
    Substep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub adv_epsilon: f64,
    /// Trajectories per accumulation slice.
    pub micro_batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub opt_eps: f64,
    pub max_grad_norm: Option<f64>,
    /// Weight of the KL penalty towards the initial policy; 0 disables it.
    pub kl_coef: f64,
    pub ratio_granularity: RatioGranularity,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            adv_epsilon: 1e-8,
            micro_batch: 8,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            opt_eps: 1e-8,
            max_grad_norm: Some(1.0),
            kl_coef: 0.0,
            ratio_granularity: RatioGranularity::Chunk,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::Config(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if self.micro_batch == 0 {
            return bad("micro_batch must be >= 1");
        }
        if !(self.adv_epsilon >= 0.0 && self.lr >= 0.0 && self.opt_eps >= 0.0) {
            return bad("adv_epsilon, lr and opt_eps must be >= 0");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if matches!(self.max_grad_norm, Some(n) if n.is_nan() || n <= 0.0) {
            return bad("max_grad_norm must be > 0 when set");
        }
        if self.kl_coef.is_nan() || self.kl_coef < 0.0 {
            return bad("kl_coef must be >= 0");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.opt_eps,
        }
    }
}

/// `A_i = (r_i − mean) / (popstd + δ)`; all zeros when the rewards are constant.
pub fn advantages(rewards: &[f32], adv_epsilon: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    if rewards.is_empty() {
        return Vec::new();
    }
    let first = rewards[0];
    if rewards.iter().all(|&r| r == first) {
        return vec![0.0; rewards.len()];
    }
    // Work on offsets from the first reward. Differences of f32 values are
    // exact in f64, so a constant shift of all rewards changes nothing below.
    let base = first as f64;
    let d: Vec<f64> = rewards.iter().map(|&r| r as f64 - base).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + adv_epsilon;
    d.iter().map(|x| (x - mean) / denom).collect()
}

/// Advantages for one group, checking the group size.
pub fn compute_advantages(
    batch: &GroupBatch,
    group_size: usize,
    adv_epsilon: f64,
) -> Result<Vec<f64>, GrpoError> {
    if batch.trajectories.len() != group_size {
        return Err(GrpoError::GroupSize {
            group_id: batch.group_id,
            expected: group_size,
            got: batch.trajectories.len(),
        });
    }
    let rewards: Vec<f32> = batch.trajectories.iter().map(|t| t.reward).collect();
    Ok(advantages(&rewards, adv_epsilon))
}

/// Loss contribution `-min(ρA, clip(ρ)A)` and its derivative in `ρ`.
///
/// The derivative is `-A` where the unclipped branch attains the minimum
/// (including ties) and 0 otherwise.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (-unclipped, -adv)
    } else {
        (-clipped, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments plus the step count, kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam step.
pub fn adam_step<S: Scalar>(
    params: &mut [S],
    grad: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) {
    debug_assert_eq!(params.len(), grad.len());
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let step = cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        if step != 0.0 {
            params[i] = S::lit(params[i].widen() - step);
        }
    }
}

/// Unnormalized gradient sum over a shard plus the counters needed to
/// normalize it once all shards are merged.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccum {
    pub grad: Vec<f64>,
    pub terms: u64,
    pub loss_sum: f64,
    pub ratio_sum: f64,
    pub clipped: u64,
    pub kl_sum: f64,
    pub kl_terms: u64,
    pub reward_sum: f64,
    pub trajectories: u64,
    pub groups: u64,
}

impl GradAccum {
    pub fn zeros(n: usize) -> Self {
        Self {
            grad: vec![0.0; n],
            terms: 0,
            loss_sum: 0.0,
            ratio_sum: 0.0,
            clipped: 0,
            kl_sum: 0.0,
            kl_terms: 0,
            reward_sum: 0.0,
            trajectories: 0,
            groups: 0,
        }
    }

    /// Adds `other` into `self`. Callers merge in a fixed rank order.
    pub fn merge(&mut self, other: &GradAccum) {
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            *a += b;
        }
        self.terms += other.terms;
        self.loss_sum += other.loss_sum;
        self.ratio_sum += other.ratio_sum;
        self.clipped += other.clipped;
        self.kl_sum += other.kl_sum;
        self.kl_terms += other.kl_terms;
        self.reward_sum += other.reward_sum;
        self.trajectories += other.trajectories;
        self.groups += other.groups;
    }
}

/// Per-update diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Version produced by this update.
    pub version: u64,
    pub loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    /// Global norm of the mean gradient before clipping.
    pub grad_norm: f64,
    pub kl: f64,
    pub terms: u64,
    pub groups: u64,
    pub trajectories: u64,
    pub mean_reward: f64,
}

fn segment_len(batch: &GroupBatch, seg_per_chunk: usize) -> usize {
    let out = (batch.chunk * batch.act_dim) as usize;
    out / seg_per_chunk.max(1)
}

/// Gradient of the summed surrogate over `batches`, in canonical order.
///
/// `reference` enables the KL penalty when `cfg.kl_coef > 0`.
pub fn local_gradient<S: Scalar>(
    params: &Params<S>,
    reference: Option<&Params<S>>,
    batches: &[&GroupBatch],
    cfg: &GrpoConfig,
) -> Result<GradAccum, GrpoError> {
    let pcfg = params.config();
    let n_params = params.param_count();
    let mut order: Vec<&GroupBatch> = batches.to_vec();
    order.sort_by_key(|b| b.group_id);

    // (batch, trajectory index, advantage) in accumulation order
    let mut items = Vec::new();
    for b in &order {
        b.validate()?;
        if b.obs_dim as usize != pcfg.obs_dim
            || b.chunk as usize != pcfg.chunk
            || b.act_dim as usize != pcfg.act_dim
        {
            return Err(GrpoError::Shape {
                group_id: b.group_id,
                what: format!(
                    "batch dims obs={} chunk={} act={} do not match the policy",
                    b.obs_dim, b.chunk, b.act_dim
                ),
            });
        }
        let want_seg = match cfg.ratio_granularity {
            RatioGranularity::Chunk => 1,
            RatioGranularity::Substep => pcfg.chunk,
        };
        if b.segments_per_chunk() != want_seg {
            return Err(GrpoError::Shape {
                group_id: b.group_id,
                what: format!(
                    "{} behavior log-probs per chunk, ratio granularity needs {want_seg}",
                    b.segments_per_chunk()
                ),
            });
        }
        let adv = compute_advantages(b, cfg.group_size, cfg.adv_epsilon)?;
        for (i, a) in adv.into_iter().enumerate() {
            items.push((*b, i, a));
        }
    }

    let kl_ref = reference.filter(|_| cfg.kl_coef > 0.0);
    let mut acc = GradAccum::zeros(n_params);
    acc.groups = order.len() as u64;
    let mut obs_s: Vec<S> = Vec::new();
    let mut act_s: Vec<S> = Vec::new();
    for slice in items.chunks(cfg.micro_batch) {
        let mut micro = vec![0.0f64; n_params];
        for &(b, i, adv) in slice {
            let t = &b.trajectories[i];
            let gid = b.group_id;
            let od = b.obs_dim as usize;
            let ad = (b.chunk * b.act_dim) as usize;
            let seg_per_chunk = b.segments_per_chunk();
            let seg_len = segment_len(b, seg_per_chunk);
            for c in 0..b.n_chunks() {
                obs_s.clear();
                obs_s.extend(
                    t.obs[c * od..(c + 1) * od]
                        .iter()
                        .map(|&x| S::lit(x as f64)),
                );
                act_s.clear();
                act_s.extend(
                    t.actions[c * ad..(c + 1) * ad]
                        .iter()
                        .map(|&x| S::lit(x as f64)),
                );
                let lps = params.segment_log_probs(&obs_s, &act_s, seg_len)?;
                let blp = &t.behavior_log_prob[c * seg_per_chunk..(c + 1) * seg_per_chunk];
                let mut upstream = Vec::with_capacity(seg_per_chunk);
                for (lp, &b_lp) in lps.iter().zip(blp) {
                    let ratio = (lp - b_lp as f64).exp();
                    let (loss, d_ratio) = clipped_surrogate(ratio, adv, cfg.clip_eps);
                    if !(loss.is_finite() && ratio.is_finite()) {
                        return Err(GrpoError::NonFinite {
                            group_id: gid,
                            what: "loss",
                        });
                    }
                    acc.loss_sum += loss;
                    acc.ratio_sum += ratio;
                    acc.terms += 1;
                    if (ratio - 1.0).abs() > cfg.clip_eps {
                        acc.clipped += 1;
                    }
                    // d loss / d log p = d loss / d ρ · ρ
                    upstream.push(d_ratio * ratio);
                }
                params.accumulate_log_prob_grad(&obs_s, &act_s, &upstream, seg_len, &mut micro)?;
                if let Some(r) = kl_ref {
                    // Weighted so that after dividing by the number of ratio
                    // terms the penalty is kl_coef · mean KL per chunk.
                    let w = cfg.kl_coef * seg_per_chunk as f64;
                    let kl = params.accumulate_kl_grad(r, &obs_s, w, &mut micro)?;
                    acc.loss_sum += w * kl;
                    acc.kl_sum += kl;
                    acc.kl_terms += 1;
                }
            }
            if micro.iter().any(|g| !g.is_finite()) {
                return Err(GrpoError::NonFinite {
                    group_id: gid,
                    what: "gradient",
                });
            }
            acc.reward_sum += t.reward as f64;
            acc.trajectories += 1;
        }
        for (a, m) in acc.grad.iter_mut().zip(&micro) {
            *a += m;
        }
    }
    Ok(acc)
}

/// Normalizes a merged gradient, clips it and applies one Adam step.
///
/// The returned stats carry `version = 0`; the caller assigns versions.
pub fn finish_update<S: Scalar>(
    params: &mut Params<S>,
    adam: &mut AdamState,
    acc: &GradAccum,
    cfg: &GrpoConfig,
) -> Result<UpdateStats, GrpoError> {
    let n = acc.terms.max(1) as f64;
    let mut grad: Vec<f64> = acc.grad.iter().map(|g| g / n).collect();
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if let Some(max) = cfg.max_grad_norm {
        if grad_norm > max {
            let scale = max / grad_norm;
            grad.iter_mut().for_each(|g| *g *= scale);
        }
    }
    let mut flat = params.flatten();
    adam_step(flat.as_mut_slice(), &grad, adam, &cfg.adam());
    if flat.first_non_finite().is_some() {
        return Err(GrpoError::NonFiniteUpdate);
    }
    params.load_flat(&flat)?;
    Ok(UpdateStats {
        version: 0,
        loss: acc.loss_sum / n,
        mean_ratio: acc.ratio_sum / n,
        clip_fraction: acc.clipped as f64 / n,
        grad_norm,
        kl: if acc.kl_terms > 0 {
            acc.kl_sum / acc.kl_terms as f64
        } else {
            0.0
        },
        terms: acc.terms,
        groups: acc.groups,
        trajectories: acc.trajectories,
        mean_reward: if acc.trajectories > 0 {
            acc.reward_sum / acc.trajectories as f64
        } else {
            0.0
        },
    })
}

/// Mean surrogate loss (plus optional KL penalty) without gradients.
pub fn grpo_loss<S: Scalar>(
    params: &Params<S>,
    reference: Option<&Params<S>>,
    batches: &[&GroupBatch],
    cfg: &GrpoConfig,
) -> Result<f64, GrpoError> {
    let acc = local_gradient(params, reference, batches, cfg)?;
    Ok(acc.loss_sum / acc.terms.max(1) as f64)
}

/// Single-worker learner: parameters, optimizer state and version counter.
#[derive(Debug, Clone)]
pub struct Learner<S> {
    pub params: Params<S>,
    pub adam: AdamState,
    pub version: u64,
    reference: Option<Params<S>>,
    cfg: GrpoConfig,
}

impl<S: Scalar> Learner<S> {
    pub fn new(params: Params<S>, cfg: GrpoConfig) -> Result<Self, GrpoError> {
        cfg.validate()?;
        let reference = (cfg.kl_coef > 0.0).then(|| params.clone());
        Ok(Self {
            adam: AdamState::new(params.param_count()),
            params,
            version: 0,
            reference,
            cfg,
        })
    }

    pub fn config(&self) -> &GrpoConfig {
        &self.cfg
    }

    pub fn reference(&self) -> Option<&Params<S>> {
        self.reference.as_ref()
    }

    pub fn gradient(&self, batches: &[&GroupBatch]) -> Result<GradAccum, GrpoError> {
        local_gradient(&self.params, self.reference.as_ref(), batches, &self.cfg)
    }

    /// Applies a merged gradient and bumps the version by one.
    pub fn apply(&mut self, acc: &GradAccum) -> Result<UpdateStats, GrpoError> {
        let mut stats = finish_update(&mut self.params, &mut self.adam, acc, &self.cfg)?;
        self.version += 1;
        stats.version = self.version;
        Ok(stats)
    }

    pub fn update(&mut self, batches: &[&GroupBatch]) -> Result<UpdateStats, GrpoError> {
        let acc = self.gradient(batches)?;
        self.apply(&acc)
    }
}

/// One full update on a single worker.
pub fn grpo_update<S: Scalar>(
    learner: &mut Learner<S>,
    batches: &[&GroupBatch],
) -> Result<UpdateStats, GrpoError> {
    learner.update(batches)
}
