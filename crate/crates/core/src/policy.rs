//! Gaussian MLP policy with action chunking.
//!
//! `mean = W2 · tanh(W1 · obs + b1) + b2`, one inference producing `chunk`
//! actions of `act_dim` each. The standard deviation is a learned,
//! state-independent vector `exp(log_std)`.
//!
//! Flat parameter order: `W1` (row-major, `hidden × obs_dim`), `b1`, `W2`
//! (row-major, `chunk·act_dim × hidden`), `b2`, `log_std`.
//!
//! Gradients are derived by hand. Backward passes accumulate into a caller
//! supplied `f64` buffer in the flat order above.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Snapshot, TensorError, Vector};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("{what}: expected length {expected}, got {got}")]
    Dim {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub obs_dim: usize,
    pub hidden: usize,
    /// Actions per inference.
    pub chunk: usize,
    pub act_dim: usize,
    pub init_log_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            obs_dim: 4,
            hidden: 32,
            chunk: 4,
            act_dim: 2,
            init_log_std: -0.5,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.obs_dim == 0 || self.hidden == 0 || self.chunk == 0 || self.act_dim == 0 {
            return Err(PolicyError::Config(
                "all policy dimensions must be >= 1".into(),
            ));
        }
        if !self.init_log_std.is_finite() {
            return Err(PolicyError::Config("init_log_std must be finite".into()));
        }
        Ok(())
    }

    /// Output width `chunk · act_dim`.
    pub fn out_dim(&self) -> usize {
        self.chunk * self.act_dim
    }

    pub fn param_count(&self) -> usize {
        let (o, h, d) = (self.obs_dim, self.hidden, self.out_dim());
        h * o + h + d * h + d + d
    }
}

/// Offsets of each parameter block in the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub log_std: usize,
    pub end: usize,
}

impl Layout {
    pub fn of(cfg: &PolicyConfig) -> Self {
        let (o, h, d) = (cfg.obs_dim, cfg.hidden, cfg.out_dim());
        let w1 = 0;
        let b1 = w1 + h * o;
        let w2 = b1 + h;
        let b2 = w2 + d * h;
        let log_std = b2 + d;
        Self {
            w1,
            b1,
            w2,
            b2,
            log_std,
            end: log_std + d,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<S> {
    cfg: PolicyConfig,
    pub w1: Matrix<S>,
    pub b1: Vector<S>,
    pub w2: Matrix<S>,
    pub b2: Vector<S>,
    pub log_std: Vector<S>,
}

/// One inference: mean, sample, the noise that produced it and its log-density.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk<S> {
    pub mean: Vector<S>,
    pub sampled: Vector<S>,
    pub eps: Vector<S>,
    pub log_prob: f64,
}

/// Forward activations kept for the backward pass.
struct Activations {
    hidden: Vec<f64>,
    mean: Vec<f64>,
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), PolicyError> {
    if expected != got {
        return Err(PolicyError::Dim {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

impl<S: Scalar> Params<S> {
    /// `W ~ U(±1/√fan_in)`, zero biases, constant `log_std`.
    pub fn init(cfg: &PolicyConfig, rng: &mut Rng) -> Result<Self, PolicyError> {
        cfg.validate()?;
        let (o, h, d) = (cfg.obs_dim, cfg.hidden, cfg.out_dim());
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| S::lit(rng.uniform_in(-bound, bound)))
                .collect();
            Matrix::from_vec(rows, cols, data)
        };
        let w1 = uniform(h, o)?;
        let w2 = uniform(d, h)?;
        Ok(Self {
            cfg: cfg.clone(),
            w1,
            b1: Vector::zeros(h),
            w2,
            b2: Vector::zeros(d),
            log_std: Vector::filled(d, S::lit(cfg.init_log_std)),
        })
    }

    pub fn zeros(cfg: &PolicyConfig) -> Self {
        let (o, h, d) = (cfg.obs_dim, cfg.hidden, cfg.out_dim());
        Self {
            cfg: cfg.clone(),
            w1: Matrix::zeros(h, o),
            b1: Vector::zeros(h),
            w2: Matrix::zeros(d, h),
            b2: Vector::zeros(d),
            log_std: Vector::zeros(d),
        }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.cfg.param_count()
    }

    pub fn flatten(&self) -> Vector<S> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(self.w1.as_slice());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.as_slice());
        out.extend_from_slice(&self.b2);
        out.extend_from_slice(&self.log_std);
        Vector::from_vec(out)
    }

    pub fn from_flat(cfg: &PolicyConfig, flat: &[S]) -> Result<Self, PolicyError> {
        cfg.validate()?;
        check_len("flat params", cfg.param_count(), flat.len())?;
        let l = Layout::of(cfg);
        let (o, h, d) = (cfg.obs_dim, cfg.hidden, cfg.out_dim());
        Ok(Self {
            cfg: cfg.clone(),
            w1: Matrix::from_vec(h, o, flat[l.w1..l.b1].to_vec())?,
            b1: Vector::from_vec(flat[l.b1..l.w2].to_vec()),
            w2: Matrix::from_vec(d, h, flat[l.w2..l.b2].to_vec())?,
            b2: Vector::from_vec(flat[l.b2..l.log_std].to_vec()),
            log_std: Vector::from_vec(flat[l.log_std..l.end].to_vec()),
        })
    }

    /// Overwrites all parameters from a flat slice in canonical order.
    pub fn load_flat(&mut self, flat: &[S]) -> Result<(), PolicyError> {
        check_len("flat params", self.param_count(), flat.len())?;
        let l = Layout::of(&self.cfg);
        self.w1.as_mut_slice().copy_from_slice(&flat[l.w1..l.b1]);
        self.b1.copy_from_slice(&flat[l.b1..l.w2]);
        self.w2.as_mut_slice().copy_from_slice(&flat[l.w2..l.b2]);
        self.b2.copy_from_slice(&flat[l.b2..l.log_std]);
        self.log_std.copy_from_slice(&flat[l.log_std..l.end]);
        Ok(())
    }

    pub fn from_snapshot(cfg: &PolicyConfig, snap: &Snapshot<S>) -> Result<Self, PolicyError> {
        Self::from_flat(cfg, snap.params())
    }

    pub fn snapshot(&self, version: u64) -> Result<Snapshot<S>, PolicyError> {
        Ok(Snapshot::new(self.flatten().as_slice(), version)?)
    }

    fn activations(&self, obs: &[S]) -> Result<Activations, PolicyError> {
        check_len("observation", self.cfg.obs_dim, obs.len())?;
        let hidden: Vec<f64> = (0..self.cfg.hidden)
            .map(|j| (crate::scalar::dot(self.w1.row(j), obs) + self.b1[j].widen()).tanh())
            .collect();
        let mean = (0..self.cfg.out_dim())
            .map(|d| {
                let row = self.w2.row(d);
                let acc: f64 = row.iter().zip(&hidden).map(|(w, h)| w.widen() * h).sum();
                acc + self.b2[d].widen()
            })
            .collect();
        Ok(Activations { hidden, mean })
    }

    /// Action mean for one observation.
    pub fn forward(&self, obs: &[S]) -> Result<Vector<S>, PolicyError> {
        let act = self.activations(obs)?;
        Ok(Vector::from_vec(act.mean.into_iter().map(S::lit).collect()))
    }

    /// Samples `mean + exp(log_std) ⊙ ε` with `ε ~ N(0, I)`.
    pub fn sample_chunk(&self, obs: &[S], rng: &mut Rng) -> Result<ActionChunk<S>, PolicyError> {
        let mean = self.forward(obs)?;
        let eps: Vector<S> = rng.gaussian(mean.len());
        let sampled: Vector<S> = mean
            .iter()
            .zip(eps.iter())
            .zip(self.log_std.iter())
            .map(|((m, e), ls)| *m + ls.exp() * *e)
            .collect::<Vec<_>>()
            .into();
        let log_prob = self.log_prob_of(obs, &sampled)?;
        Ok(ActionChunk {
            mean,
            sampled,
            eps,
            log_prob,
        })
    }

    /// Joint diagonal-Gaussian log-density of a whole action chunk.
    pub fn log_prob_of(&self, obs: &[S], actions: &[S]) -> Result<f64, PolicyError> {
        Ok(self.segment_log_probs(obs, actions, self.cfg.out_dim())?[0])
    }

    /// Log-density split into consecutive segments of `seg_len` dimensions.
    ///
    /// `seg_len = out_dim` gives one joint value per chunk; `seg_len = act_dim`
    /// gives one value per sub-step.
    pub fn segment_log_probs(
        &self,
        obs: &[S],
        actions: &[S],
        seg_len: usize,
    ) -> Result<Vec<f64>, PolicyError> {
        let d = self.cfg.out_dim();
        check_len("actions", d, actions.len())?;
        let act = self.activations(obs)?;
        Ok(self.segments_from_mean(&act.mean, actions, seg_len))
    }

    fn segments_from_mean(&self, mean: &[f64], actions: &[S], seg_len: usize) -> Vec<f64> {
        let d = self.cfg.out_dim();
        let seg_len = seg_len.clamp(1, d);
        let mut out = vec![0.0; d.div_ceil(seg_len)];
        for k in 0..d {
            let ls = self.log_std[k].widen();
            let z = (actions[k].widen() - mean[k]) / ls.exp();
            out[k / seg_len] += -0.5 * z * z - ls - HALF_LN_2PI;
        }
        out
    }

    /// Gradient of `upstream · log_prob_of(obs, actions)` as a new flat vector.
    pub fn backward(
        &self,
        obs: &[S],
        actions: &[S],
        upstream: f64,
    ) -> Result<Vector<S>, PolicyError> {
        let mut grad = vec![0.0; self.param_count()];
        let d = self.cfg.out_dim();
        self.accumulate_log_prob_grad(obs, actions, &[upstream], d, &mut grad)?;
        Ok(Vector::from_vec(grad.into_iter().map(S::lit).collect()))
    }

    /// Adds `Σ_s upstream[s] · ∇ log p_s` into `grad`, where `log p_s` are the
    /// segment log-densities of [`Self::segment_log_probs`].
    pub fn accumulate_log_prob_grad(
        &self,
        obs: &[S],
        actions: &[S],
        upstream: &[f64],
        seg_len: usize,
        grad: &mut [f64],
    ) -> Result<(), PolicyError> {
        let d = self.cfg.out_dim();
        check_len("actions", d, actions.len())?;
        let seg_len = seg_len.clamp(1, d);
        check_len("segment upstream", d.div_ceil(seg_len), upstream.len())?;
        let act = self.activations(obs)?;
        let mut g_mean = vec![0.0; d];
        let mut g_ls = vec![0.0; d];
        for k in 0..d {
            let u = upstream[k / seg_len];
            if u == 0.0 {
                continue;
            }
            let ls = self.log_std[k].widen();
            let inv_var = (-2.0 * ls).exp();
            let diff = actions[k].widen() - act.mean[k];
            g_mean[k] = u * diff * inv_var;
            g_ls[k] = u * (diff * diff * inv_var - 1.0);
        }
        self.backprop(obs, &act, &g_mean, &g_ls, grad)
    }

    /// Adds `upstream · ∇ KL(π_self(·|obs) ‖ π_reference(·|obs))` into `grad`
    /// and returns the KL value. Used by the optional reference penalty.
    pub fn accumulate_kl_grad(
        &self,
        reference: &Params<S>,
        obs: &[S],
        upstream: f64,
        grad: &mut [f64],
    ) -> Result<f64, PolicyError> {
        let act = self.activations(obs)?;
        let ref_mean = reference.activations(obs)?.mean;
        let d = self.cfg.out_dim();
        let mut kl = 0.0;
        let mut g_mean = vec![0.0; d];
        let mut g_ls = vec![0.0; d];
        for k in 0..d {
            let ls = self.log_std[k].widen();
            let ls_ref = reference.log_std[k].widen();
            let var = (2.0 * ls).exp();
            let inv_var_ref = (-2.0 * ls_ref).exp();
            let diff = act.mean[k] - ref_mean[k];
            kl += ls_ref - ls + 0.5 * (var + diff * diff) * inv_var_ref - 0.5;
            g_mean[k] = upstream * diff * inv_var_ref;
            g_ls[k] = upstream * (var * inv_var_ref - 1.0);
        }
        self.backprop(obs, &act, &g_mean, &g_ls, grad)?;
        Ok(kl)
    }

    fn backprop(
        &self,
        obs: &[S],
        act: &Activations,
        g_mean: &[f64],
        g_ls: &[f64],
        grad: &mut [f64],
    ) -> Result<(), PolicyError> {
        check_len("gradient buffer", self.param_count(), grad.len())?;
        let l = Layout::of(&self.cfg);
        let (o, h, d) = (self.cfg.obs_dim, self.cfg.hidden, self.cfg.out_dim());
        let mut g_hidden = vec![0.0; h];
        for k in 0..d {
            let gm = g_mean[k];
            grad[l.b2 + k] += gm;
            grad[l.log_std + k] += g_ls[k];
            if gm == 0.0 {
                continue;
            }
            let row = self.w2.row(k);
            let gw2 = &mut grad[l.w2 + k * h..l.w2 + (k + 1) * h];
            for j in 0..h {
                gw2[j] += gm * act.hidden[j];
                g_hidden[j] += gm * row[j].widen();
            }
        }
        for j in 0..h {
            let gz = g_hidden[j] * (1.0 - act.hidden[j] * act.hidden[j]);
            grad[l.b1 + j] += gz;
            let gw1 = &mut grad[l.w1 + j * o..l.w1 + (j + 1) * o];
            for (g, x) in gw1.iter_mut().zip(obs) {
                *g += gz * x.widen();
            }
        }
        Ok(())
    }
}

/// Free-function form of [`Params::init`].
pub fn policy_init<S: Scalar>(cfg: &PolicyConfig, rng: &mut Rng) -> Result<Params<S>, PolicyError> {
    Params::init(cfg, rng)
}
