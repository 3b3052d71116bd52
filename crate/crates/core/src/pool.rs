//! Arena pools with a first-fit free list.
//!
//! A pool owns a host byte buffer and hands out `(offset, size)` extents.
//! Free extents live in an ordered map keyed by offset and are coalesced with
//! their neighbors on every free, so the map never holds two touching
//! extents.
//!
//! Model state (parameters, gradients, optimizer moments) and environment
//! scratch (observation staging, transfer buffers) are kept in separate
//! pools. Scratch is epoch-scoped: the environment pool is wiped with one
//! [`Pool::epoch_reset`] instead of freeing handles one by one. The
//! `UnifiedBaseline` kind puts both in one pool to show what interleaved
//! lifetimes do to a first-fit arena.
//!
//! There is no device memory here; the pools back ordinary host buffers, and
//! the claims they support are about allocator behavior only.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

static NEXT_POOL_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    ModelCompute,
    EnvAux,
    UnifiedBaseline,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PoolError {
    #[error("pool capacity must be > 0")]
    ZeroCapacity,
    #[error("allocation size must be > 0")]
    ZeroSize,
    #[error("alignment {0} is not a power of two")]
    BadAlign(u64),
    #[error("no free extent fits {size} bytes at alignment {align}")]
    AllocFailure { size: u64, align: u64 },
    #[error("handle {handle} belongs to pool {actual}, not this pool ({expected})")]
    WrongPool {
        handle: String,
        expected: u64,
        actual: u64,
    },
    #[error("stale handle {handle}: pool is at generation {current}")]
    StaleGeneration { handle: String, current: u64 },
    #[error("handle {handle} is not live (double free?)")]
    NotLive { handle: String },
    #[error("epoch reset is only allowed on EnvAux pools, not {0:?}")]
    ResetNotAllowed(PoolKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PoolHandle {
    pub pool: u64,
    pub offset: u64,
    pub size: u64,
    pub generation: u64,
    id: u64,
}

impl std::fmt::Display for PoolHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "#{}(pool {}, offset {}, size {}, gen {})",
            self.id, self.pool, self.offset, self.size, self.generation
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub kind: PoolKind,
    pub capacity: u64,
    pub live_bytes: u64,
    pub total_free: u64,
    pub largest_free_block: u64,
    /// `1 − largest_free_block / total_free`, 0 when nothing is free.
    pub fragmentation: f64,
    pub failed_allocs: u64,
    pub alloc_count: u64,
    pub free_count: u64,
    pub churn_bytes: u64,
    pub generation: u64,
}

pub fn align_up(x: u64, align: u64) -> u64 {
    (x + align - 1) & !(align - 1)
}

#[derive(Debug)]
pub struct Pool {
    id: u64,
    kind: PoolKind,
    capacity: u64,
    memory: Vec<u8>,
    /// offset -> size
    free: BTreeMap<u64, u64>,
    /// offset -> (size, handle id)
    live: HashMap<u64, (u64, u64)>,
    live_bytes: u64,
    generation: u64,
    next_handle: u64,
    alloc_count: u64,
    free_count: u64,
    churn_bytes: u64,
    failed_allocs: u64,
}

impl Pool {
    pub fn new(kind: PoolKind, capacity: u64) -> Result<Self, PoolError> {
        if capacity == 0 {
            return Err(PoolError::ZeroCapacity);
        }
        Ok(Self {
            id: NEXT_POOL_ID.fetch_add(1, Ordering::Relaxed),
            kind,
            capacity,
            memory: vec![0; capacity as usize],
            free: BTreeMap::from([(0, capacity)]),
            live: HashMap::new(),
            live_bytes: 0,
            generation: 0,
            next_handle: 0,
            alloc_count: 0,
            free_count: 0,
            churn_bytes: 0,
            failed_allocs: 0,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn kind(&self) -> PoolKind {
        self.kind
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// First fit over the free list at the requested alignment.
    pub fn alloc(&mut self, size: u64, align: u64) -> Result<PoolHandle, PoolError> {
        if size == 0 {
            return Err(PoolError::ZeroSize);
        }
        if align == 0 || !align.is_power_of_two() {
            return Err(PoolError::BadAlign(align));
        }
        let hit = self.free.iter().find_map(|(&off, &len)| {
            let start = align_up(off, align);
            (start + size <= off + len).then_some((off, len, start))
        });
        let Some((off, len, start)) = hit else {
            self.failed_allocs += 1;
            return Err(PoolError::AllocFailure { size, align });
        };
        self.free.remove(&off);
        if start > off {
            self.free.insert(off, start - off);
        }
        let end = start + size;
        if end < off + len {
            self.free.insert(end, off + len - end);
        }
        let id = self.next_handle;
        self.next_handle += 1;
        self.live.insert(start, (size, id));
        self.live_bytes += size;
        self.alloc_count += 1;
        self.churn_bytes += size;
        Ok(PoolHandle {
            pool: self.id,
            offset: start,
            size,
            generation: self.generation,
            id,
        })
    }

    fn check(&self, h: &PoolHandle) -> Result<(), PoolError> {
        if h.pool != self.id {
            return Err(PoolError::WrongPool {
                handle: h.to_string(),
                expected: self.id,
                actual: h.pool,
            });
        }
        if h.generation != self.generation {
            return Err(PoolError::StaleGeneration {
                handle: h.to_string(),
                current: self.generation,
            });
        }
        match self.live.get(&h.offset) {
            Some(&(size, id)) if size == h.size && id == h.id => Ok(()),
            _ => Err(PoolError::NotLive {
                handle: h.to_string(),
            }),
        }
    }

    pub fn free(&mut self, h: PoolHandle) -> Result<(), PoolError> {
        self.check(&h)?;
        self.live.remove(&h.offset);
        self.live_bytes -= h.size;
        self.free_count += 1;
        self.churn_bytes += h.size;

        let mut start = h.offset;
        let mut len = h.size;
        if let Some((&prev, &plen)) = self.free.range(..start).next_back() {
            if prev + plen == start {
                self.free.remove(&prev);
                start = prev;
                len += plen;
            }
        }
        if let Some(&nlen) = self.free.get(&(h.offset + h.size)) {
            self.free.remove(&(h.offset + h.size));
            len += nlen;
        }
        self.free.insert(start, len);
        Ok(())
    }

    /// Invalidates every handle and returns the whole pool to one extent.
    pub fn epoch_reset(&mut self) -> Result<(), PoolError> {
        if self.kind != PoolKind::EnvAux {
            return Err(PoolError::ResetNotAllowed(self.kind));
        }
        self.generation += 1;
        self.live.clear();
        self.live_bytes = 0;
        self.free.clear();
        self.free.insert(0, self.capacity);
        Ok(())
    }

    pub fn bytes(&self, h: &PoolHandle) -> Result<&[u8], PoolError> {
        self.check(h)?;
        Ok(&self.memory[h.offset as usize..(h.offset + h.size) as usize])
    }

    pub fn bytes_mut(&mut self, h: &PoolHandle) -> Result<&mut [u8], PoolError> {
        self.check(h)?;
        Ok(&mut self.memory[h.offset as usize..(h.offset + h.size) as usize])
    }

    /// Free extents in address order.
    pub fn free_extents(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.free.iter().map(|(&o, &l)| (o, l))
    }

    pub fn stats(&self) -> PoolStats {
        let total_free: u64 = self.free.values().sum();
        let largest = self.free.values().copied().max().unwrap_or(0);
        let fragmentation = if total_free == 0 {
            0.0
        } else {
            1.0 - largest as f64 / total_free as f64
        };
        PoolStats {
            kind: self.kind,
            capacity: self.capacity,
            live_bytes: self.live_bytes,
            total_free,
            largest_free_block: largest,
            fragmentation,
            failed_allocs: self.failed_allocs,
            alloc_count: self.alloc_count,
            free_count: self.free_count,
            churn_bytes: self.churn_bytes,
            generation: self.generation,
        }
    }
}

pub fn pool_create(kind: PoolKind, capacity: u64) -> Result<Pool, PoolError> {
    Pool::new(kind, capacity)
}

/// Pool sizing. Unset capacities fall back to [`PoolsConfig::model_capacity`]
/// and [`PoolsConfig::env_capacity`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolsConfig {
    pub model_compute_bytes: Option<u64>,
    pub env_aux_bytes: Option<u64>,
    pub unified_baseline: bool,
}

impl PoolsConfig {
    /// Default: four times the `f32` parameter bytes plus two `f64` moments.
    pub fn model_capacity(&self, param_count: usize) -> u64 {
        self.model_compute_bytes
            .unwrap_or(4 * 4 * param_count as u64 + 2 * 8 * param_count as u64)
    }

    /// Default: two epochs worth of scratch so one epoch can be staged while
    /// the previous one drains.
    pub fn env_capacity(&self, peak_epoch_scratch: u64) -> u64 {
        self.env_aux_bytes.unwrap_or(2 * peak_epoch_scratch)
    }
}

/// Per-worker memory: either a model/env pair or one unified pool.
#[derive(Debug)]
pub enum WorkerPools {
    Dual { model: Pool, env: Pool },
    Unified(Pool),
}

impl WorkerPools {
    pub fn new(
        cfg: &PoolsConfig,
        param_count: usize,
        peak_epoch_scratch: u64,
    ) -> Result<Self, PoolError> {
        let model = cfg.model_capacity(param_count);
        let env = cfg.env_capacity(peak_epoch_scratch);
        if cfg.unified_baseline {
            Ok(Self::Unified(Pool::new(
                PoolKind::UnifiedBaseline,
                model + env,
            )?))
        } else {
            Ok(Self::Dual {
                model: Pool::new(PoolKind::ModelCompute, model)?,
                env: Pool::new(PoolKind::EnvAux, env)?,
            })
        }
    }

    pub fn model(&mut self) -> &mut Pool {
        match self {
            Self::Dual { model, .. } => model,
            Self::Unified(p) => p,
        }
    }

    pub fn env(&mut self) -> &mut Pool {
        match self {
            Self::Dual { env, .. } => env,
            Self::Unified(p) => p,
        }
    }

    pub fn stats(&self) -> Vec<PoolStats> {
        match self {
            Self::Dual { model, env } => vec![model.stats(), env.stats()],
            Self::Unified(p) => vec![p.stats()],
        }
    }
}

/// Scripted workload mixing long-lived model state, a transient
/// parameter-sized workspace and epoch-scoped env scratch.
///
/// Each epoch allocates one scratch buffer per chunk and releases the
/// previous epoch's buffers once the epoch ends, so two epochs overlap. Every
/// `chunks_per_update` chunks the trainer takes a workspace the size of the
/// `f32` parameters and returns it `update_span` chunks later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChurnConfig {
    pub param_count: usize,
    pub epochs: usize,
    pub chunks_per_epoch: usize,
    pub buffers_per_chunk: usize,
    pub chunks_per_update: usize,
    pub update_span: usize,
    pub scratch_min: u64,
    pub scratch_max: u64,
    pub align: u64,
    pub seed: u64,
}

impl Default for ChurnConfig {
    fn default() -> Self {
        Self {
            param_count: 432,
            epochs: 200,
            chunks_per_epoch: 16,
            buffers_per_chunk: 4,
            chunks_per_update: 5,
            update_span: 2,
            scratch_min: 256,
            scratch_max: 256,
            align: 64,
            seed: 0,
        }
    }
}

impl ChurnConfig {
    /// Upper bound on one epoch's scratch, used to size the env pool.
    pub fn peak_epoch_scratch(&self) -> u64 {
        (self.chunks_per_epoch * self.buffers_per_chunk) as u64
            * align_up(self.scratch_max, self.align)
    }

    pub fn workspace_bytes(&self) -> u64 {
        4 * self.param_count as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnReport {
    pub unified: bool,
    /// Failed parameter-sized workspace requests.
    pub model_failures: u64,
    pub model_requests: u64,
    pub env_failures: u64,
    pub env_requests: u64,
    /// Largest model-pool free block seen right before each workspace request
    /// (minimum over the run).
    pub min_model_largest_free: u64,
    pub pools: Vec<PoolStats>,
}

/// Runs the churn script against dual pools or one unified pool sized to
/// their combined capacity.
pub fn run_churn(
    cfg: &ChurnConfig,
    pools_cfg: &PoolsConfig,
    unified: bool,
) -> Result<ChurnReport, PoolError> {
    let p = cfg.param_count as u64;
    let pools_cfg = PoolsConfig {
        unified_baseline: unified,
        ..pools_cfg.clone()
    };
    let mut pools = WorkerPools::new(&pools_cfg, cfg.param_count, cfg.peak_epoch_scratch())?;
    let a = cfg.align;
    // parameters (f32), gradients (f64), two optimizer moments (f64)
    for size in [4 * p, 8 * p, 16 * p] {
        pools.model().alloc(size, a)?;
    }
    let mut rng = crate::rng::Rng::new(cfg.seed);
    let mut report = ChurnReport {
        unified,
        model_failures: 0,
        model_requests: 0,
        env_failures: 0,
        env_requests: 0,
        min_model_largest_free: u64::MAX,
        pools: Vec::new(),
    };
    let mut prev_epoch: Vec<PoolHandle> = Vec::new();
    let mut workspace: Option<(PoolHandle, usize)> = None;
    let mut chunk_no = 0usize;
    for _ in 0..cfg.epochs {
        let mut this_epoch = Vec::with_capacity(cfg.chunks_per_epoch);
        for _ in 0..cfg.chunks_per_epoch {
            if let Some((h, until)) = workspace {
                if chunk_no >= until {
                    pools.model().free(h)?;
                    workspace = None;
                }
            }
            if chunk_no.is_multiple_of(cfg.chunks_per_update.max(1)) && workspace.is_none() {
                report.model_requests += 1;
                let m = pools.model();
                report.min_model_largest_free = report
                    .min_model_largest_free
                    .min(m.stats().largest_free_block);
                match m.alloc(cfg.workspace_bytes(), a) {
                    Ok(h) => workspace = Some((h, chunk_no + cfg.update_span)),
                    Err(PoolError::AllocFailure { .. }) => report.model_failures += 1,
                    Err(e) => return Err(e),
                }
            }
            for _ in 0..cfg.buffers_per_chunk {
                let size = cfg.scratch_min + rng.below(cfg.scratch_max - cfg.scratch_min + 1);
                report.env_requests += 1;
                match pools.env().alloc(size, a) {
                    Ok(h) => this_epoch.push(h),
                    Err(PoolError::AllocFailure { .. }) => report.env_failures += 1,
                    Err(e) => return Err(e),
                }
            }
            chunk_no += 1;
        }
        for h in prev_epoch.drain(..) {
            pools.env().free(h)?;
        }
        prev_epoch = this_epoch;
    }
    report.pools = pools.stats();
    Ok(report)
}
