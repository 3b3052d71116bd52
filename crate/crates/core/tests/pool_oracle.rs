//! The free-list pool against a brute-force allocator that keeps only the
//! live set and rescans the gaps between live blocks on every request.

use std::collections::BTreeMap;

use proptest::prelude::*;
use swimlane_core::pool::{align_up, Pool, PoolError, PoolHandle, PoolKind};
use swimlane_core::Rng;

struct Oracle {
    capacity: u64,
    live: BTreeMap<u64, u64>,
}

impl Oracle {
    fn alloc(&mut self, size: u64, align: u64) -> Option<u64> {
        let mut cursor = 0;
        let mut found = None;
        for (&off, &len) in self
            .live
            .iter()
            .chain(std::iter::once((&self.capacity, &0)))
        {
            let start = align_up(cursor, align);
            if start + size <= off {
                found = Some(start);
                break;
            }
            cursor = off + len;
        }
        if let Some(start) = found {
            self.live.insert(start, size);
        }
        found
    }

    fn free(&mut self, off: u64) {
        self.live.remove(&off).expect("oracle double free");
    }
}

fn check_invariants(p: &Pool) {
    let s = p.stats();
    assert_eq!(s.live_bytes + s.total_free, p.capacity());
    assert!((0.0..=1.0).contains(&s.fragmentation));
    let ext: Vec<(u64, u64)> = p.free_extents().collect();
    for w in ext.windows(2) {
        // sorted, disjoint and never touching
        assert!(
            w[0].0 + w[0].1 < w[1].0,
            "extents {:?} and {:?}",
            w[0],
            w[1]
        );
    }
}

fn run_workload(seed: u64, ops: usize) {
    let capacity = 1 << 16;
    let mut pool = Pool::new(PoolKind::ModelCompute, capacity).unwrap();
    let mut oracle = Oracle {
        capacity,
        live: BTreeMap::new(),
    };
    let mut handles: Vec<PoolHandle> = Vec::new();
    let mut rng = Rng::new(seed);
    let mut failures = 0;
    for op in 0..ops {
        // bias towards allocation until the pool is busy, then balance
        let alloc = handles.is_empty() || rng.below(100) < 55;
        if alloc {
            let size = 1 + match rng.below(4) {
                0 => rng.below(16),
                1 => rng.below(256),
                2 => rng.below(2048),
                _ => rng.below(8192),
            };
            let align = [1, 8, 64, 256][rng.below(4) as usize];
            let got = pool.alloc(size, align);
            let want = oracle.alloc(size, align);
            match (got, want) {
                (Ok(h), Some(off)) => {
                    assert_eq!(h.offset, off, "seed {seed} op {op}");
                    handles.push(h);
                }
                (Err(PoolError::AllocFailure { .. }), None) => failures += 1,
                (g, w) => panic!("seed {seed} op {op}: pool {g:?} vs oracle {w:?}"),
            }
        } else {
            let h = handles.swap_remove(rng.below(handles.len() as u64) as usize);
            pool.free(h).unwrap();
            oracle.free(h.offset);
        }
        if op % 101 == 0 {
            check_invariants(&pool);
        }
    }
    check_invariants(&pool);
    assert_eq!(pool.stats().failed_allocs, failures);
    assert!(failures > 0, "seed {seed}: workload never hit a full pool");
}

#[test]
fn free_list_matches_brute_force_oracle_on_100_workloads() {
    for seed in 0..100 {
        run_workload(seed, 100_000);
    }
}

proptest! {
    #[test]
    fn accounting_is_conserved(ops in prop::collection::vec((any::<bool>(), 1u64..600, 0usize..4), 1..300)) {
        let mut p = Pool::new(PoolKind::EnvAux, 4096).unwrap();
        let mut hs = Vec::new();
        for (alloc, size, idx) in ops {
            if alloc || hs.is_empty() {
                if let Ok(h) = p.alloc(size, 1 << idx) {
                    hs.push(h);
                }
            } else {
                let h = hs.swap_remove(size as usize % hs.len());
                p.free(h).unwrap();
            }
            let s = p.stats();
            prop_assert_eq!(s.live_bytes + s.total_free, 4096);
        }
        for h in hs {
            p.free(h).unwrap();
        }
        prop_assert_eq!(p.free_extents().collect::<Vec<_>>(), vec![(0, 4096)]);
    }

    #[test]
    fn env_churn_leaves_model_pool_untouched(sizes in prop::collection::vec(1u64..512, 1..200)) {
        let mut model = Pool::new(PoolKind::ModelCompute, 4096).unwrap();
        let _params = model.alloc(1000, 64).unwrap();
        let before = model.stats();
        let mut env = Pool::new(PoolKind::EnvAux, 8192).unwrap();
        for (i, s) in sizes.iter().enumerate() {
            let h = env.alloc(*s, 8);
            if i % 3 == 0 {
                if let Ok(h) = h {
                    env.free(h).unwrap();
                }
            }
            if i % 50 == 49 {
                env.epoch_reset().unwrap();
            }
        }
        prop_assert_eq!(model.stats(), before);
    }
}
