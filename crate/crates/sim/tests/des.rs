use swimlane_core::placement::{LinkProfile, Ratio, Strategy};
use swimlane_core::{ExperimentConfig, Rng, RunMode};
use swimlane_runtime::run;
use swimlane_sim::{
    curve_csv, fit_check, simulate, simulate_bounds, sweep_envs, Bottleneck, LiveAggregate,
    SimError, CSV_HEADER,
};

fn split_len(n: usize, parts: usize, i: usize) -> usize {
    (i + 1) * n / parts - i * n / parts
}

/// Stage times from first principles, µs: every worker's rollout epoch and
/// every rank's gradient work, with linear slot sharing.
fn stage_oracle(cfg: &ExperimentConfig, mode: RunMode) -> (f64, f64) {
    let p = &cfg.placement;
    let slots = p.slots as usize;
    let (workers, ranks, c_roll, c_act) = match p.strategy {
        Strategy::Hybrid => {
            let r = slots * p.ratio.rollout as usize / (p.ratio.rollout + p.ratio.actor) as usize;
            (r, slots - r, 2.0, 1.0)
        }
        Strategy::Disaggregated => {
            let r = slots * p.ratio.rollout as usize / (p.ratio.rollout + p.ratio.actor) as usize;
            (r / 2, slots - r, 1.0, 1.0)
        }
        Strategy::Colocated => match mode {
            RunMode::Async => (slots, slots, 3.0, 3.0),
            RunMode::Sync => (slots, slots, 2.0, 1.0),
        },
    };
    let g = cfg.grpo.group_size;
    let groups = cfg.env.n_envs / g;
    let (h, chunk) = (cfg.env.horizon as usize, cfg.policy.chunk);
    let l = cfg.env.latency.ell0_us;
    let infer = cfg.runtime.costs.infer_us_per_env_chunk;
    let rollout = (0..workers)
        .map(|w| {
            let n = (split_len(groups, workers, w) * g) as f64;
            let mut t = 0.0;
            let mut left = h;
            while left > 0 {
                let sub = left.min(chunk);
                t += c_roll * (sub as f64 * l + n * infer);
                left -= sub;
            }
            t
        })
        .fold(0.0, f64::max);
    let actor = (0..ranks)
        .map(|r| {
            c_act
                * (split_len(groups, ranks, r) * g * h) as f64
                * cfg.runtime.costs.train_us_per_transition
        })
        .fold(0.0, f64::max);
    (rollout, actor)
}

fn oracle_throughput(cfg: &ExperimentConfig, mode: RunMode) -> f64 {
    let (r, a) = stage_oracle(cfg, mode);
    (cfg.env.n_envs * cfg.env.horizon as usize) as f64 / (r.max(a) * 1e-6)
}

fn random_config(rng: &mut Rng) -> ExperimentConfig {
    let layouts = [
        (Strategy::Hybrid, 2, Ratio::new(1, 1)),
        (Strategy::Hybrid, 4, Ratio::new(1, 1)),
        (Strategy::Hybrid, 4, Ratio::new(3, 1)),
        (Strategy::Hybrid, 8, Ratio::new(3, 1)),
        (Strategy::Disaggregated, 4, Ratio::new(1, 1)),
        (Strategy::Disaggregated, 8, Ratio::new(1, 1)),
        (Strategy::Disaggregated, 8, Ratio::new(3, 1)),
    ];
    let (strategy, slots, ratio) = layouts[rng.below(layouts.len() as u64) as usize];
    let mut cfg = ExperimentConfig::default();
    cfg.placement.strategy = strategy;
    cfg.placement.slots = slots;
    cfg.placement.ratio = ratio;
    cfg.env.n_envs = 8 * (8 + rng.below(17) as usize);
    cfg.env.horizon = 8 + rng.below(25) as u32;
    cfg.policy.chunk = [1, 2, 4, 8][rng.below(4) as usize];
    cfg.env.latency.ell0_us = rng.uniform_in(10.0, 200.0);
    cfg.runtime.costs.infer_us_per_env_chunk = rng.uniform_in(0.0, 2.0);
    cfg.runtime.costs.train_us_per_transition = rng.uniform_in(0.5, 20.0);
    cfg.runtime.queue_capacity = 2 + rng.below(3) as usize;
    cfg.runtime.staleness_limit = 1 + rng.below(3);
    cfg
}

#[test]
fn async_throughput_matches_the_pipeline_oracle_on_a_random_grid() {
    let mut rng = Rng::new(2024);
    for i in 0..20 {
        let cfg = random_config(&mut rng);
        let topo = cfg.topology().unwrap();
        let sim = simulate(&cfg, &topo, RunMode::Async, 30).unwrap();
        let want = oracle_throughput(&cfg, RunMode::Async);
        let dev = (sim.throughput - want).abs() / want;
        assert!(
            dev < 0.01,
            "config {i}: sim {} vs oracle {want} ({dev})",
            sim.throughput
        );
    }
}

#[test]
fn unbounded_pipeline_is_exactly_the_slowest_stage() {
    let mut cfg = ExperimentConfig::default();
    // links with latency and bandwidth only shift the timeline
    cfg.placement.local_link = LinkProfile {
        latency_us: 40.0,
        bandwidth_bps: Some(1e9),
    };
    for train in [1.0, 3.125, 7.0] {
        cfg.runtime.costs.train_us_per_transition = train;
        let topo = cfg.topology().unwrap();
        let sim = simulate_bounds(&cfg, &topo, RunMode::Async, 40, usize::MAX, u64::MAX).unwrap();
        let want = oracle_throughput(&cfg, RunMode::Async);
        assert!(
            (sim.throughput - want).abs() / want < 1e-9,
            "train {train}: {} vs {want}",
            sim.throughput
        );
    }
}

#[test]
fn staleness_one_suffices_for_balanced_stages() {
    let mut cfg = ExperimentConfig::default();
    cfg.runtime.costs.train_us_per_transition = 3.125;
    let topo = cfg.topology().unwrap();
    let (r, a) = stage_oracle(&cfg, RunMode::Async);
    assert!((r - a).abs() < 1e-9 * r);
    let free = simulate_bounds(&cfg, &topo, RunMode::Async, 30, usize::MAX, u64::MAX).unwrap();
    let one = simulate(&cfg, &topo, RunMode::Async, 30).unwrap();
    assert!((one.throughput - free.throughput).abs() / free.throughput < 0.01);
    assert!(one.max_staleness <= 1);
}

#[test]
fn sync_step_is_the_serialized_sum() {
    let mut cfg = ExperimentConfig::default();
    cfg.placement.strategy = Strategy::Disaggregated;
    cfg.placement.slots = 4;
    cfg.placement.local_link = LinkProfile {
        latency_us: 25.0,
        bandwidth_bps: Some(2e9),
    };
    cfg.runtime.costs.train_us_per_transition = 2.0;
    let topo = cfg.topology().unwrap();
    let sim = simulate(&cfg, &topo, RunMode::Sync, 6).unwrap();
    assert!(sim.transfer_time > 0.0 && sim.broadcast_time > 0.0);
    for e in &sim.timeline {
        let sum = e.rollout_time + e.transfer_time + e.actor_time + e.broadcast_time;
        assert!((e.step_time - sum).abs() < 1e-12, "{e:?}");
    }
    assert_eq!(sim.max_staleness, 0);
}

#[test]
fn async_never_loses_to_sync() {
    let mut rng = Rng::new(77);
    for i in 0..20 {
        let cfg = random_config(&mut rng);
        let topo = cfg.topology().unwrap();
        let a = simulate(&cfg, &topo, RunMode::Async, 20).unwrap();
        let s = simulate(&cfg, &topo, RunMode::Sync, 20).unwrap();
        assert!(a.throughput >= s.throughput * (1.0 - 1e-12), "config {i}");
    }
}

#[test]
fn simulation_is_deterministic() {
    let mut rng = Rng::new(5);
    let cfg = random_config(&mut rng);
    let topo = cfg.topology().unwrap();
    let a = simulate(&cfg, &topo, RunMode::Async, 12).unwrap();
    let b = simulate(&cfg, &topo, RunMode::Async, 12).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.throughput.to_bits(), b.throughput.to_bits());
}

#[test]
fn virtual_time_live_runs_fit_the_simulation() {
    let mut cfg = ExperimentConfig::default();
    cfg.placement.slots = 8;
    cfg.placement.ratio = Ratio::new(3, 1);
    cfg.env.n_envs = 96;
    cfg.placement.local_link = LinkProfile {
        latency_us: 15.0,
        bandwidth_bps: Some(5e9),
    };
    cfg.runtime.costs.infer_us_per_env_chunk = 0.5;
    cfg.runtime.costs.train_us_per_transition = 2.0;
    let topo = cfg.topology().unwrap();
    for mode in [RunMode::Sync, RunMode::Async] {
        let live = run(&cfg, &topo, mode, 10).unwrap();
        let sim = simulate(&cfg, &topo, mode, 10).unwrap();
        let fit = fit_check(&sim, &LiveAggregate::from_run(&cfg, &live)).unwrap();
        assert!(fit.pass);
        assert!(fit.max_deviation < 0.02, "{mode}: {fit:?}");
    }
}

#[test]
fn fit_check_rejects_different_configs() {
    let cfg = ExperimentConfig::default();
    let topo = cfg.topology().unwrap();
    let live = run(&cfg, &topo, RunMode::Sync, 3).unwrap();
    let mut other = cfg.clone();
    other.runtime.costs.train_us_per_transition = 1.0;
    let sim = simulate(&other, &topo, RunMode::Sync, 3).unwrap();
    let err = fit_check(&sim, &LiveAggregate::from_run(&cfg, &live)).unwrap_err();
    assert!(matches!(err, SimError::Mismatch { .. }));
}

fn saturating() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.env.latency.n0 = 768;
    cfg.env.latency.beta = 1.2;
    cfg.env.latency.gamma = 1.0;
    cfg.runtime.costs.infer_us_per_env_chunk = 0.1;
    cfg.runtime.costs.train_us_per_transition = 0.01;
    cfg
}

fn envs() -> Vec<usize> {
    (1..=8).map(|i| 384 * i).collect()
}

#[test]
fn saturation_gives_an_interior_peak_and_a_bounded_decline() {
    let curve = sweep_envs(&saturating(), RunMode::Async, 12, &envs()).unwrap();
    let thr: Vec<f64> = curve.iter().map(|r| r.throughput).collect();
    let peak = (0..thr.len())
        .max_by(|&a, &b| thr[a].total_cmp(&thr[b]))
        .unwrap();
    assert!(peak > 0 && peak < thr.len() - 1, "{thr:?}");
    assert!(thr[..=peak].windows(2).all(|w| w[0] < w[1]));
    assert!(thr[peak..].windows(2).all(|w| w[0] > w[1]));
    let decline = 1.0 - thr.last().unwrap() / thr[peak];
    assert!(decline > 0.0 && decline <= 0.15, "{decline}");
    // the peak sits at the saturation point
    assert_eq!(curve[peak].n_envs, 768);
}

#[test]
fn without_saturation_throughput_never_drops() {
    let mut cfg = saturating();
    cfg.env.latency.beta = 0.0;
    let curve = sweep_envs(&cfg, RunMode::Async, 12, &envs()).unwrap();
    assert!(curve.windows(2).all(|w| w[1].throughput >= w[0].throughput));
}

#[test]
fn bottleneck_flips_where_the_actor_overtakes_rollout() {
    let mut cfg = ExperimentConfig::default();
    cfg.runtime.costs.infer_us_per_env_chunk = 0.2;
    cfg.runtime.costs.train_us_per_transition = 0.3;
    let counts: Vec<usize> = (1..=16).map(|i| 64 * i).collect();
    let curve = sweep_envs(&cfg, RunMode::Async, 8, &counts).unwrap();
    let first_actor = curve
        .iter()
        .position(|r| r.actor_time > r.rollout_time)
        .expect("actor overtakes");
    assert!(first_actor > 0);
    for (i, r) in curve.iter().enumerate() {
        let want = if i >= first_actor {
            Bottleneck::Actor
        } else {
            Bottleneck::Rollout
        };
        assert_eq!(r.bottleneck, want, "n_envs {}", r.n_envs);
    }
    let csv = curve_csv(&curve);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    assert_eq!(lines.count(), counts.len());
    assert!(csv.contains(",async,hybrid,1:1,"));
}

#[test]
fn unsorted_sweep_is_rejected() {
    let err = sweep_envs(&ExperimentConfig::default(), RunMode::Sync, 2, &[128, 64]).unwrap_err();
    assert!(matches!(err, SimError::Config(_)));
}
