use proptest::prelude::*;
use swimlane_core::policy::{Params, PolicyConfig};
use swimlane_core::Rng;

fn cfg(chunk: usize, act_dim: usize) -> PolicyConfig {
    PolicyConfig {
        obs_dim: 4,
        hidden: 8,
        chunk,
        act_dim,
        init_log_std: -0.5,
    }
}

/// Uniform Monte-Carlo estimate of ∫ exp(log p) over a ±7σ box around the mean.
fn integrate_density(p: &Params<f64>, obs: &[f64], rng: &mut Rng, n: usize) -> f64 {
    let mean = p.forward(obs).unwrap();
    let sd: Vec<f64> = p.log_std.iter().map(|l| l.exp()).collect();
    let volume: f64 = sd.iter().map(|s| 14.0 * s).product();
    let mut sum = 0.0;
    let mut a = vec![0.0; mean.len()];
    for _ in 0..n {
        for k in 0..a.len() {
            a[k] = mean[k] + sd[k] * rng.uniform_in(-7.0, 7.0);
        }
        sum += p.log_prob_of(obs, &a).unwrap().exp();
    }
    volume * sum / n as f64
}

#[test]
fn density_integrates_to_one() {
    for seed in 0..5 {
        let mut rng = Rng::new(seed);
        let mut p: Params<f64> = Params::init(&cfg(1, 2), &mut rng).unwrap();
        p.log_std[0] = rng.uniform_in(-1.0, 0.5);
        p.log_std[1] = rng.uniform_in(-1.0, 0.5);
        let obs: Vec<f64> = (0..4).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let mass = integrate_density(&p, &obs, &mut rng, 400_000);
        assert!((mass - 1.0).abs() < 0.02, "seed {seed}: mass {mass}");
    }
}

#[test]
fn log_prob_gradient_matches_central_differences() {
    let h = 1e-3;
    for seed in 0..100 {
        let mut rng = Rng::new(seed);
        let mut p: Params<f64> = Params::init(&cfg(2, 2), &mut rng).unwrap();
        let mut flat = p.flatten().into_vec();
        for v in flat.iter_mut() {
            *v += rng.uniform_in(-0.2, 0.2);
        }
        p.load_flat(&flat).unwrap();
        let obs: Vec<f64> = (0..4).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let s = p.sample_chunk(&obs, &mut rng).unwrap();
        let upstream = rng.uniform_in(-2.0, 2.0);
        let g = p.backward(&obs, &s.sampled, upstream).unwrap();
        for i in 0..flat.len() {
            let at = |d: f64| {
                let mut f = flat.clone();
                f[i] += d;
                let q = Params::from_flat(p.config(), &f).unwrap();
                upstream * q.log_prob_of(&obs, &s.sampled).unwrap()
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let err = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1.0);
            assert!(err < 1e-4, "seed {seed} param {i}: {} vs {fd}", g[i]);
        }
    }
}

#[test]
fn identical_observations_give_identical_means() {
    let p: Params<f32> = Params::init(&cfg(4, 2), &mut Rng::new(1)).unwrap();
    let obs = [0.3f32, -0.2, 0.9, 0.0];
    let first = p.forward(&obs).unwrap();
    for _ in 0..8 {
        assert_eq!(p.forward(&obs).unwrap(), first);
    }
}

#[test]
fn same_seed_same_params() {
    let a: Params<f32> = Params::init(&cfg(4, 2), &mut Rng::new(9)).unwrap();
    let b: Params<f32> = Params::init(&cfg(4, 2), &mut Rng::new(9)).unwrap();
    assert_eq!(a, b);
    assert!(a.w1.as_slice().iter().all(|w| w.abs() <= 0.5));
    assert_eq!(a.w1.as_slice().len(), 32);
}

proptest! {
    #[test]
    fn flatten_round_trip_is_bitwise(seed in any::<u64>(), bits in prop::collection::vec(any::<u32>(), 16)) {
        let c = cfg(2, 2);
        let mut p: Params<f32> = Params::init(&c, &mut Rng::new(seed)).unwrap();
        let mut flat = p.flatten().into_vec();
        for (v, b) in flat.iter_mut().zip(bits) {
            let x = f32::from_bits(b);
            if x.is_finite() {
                *v = x;
            }
        }
        p.load_flat(&flat).unwrap();
        let snap = p.snapshot(3).unwrap();
        let back: Params<f32> = Params::from_snapshot(&c, &snap).unwrap();
        let f2 = back.flatten().into_vec();
        prop_assert_eq!(
            flat.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            f2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn shifting_one_action_by_sigma_costs_half_a_nat(seed in 0u64..1000, k in 0usize..4) {
        let p: Params<f64> = Params::init(&cfg(2, 2), &mut Rng::new(seed)).unwrap();
        let obs = [0.1, 0.2, -0.3, 0.4];
        let mean = p.forward(&obs).unwrap();
        let mut a = mean.clone().into_vec();
        a[k] += p.log_std[k].exp();
        let d = p.log_prob_of(&obs, &mean).unwrap() - p.log_prob_of(&obs, &a).unwrap();
        prop_assert!((d - 0.5).abs() < 1e-12);
    }
}
