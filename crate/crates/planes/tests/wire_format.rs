use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swimlane_core::{GroupBatch, ParamSnapshot, Trajectory};
use swimlane_planes::wire::{self, DecodeError, HEADER_LEN};
use swimlane_planes::{ControlPlaneMsg, DataPlaneMsg, Metadata, PlaneMessage, TrajectoryBatch};

fn f32_bits() -> impl Strategy<Value = f32> {
    any::<u32>().prop_map(f32::from_bits)
}

fn group() -> impl Strategy<Value = GroupBatch> {
    (any::<u64>(), 1u32..12, 1u32..5, 1u32..4, 1u32..3, 0usize..4).prop_flat_map(
        |(group_id, horizon, chunk, obs_dim, act_dim, n)| {
            let nc = horizon.div_ceil(chunk) as usize;
            let obs = nc * obs_dim as usize;
            let act = nc * (chunk * act_dim) as usize;
            let traj = (
                f32_bits(),
                any::<u64>(),
                prop::collection::vec(f32_bits(), obs),
                prop::collection::vec(f32_bits(), act),
                prop::collection::vec(f32_bits(), nc),
            )
                .prop_map(
                    |(reward, behavior_version, obs, actions, behavior_log_prob)| Trajectory {
                        reward,
                        behavior_version,
                        obs,
                        actions,
                        behavior_log_prob,
                    },
                );
            prop::collection::vec(traj, n).prop_map(move |trajectories| GroupBatch {
                group_id,
                horizon,
                chunk,
                obs_dim,
                act_dim,
                trajectories,
            })
        },
    )
}

fn data_msg() -> impl Strategy<Value = DataPlaneMsg> {
    prop_oneof![
        (any::<u64>(), prop::collection::vec(group(), 0..3)).prop_map(
            |(policy_version, groups)| DataPlaneMsg::TrajectoryBatch(TrajectoryBatch {
                policy_version,
                groups
            })
        ),
        prop::collection::vec((".{0,8}", ".{0,16}"), 0..4)
            .prop_map(|entries| DataPlaneMsg::Metadata(Metadata { entries })),
        any::<u64>().prop_map(|epoch_id| DataPlaneMsg::Ack { epoch_id }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    // Floats may be NaN, so equality is checked on re-encoded bytes.
    #[test]
    fn data_round_trip_is_bit_exact(msg in data_msg()) {
        let bytes = msg.encode().unwrap();
        if let DataPlaneMsg::TrajectoryBatch(b) = &msg {
            prop_assert_eq!(bytes.len(), wire::trajectory_message_len(b).unwrap());
        }
        let back = DataPlaneMsg::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact(
        params in prop::collection::vec(-1e30f32..1e30, 0..200),
        version in any::<u64>(),
    ) {
        let snap = ParamSnapshot::new(&params, version).unwrap();
        let msg = ControlPlaneMsg { snapshot: snap.clone() };
        let bytes = msg.encode().unwrap();
        prop_assert_eq!(bytes.len(), 31 + 4 * params.len());
        let back = ControlPlaneMsg::decode(&bytes).unwrap();
        prop_assert!(back.snapshot.bit_eq(&snap));
        prop_assert_eq!(back.snapshot.version(), version);
    }

    #[test]
    fn truncation_reports_an_error(msg in data_msg(), cut in 0usize..1000) {
        let bytes = msg.encode().unwrap();
        let cut = cut % bytes.len();
        prop_assert!(wire::decode(&bytes[..cut]).is_err());
    }
}

#[test]
fn trajectory_layout_matches_hand_computed_offsets() {
    let t = Trajectory {
        reward: 1.0,
        behavior_version: 9,
        obs: vec![0.5; 2 * 3],
        actions: vec![0.25; 2 * 4 * 2],
        behavior_log_prob: vec![-1.0; 2],
    };
    let g = GroupBatch {
        group_id: 42,
        horizon: 7,
        chunk: 4,
        obs_dim: 3,
        act_dim: 2,
        trajectories: vec![t],
    };
    let msg = DataPlaneMsg::TrajectoryBatch(TrajectoryBatch {
        policy_version: 5,
        groups: vec![g],
    });
    let b = msg.encode().unwrap();
    // header + version + count + group header + (reward, version, 6 obs, 16 act, 2 logp)
    let expected = 15 + 8 + 4 + (8 + 20) + (4 + 8 + 4 * (6 + 16 + 2));
    assert_eq!(b.len(), expected);
    assert_eq!(
        u64::from_le_bytes(b[7..15].try_into().unwrap()) as usize,
        expected - HEADER_LEN
    );
    assert_eq!(u64::from_le_bytes(b[15..23].try_into().unwrap()), 5);
    assert_eq!(u64::from_le_bytes(b[27..35].try_into().unwrap()), 42);
    // reward follows the 28-byte group header
    assert_eq!(f32::from_le_bytes(b[55..59].try_into().unwrap()), 1.0);
}

#[test]
fn layout_mismatch_is_an_encode_error() {
    let g = GroupBatch {
        group_id: 3,
        horizon: 4,
        chunk: 2,
        obs_dim: 1,
        act_dim: 1,
        trajectories: vec![Trajectory {
            reward: 0.0,
            behavior_version: 0,
            obs: vec![0.0; 2],
            actions: vec![0.0; 4],
            behavior_log_prob: vec![0.0; 4],
        }],
    };
    let msg = DataPlaneMsg::TrajectoryBatch(TrajectoryBatch {
        policy_version: 0,
        groups: vec![g],
    });
    assert!(matches!(
        msg.encode(),
        Err(wire::EncodeError::Layout {
            group_id: 3,
            field: "behavior_log_prob",
            ..
        })
    ));
}

#[test]
fn planes_reject_each_others_messages() {
    let ack = DataPlaneMsg::Ack { epoch_id: 1 }.encode().unwrap();
    assert!(matches!(
        ControlPlaneMsg::decode(&ack),
        Err(DecodeError::WrongPlane { .. })
    ));
    let snap = ControlPlaneMsg {
        snapshot: ParamSnapshot::new(&[1.0], 1).unwrap(),
    }
    .encode()
    .unwrap();
    assert!(matches!(
        DataPlaneMsg::decode(&snap),
        Err(DecodeError::WrongPlane { .. })
    ));
}

#[test]
fn non_finite_snapshot_is_rejected_with_offset() {
    let mut bytes = ControlPlaneMsg {
        snapshot: ParamSnapshot::new(&[1.0, 2.0], 1).unwrap(),
    }
    .encode()
    .unwrap();
    bytes[35..39].copy_from_slice(&f32::NAN.to_le_bytes());
    match ControlPlaneMsg::decode(&bytes) {
        Err(DecodeError::InvalidValue { offset, .. }) => assert_eq!(offset, 31),
        other => panic!("unexpected {other:?}"),
    }
}

fn sample_encodings(rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for _ in 0..32 {
        let horizon = rng.random_range(1..10u32);
        let chunk = rng.random_range(1..4u32);
        let (obs_dim, act_dim) = (rng.random_range(1..4u32), rng.random_range(1..3u32));
        let nc = horizon.div_ceil(chunk) as usize;
        let mut fill = |n: usize| (0..n).map(|_| rng.random::<f32>()).collect::<Vec<_>>();
        let t = Trajectory {
            reward: 1.0,
            behavior_version: 2,
            obs: fill(nc * obs_dim as usize),
            actions: fill(nc * (chunk * act_dim) as usize),
            behavior_log_prob: fill(nc),
        };
        let g = GroupBatch {
            group_id: 7,
            horizon,
            chunk,
            obs_dim,
            act_dim,
            trajectories: vec![t.clone(), t],
        };
        out.push(
            DataPlaneMsg::TrajectoryBatch(TrajectoryBatch {
                policy_version: 2,
                groups: vec![g],
            })
            .encode()
            .unwrap(),
        );
    }
    out.push(
        DataPlaneMsg::Metadata(Metadata::default().with("epoch", 4).with("node", "n1"))
            .encode()
            .unwrap(),
    );
    out.push(DataPlaneMsg::Ack { epoch_id: 9 }.encode().unwrap());
    let params: Vec<f32> = (0..20).map(|i| i as f32).collect();
    out.push(
        ControlPlaneMsg {
            snapshot: ParamSnapshot::new(&params, 3).unwrap(),
        }
        .encode()
        .unwrap(),
    );
    out
}

#[test]
fn decoder_never_panics_on_hostile_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF022);
    let valid = sample_encodings(&mut rng);
    let mut errors = 0usize;
    for i in 0..10_000 {
        let bytes: Vec<u8> = if i % 2 == 0 {
            let n = rng.random_range(0..64);
            let mut b: Vec<u8> = (0..n).map(|_| rng.random()).collect();
            // half of the random inputs get a valid prefix so the body parsers run
            if i % 4 == 0 && b.len() >= 7 {
                b[..4].copy_from_slice(b"DVLA");
                b[4..6].copy_from_slice(&1u16.to_le_bytes());
                b[6] = rng.random_range(1..=4);
            }
            b
        } else {
            let mut b = valid[rng.random_range(0..valid.len())].clone();
            match rng.random_range(0..3) {
                0 if !b.is_empty() => {
                    let k = rng.random_range(0..b.len());
                    b[k] ^= 1 << rng.random_range(0..8);
                }
                1 => b.truncate(rng.random_range(0..=b.len())),
                _ => {
                    for _ in 0..rng.random_range(1..5) {
                        let k = rng.random_range(0..b.len());
                        b[k] = rng.random();
                    }
                }
            }
            b
        };
        let r = std::panic::catch_unwind(|| wire::decode(&bytes));
        match r {
            Ok(Err(_)) => errors += 1,
            Ok(Ok(_)) => {}
            Err(_) => panic!("decoder panicked on {bytes:?}"),
        }
    }
    assert!(errors > 5_000, "only {errors} inputs were rejected");
}
