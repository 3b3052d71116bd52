use std::sync::Arc;
use std::time::Duration;

use swimlane_core::placement::{LinkProfile, TransportKind};
use swimlane_core::{GroupBatch, ParamSnapshot, Trajectory};
use swimlane_planes::wire::snapshot_message_len;
use swimlane_planes::{
    channel, ControlPlane, ControlPlaneMsg, DataPlaneMsg, Plane, PlaneError, PlaneMessage,
    TrajectoryBatch, Transport,
};

fn batch(version: u64) -> Arc<DataPlaneMsg> {
    let t = Trajectory {
        reward: 0.5,
        behavior_version: version,
        obs: vec![0.1; 2 * 4],
        actions: vec![0.2; 2 * 4 * 2],
        behavior_log_prob: vec![-0.3; 2],
    };
    Arc::new(DataPlaneMsg::TrajectoryBatch(TrajectoryBatch {
        policy_version: version,
        groups: vec![GroupBatch {
            group_id: version,
            horizon: 8,
            chunk: 4,
            obs_dim: 4,
            act_dim: 2,
            trajectories: vec![t; 4],
        }],
    }))
}

fn snap(v: u64, n: usize) -> ParamSnapshot {
    ParamSnapshot::new(&vec![v as f32; n], v).unwrap()
}

#[test]
fn in_process_delivery_shares_the_allocation() {
    let t = Transport::new(Plane::Data, TransportKind::InProc);
    let (mut tx, rx) = channel::<DataPlaneMsg>(t.clone(), 4).unwrap();
    let m = batch(1);
    tx.publish(m.clone(), 0).unwrap();
    let got = rx.recv().unwrap();
    assert!(Arc::ptr_eq(&got.msg, &m));
    assert_eq!(got.bytes, 0);
    let c = t.counters();
    assert_eq!((c.copies, c.bytes, c.messages), (0, 0, 1));
}

#[test]
fn wire_delivery_costs_two_copies_per_message() {
    let t = Transport::new(Plane::Data, TransportKind::Wire);
    let (mut tx, rx) = channel::<DataPlaneMsg>(t.clone(), 4).unwrap();
    let m = batch(1);
    let len = m.encode().unwrap().len() as u64;
    for _ in 0..3 {
        tx.publish(m.clone(), 0).unwrap();
        let got = rx.recv().unwrap();
        assert!(!Arc::ptr_eq(&got.msg, &m));
        assert_eq!(*got.msg, *m);
        assert_eq!(got.bytes, len);
    }
    let c = t.counters();
    assert_eq!((c.copies, c.bytes, c.messages), (6, 3 * len, 3));
}

#[test]
fn transport_rejects_the_wrong_plane() {
    let t = Transport::new(Plane::Control, TransportKind::InProc);
    assert!(matches!(
        channel::<DataPlaneMsg>(t, 2),
        Err(PlaneError::PlaneMismatch {
            expected: Plane::Data,
            got: Plane::Control
        })
    ));
    let t = Transport::new(Plane::Data, TransportKind::InProc);
    assert!(ControlPlane::new(t).is_err());
}

#[test]
fn full_channel_blocks_the_producer() {
    let t = Transport::new(Plane::Data, TransportKind::InProc);
    let (mut tx, rx) = channel::<DataPlaneMsg>(t, 2).unwrap();
    tx.publish(batch(1), 0).unwrap();
    tx.publish(batch(2), 0).unwrap();
    assert!(matches!(tx.try_publish(batch(3), 0), Err(PlaneError::Full)));
    assert!(matches!(
        tx.publish_timeout(batch(3), 0, Duration::from_millis(20)),
        Err(PlaneError::Full)
    ));

    let h = std::thread::spawn(move || {
        tx.publish(batch(3), 0).unwrap();
        tx
    });
    std::thread::sleep(Duration::from_millis(30));
    assert!(!h.is_finished(), "third publish should still be blocked");
    assert_eq!(rx.recv().unwrap().seq, 0);
    let _tx = h.join().unwrap();
    // nothing was dropped
    assert_eq!(rx.recv().unwrap().seq, 1);
    assert_eq!(rx.recv().unwrap().seq, 2);
}

#[test]
fn per_producer_order_is_preserved() {
    let t = Transport::new(Plane::Data, TransportKind::Wire);
    let (tx, rx) = channel::<DataPlaneMsg>(t, 3).unwrap();
    let handles: Vec<_> = (0..4u32)
        .map(|p| {
            let mut s = tx.for_producer(p);
            std::thread::spawn(move || {
                for v in 0..50 {
                    s.publish(Arc::new(DataPlaneMsg::Ack { epoch_id: v }), 0)
                        .unwrap();
                }
            })
        })
        .collect();
    drop(tx);
    let mut next = [0u64; 4];
    while let Ok(d) = rx.recv() {
        let p = d.producer as usize;
        assert_eq!(d.seq, next[p]);
        assert_eq!(*d.msg, DataPlaneMsg::Ack { epoch_id: next[p] });
        next[p] += 1;
    }
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(next, [50; 4]);
}

#[test]
fn receiver_sees_closed_after_senders_drop() {
    let t = Transport::new(Plane::Data, TransportKind::InProc);
    let (tx, rx) = channel::<DataPlaneMsg>(t, 1).unwrap();
    drop(tx);
    assert!(matches!(rx.recv(), Err(PlaneError::Closed)));
}

#[test]
fn shutdown_interrupts_a_blocked_receive() {
    let t = Transport::new(Plane::Data, TransportKind::InProc);
    let (_tx, rx) = channel::<DataPlaneMsg>(t, 1).unwrap();
    let (stop_tx, stop_rx) = crossbeam_channel::bounded::<()>(0);
    let h = std::thread::spawn(move || rx.recv_or_shutdown(&stop_rx).unwrap());
    drop(stop_tx);
    assert!(h.join().unwrap().is_none());
}

#[test]
fn broadcast_versions_must_increase() {
    let cp = ControlPlane::new(Transport::new(Plane::Control, TransportKind::InProc)).unwrap();
    let _s = cp.subscribe(1);
    cp.broadcast(&snap(3, 4), 0).unwrap();
    assert!(matches!(
        cp.broadcast(&snap(3, 4), 0),
        Err(PlaneError::VersionRegression { last: 3, got: 3 })
    ));
    assert!(matches!(
        cp.broadcast(&snap(2, 4), 0),
        Err(PlaneError::VersionRegression { last: 3, got: 2 })
    ));
    cp.broadcast(&snap(4, 4), 0).unwrap();
}

#[test]
fn depth_one_mailbox_keeps_only_the_newest() {
    let cp = ControlPlane::new(Transport::new(Plane::Control, TransportKind::Wire)).unwrap();
    let s = cp.subscribe(1);
    for v in 1..=5 {
        cp.broadcast(&snap(v, 8), 0).unwrap();
    }
    assert_eq!(s.dropped(), 4);
    let got = s.try_recv_latest().unwrap().unwrap();
    assert_eq!(got.msg.snapshot.version(), 5);
    assert!(got.msg.snapshot.bit_eq(&snap(5, 8)));
    assert!(s.try_recv_latest().unwrap().is_none());
}

#[test]
fn deeper_mailbox_delivers_in_version_order() {
    let cp = ControlPlane::new(Transport::new(Plane::Control, TransportKind::InProc)).unwrap();
    let s = cp.subscribe(3);
    for v in 1..=5 {
        cp.broadcast(&snap(v, 2), 0).unwrap();
    }
    let got: Vec<u64> = s
        .recv_all(Some(Duration::ZERO))
        .unwrap()
        .iter()
        .map(|d| d.msg.snapshot.version())
        .collect();
    assert_eq!(got, vec![3, 4, 5]);
}

#[test]
fn in_process_broadcast_shares_one_buffer() {
    let t = Transport::new(Plane::Control, TransportKind::InProc);
    let cp = ControlPlane::new(t.clone()).unwrap();
    let subs: Vec<_> = (0..3).map(|_| cp.subscribe(1)).collect();
    let s = snap(1, 16);
    cp.broadcast(&s, 0).unwrap();
    for sub in &subs {
        let d = sub.try_recv_latest().unwrap().unwrap();
        assert!(d.msg.snapshot.same_buffer(&s));
    }
    assert_eq!(t.counters().copies, 0);
}

#[test]
fn wire_broadcast_counts_bytes_per_subscriber() {
    let p = 1_000;
    let t = Transport::new(Plane::Control, TransportKind::Wire);
    let cp = ControlPlane::new(t.clone()).unwrap();
    let subs: Vec<_> = (0..4).map(|_| cp.subscribe(1)).collect();
    let sent = cp.broadcast(&snap(1, p), 0).unwrap();
    let per = snapshot_message_len(p) as u64;
    assert_eq!(per, 31 + 4 * p as u64);
    assert_eq!(sent, 4 * per);
    for s in &subs {
        let d = s.try_recv_latest().unwrap().unwrap();
        assert_eq!(d.bytes, per);
        assert!(d.msg.snapshot.bit_eq(&snap(1, p)));
    }
    let c = t.counters();
    assert_eq!(c.bytes, 4 * per);
    assert_eq!(c.copies, 8);
}

#[test]
fn close_wakes_a_waiting_subscriber() {
    let cp =
        Arc::new(ControlPlane::new(Transport::new(Plane::Control, TransportKind::InProc)).unwrap());
    let s = cp.subscribe(1);
    let h = std::thread::spawn(move || s.recv_latest(None));
    std::thread::sleep(Duration::from_millis(10));
    cp.close();
    assert!(matches!(h.join().unwrap(), Err(PlaneError::Closed)));
}

#[test]
fn link_delay_is_latency_plus_serialization() {
    let t = Transport::new(Plane::Data, TransportKind::Wire);
    t.inject_link_profile(50.0, Some(1e9));
    // 50us + 8000 bytes at 1e9 B/s = 50_000 + 8_000 ns
    assert_eq!(t.delay_ns(8_000), 58_000);
    t.inject_link_profile(0.0, None);
    assert_eq!(t.delay_ns(1 << 20), 0);
    let inproc = Transport::with_link(
        Plane::Data,
        TransportKind::InProc,
        LinkProfile {
            latency_us: 50.0,
            bandwidth_bps: Some(1.0),
        },
    );
    assert_eq!(inproc.delay_ns(1 << 20), 0);

    let t = Transport::with_link(
        Plane::Data,
        TransportKind::Wire,
        LinkProfile {
            latency_us: 10.0,
            bandwidth_bps: Some(1e8),
        },
    );
    let (mut tx, rx) = channel::<DataPlaneMsg>(t, 2).unwrap();
    let m = Arc::new(DataPlaneMsg::Ack { epoch_id: 0 });
    let release = tx.publish(m, 1_000).unwrap();
    // 23 bytes at 1e8 B/s = 230 ns
    assert_eq!(release, 1_000 + 10_000 + 230);
    assert_eq!(rx.recv().unwrap().release_vt, release);
}

#[test]
fn pacing_holds_messages_until_release() {
    let t = Transport::with_link(
        Plane::Data,
        TransportKind::Wire,
        LinkProfile {
            latency_us: 20_000.0,
            bandwidth_bps: None,
        },
    );
    t.set_pacing(true);
    let (mut tx, rx) = channel::<DataPlaneMsg>(t, 2).unwrap();
    let start = std::time::Instant::now();
    tx.publish(Arc::new(DataPlaneMsg::Ack { epoch_id: 0 }), 0)
        .unwrap();
    rx.recv().unwrap();
    assert!(start.elapsed() >= Duration::from_millis(20));
}

#[test]
fn control_messages_never_enter_the_data_channel() {
    // The channel is typed by message; this is a compile-time property. The
    // runtime check is that a control transport cannot back a data channel.
    let t = Transport::new(Plane::Control, TransportKind::Wire);
    assert!(channel::<DataPlaneMsg>(t.clone(), 1).is_err());
    assert!(channel::<ControlPlaneMsg>(t, 1).is_ok());
}
