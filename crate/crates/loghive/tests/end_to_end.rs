//! Full-stack integration: real TCP connections, real handshakes, the
//! complete device → agent → warehouse path, and the control channel.

use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use loghive::agent::{encode_device_batch, send_control, ControlVerb};
use loghive::device::{run_device, DeviceMode, DeviceProfile};
use loghive::harness::{
    launch_agent, launch_warehouse, provision, provision_impostor, run_bench, BenchOptions,
};
use loghive::identity::{load_identity, Keyring, Role};
use loghive::transport::{Event, LinkParams, RejectReason, SecureLink};
use loghive::wire;

fn small_link_params() -> LinkParams {
    LinkParams::default()
}

/// Two ends of a freshly handshaken link between device0 and the agent of
/// a provisioned deployment.
fn link_pair(root: &std::path::Path, params: &LinkParams) -> (SecureLink, SecureLink) {
    let dep = provision(root, 1, false).unwrap();
    let agent_identity = Arc::new(load_identity(&dep.dir("agent"), Role::Agent).unwrap());
    let agent_ring = Keyring::open(&dep.keyring_dir("agent")).unwrap();
    let device_identity = Arc::new(load_identity(&dep.device_dir(0), Role::Device).unwrap());
    let device_ring = Keyring::open(&dep.device_dir(0).join("keyring")).unwrap();

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let params_clone = params.clone();
    let acceptor = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        SecureLink::accept(stream, agent_identity, &agent_ring, &params_clone, &mut |_| Ok(()))
            .unwrap()
    });
    let initiator = SecureLink::connect(
        TcpStream::connect(addr).unwrap(),
        device_identity,
        &device_ring,
        params,
        None,
    )
    .unwrap();
    (initiator, acceptor.join().unwrap())
}

#[test]
fn handshake_establishes_session_with_synced_clocks() {
    let dir = tempfile::tempdir().unwrap();
    let (device, agent) = link_pair(dir.path(), &small_link_params());
    assert_eq!(device.epoch(), 1);
    assert_eq!(agent.epoch(), 1);
    // same host, same clock: the measured offset is latency noise only
    assert!(device.clock_offset_ms().abs() < 1000, "offset {}", device.clock_offset_ms());
    assert!(agent.clock_offset_ms().abs() < 1000);
}

#[test]
fn data_replay_expiry_and_rekey_on_a_live_link() {
    let dir = tempfile::tempdir().unwrap();
    let params = LinkParams {
        ttl_kilobits: 1, // 125 bytes of plaintext per key
        replay_width: 64,
        validity_secs: 1,
    };
    let (mut device, mut agent) = link_pair(dir.path(), &params);

    // 1. an encrypted batch goes through and decrypts intact; its 150+
    // byte payload exhausts the 125-byte (1 kilobit) key budget
    let payload = encode_device_batch(1, &["x".repeat(150)]);
    let (_, _, frame1) = device.send(wire::LOG_BATCH, payload.clone(), true).unwrap();
    assert!(device.rekey_required());
    match agent.recv_event().unwrap() {
        Event::Message(m) => {
            assert_eq!(m.msg_type, wire::LOG_BATCH);
            assert!(m.signed);
            assert_eq!(m.payload, payload);
        }
        other => panic!("expected message, got {other:?}"),
    }

    // 2. the same frame re-injected verbatim is a replay reject
    device.inject_raw(&frame1).unwrap();
    match agent.recv_event().unwrap() {
        Event::Rejected { reason, .. } => assert_eq!(reason, RejectReason::Replay),
        other => panic!("expected replay reject, got {other:?}"),
    }

    // 3. the next encrypting send must renegotiate first; the sender
    // blocks on DH_ACCEPT, so it runs on its own thread while this one
    // plays the agent
    let epoch_before = device.epoch();
    let sender = thread::spawn(move || {
        device
            .send(wire::LOG_BATCH, encode_device_batch(2, &["short".into()]), true)
            .unwrap();
        device
    });
    let mut saw_rekey = false;
    loop {
        match agent.recv_event().unwrap() {
            Event::Rekeyed => saw_rekey = true,
            Event::Message(m) => {
                assert_eq!(m.msg_type, wire::LOG_BATCH);
                break;
            }
            Event::Rejected { reason, .. } => panic!("unexpected reject: {reason:?}"),
        }
    }
    let mut device = sender.join().unwrap();
    assert!(saw_rekey);
    assert_eq!(device.epoch(), epoch_before + 1);
    assert_eq!(device.epoch(), agent.epoch());

    // 4. a pre-rekey frame re-injected now fails the epoch check
    device.inject_raw(&frame1).unwrap();
    match agent.recv_event().unwrap() {
        Event::Rejected { reason, .. } => assert_eq!(reason, RejectReason::EpochMismatch),
        other => panic!("expected epoch reject, got {other:?}"),
    }

    // 5. an expired frame is dropped: validity is 1 s, so after 2.5 s the
    // receiver's clock has passed it
    let (_, _, stale) = device.send(wire::LOG_BATCH, encode_device_batch(3, &["late".into()]), true).unwrap();
    let _ = stale;
    thread::sleep(Duration::from_millis(2500));
    match agent.recv_event().unwrap() {
        Event::Rejected { reason, .. } => assert_eq!(reason, RejectReason::Expired),
        other => panic!("expected expiry drop, got {other:?}"),
    }
}

#[test]
fn acks_flow_back_over_the_same_link() {
    let dir = tempfile::tempdir().unwrap();
    let (mut device, mut agent) = link_pair(dir.path(), &small_link_params());
    let (wire_id, _, _) = device
        .send(wire::LOG_BATCH, encode_device_batch(1, &["a line".into()]), true)
        .unwrap();
    match agent.recv_event().unwrap() {
        Event::Message(m) => agent.send_ack(m.message_id).unwrap(),
        other => panic!("expected message, got {other:?}"),
    }
    match device.recv_event().unwrap() {
        Event::Message(m) => {
            assert_eq!(m.msg_type, wire::ACK);
            assert_eq!(loghive::transport::parse_ack(&m.payload).unwrap(), wire_id);
        }
        other => panic!("expected ack, got {other:?}"),
    }
}

#[test]
fn one_device_bench_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_bench(
        dir.path(),
        &BenchOptions {
            devices: 1,
            bytes_per_device: 200 * 1024,
            corpus_lines: 2_000,
            ..BenchOptions::default()
        },
    )
    .unwrap();
    assert!(report.lossless, "read-back mismatch");
    assert_eq!(report.lost_batches, 0);
    assert!(report.total_bytes >= 200 * 1024);
}

#[test]
fn two_devices_interleave_without_mixing() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_bench(
        dir.path(),
        &BenchOptions {
            devices: 2,
            bytes_per_device: 100 * 1024,
            corpus_lines: 1_000,
            ..BenchOptions::default()
        },
    )
    .unwrap();
    assert!(report.lossless);
    assert_eq!(report.lost_batches, 0);
    assert_eq!(report.per_device.len(), 2);
}

#[test]
fn impostor_is_rejected_and_agent_stays_up() {
    let dir = tempfile::tempdir().unwrap();
    let dep = provision(dir.path(), 1, false).unwrap();
    let (imp_dir, imp_ring) = provision_impostor(dir.path(), false).unwrap();
    let warehouse = launch_warehouse(&dep, small_link_params(), "store").unwrap();
    let agent = launch_agent(&dep, warehouse.addr(), small_link_params(), 4).unwrap();

    let corpus = dep.corpus_path(0);
    loghive::device::write_corpus(&corpus, &loghive::device::default_templates(), 100, 1).unwrap();

    // several impostor attempts, all refused before any data flows
    for _ in 0..3 {
        let mut profile = DeviceProfile::new(imp_dir.clone(), imp_ring.clone(), corpus.clone());
        profile.mode = DeviceMode::Impostor;
        profile.agent_endpoint = Some(agent.capture_addr());
        profile.total_bytes = 10_000;
        let report = run_device(&profile).unwrap();
        assert!(report.handshake_rejected, "impostor was not rejected");
        assert_eq!(report.batches, 0);
    }
    // the worker increments after replying, so poll briefly
    let deadline = std::time::Instant::now() + Duration::from_secs(2);
    loop {
        let failures = agent.counters().auth_failures.load(std::sync::atomic::Ordering::Relaxed);
        if failures >= 3 || std::time::Instant::now() > deadline {
            assert_eq!(failures, 3);
            break;
        }
        thread::sleep(Duration::from_millis(20));
    }

    // an honest device still works afterwards
    let mut profile = DeviceProfile::new(
        dep.device_dir(0),
        dep.device_dir(0).join("keyring"),
        corpus.clone(),
    );
    profile.agent_endpoint = Some(agent.capture_addr());
    profile.agent_id = Some(agent.agent_id());
    profile.total_bytes = 5_000;
    let report = run_device(&profile).unwrap();
    assert!(!report.handshake_rejected);
    assert!(report.batches > 0);
    assert_eq!(report.acks_received, report.batches);

    agent.stop();
    let stored = warehouse.read_device_log(dep.device_ids[0], None).unwrap();
    assert!(!stored.is_empty());
    warehouse.stop();
}

#[test]
fn replayed_frames_are_rejected_and_stored_once() {
    let dir = tempfile::tempdir().unwrap();
    let dep = provision(dir.path(), 1, false).unwrap();
    let warehouse = launch_warehouse(&dep, small_link_params(), "store").unwrap();
    let agent = launch_agent(&dep, warehouse.addr(), small_link_params(), 4).unwrap();

    let corpus = dep.corpus_path(0);
    let lines =
        loghive::device::write_corpus(&corpus, &loghive::device::default_templates(), 500, 3).unwrap();

    let mut profile = DeviceProfile::new(
        dep.device_dir(0),
        dep.device_dir(0).join("keyring"),
        corpus,
    );
    profile.agent_endpoint = Some(agent.capture_addr());
    profile.agent_id = Some(agent.agent_id());
    profile.total_bytes = 60_000;
    profile.batch_max_bytes = 8 * 1024;
    profile.mode = DeviceMode::Replayer {
        duplicates: 100,
        cross_epoch: 0,
    };
    let report = run_device(&profile).unwrap();
    assert_eq!(report.replays_injected, 100);
    assert_eq!(report.acks_received, report.batches);
    assert_eq!(report.unexpected_acks, 0);

    agent.stop();
    let stored = warehouse.read_device_log(dep.device_ids[0], None).unwrap();
    let expected: Vec<&String> = (0..report.lines_sent as usize)
        .map(|n| &lines[n % lines.len()])
        .collect();
    assert_eq!(stored.len(), expected.len());
    assert!(stored.iter().zip(&expected).all(|(a, b)| &a == b));
    warehouse.stop();
}

#[test]
fn replay_rejects_are_counted_by_the_agent() {
    let dir = tempfile::tempdir().unwrap();
    let dep = provision(dir.path(), 1, false).unwrap();
    let warehouse = launch_warehouse(&dep, small_link_params(), "store").unwrap();
    let agent = launch_agent(&dep, warehouse.addr(), small_link_params(), 4).unwrap();

    let corpus = dep.corpus_path(0);
    loghive::device::write_corpus(&corpus, &loghive::device::default_templates(), 500, 3).unwrap();
    let mut profile = DeviceProfile::new(
        dep.device_dir(0),
        dep.device_dir(0).join("keyring"),
        corpus,
    );
    profile.agent_endpoint = Some(agent.capture_addr());
    profile.agent_id = Some(agent.agent_id());
    profile.total_bytes = 40_000;
    profile.batch_max_bytes = 8 * 1024;
    profile.mode = DeviceMode::Replayer {
        duplicates: 50,
        cross_epoch: 0,
    };
    let report = run_device(&profile).unwrap();
    assert_eq!(report.replays_injected, 50);

    // give the worker a moment to chew through the injected frames
    let deadline = std::time::Instant::now() + Duration::from_secs(5);
    loop {
        let rejects = agent
            .counters()
            .replay_rejects
            .load(std::sync::atomic::Ordering::Relaxed);
        if rejects >= 50 || std::time::Instant::now() > deadline {
            assert_eq!(rejects, 50);
            break;
        }
        thread::sleep(Duration::from_millis(50));
    }
    agent.stop();
    warehouse.stop();
}

#[test]
fn control_channel_status_redirect_filter_and_authorization() {
    let dir = tempfile::tempdir().unwrap();
    let dep = provision(dir.path(), 2, false).unwrap();
    let warehouse_a = launch_warehouse(&dep, small_link_params(), "store-a").unwrap();
    let agent = launch_agent(&dep, warehouse_a.addr(), small_link_params(), 4).unwrap();

    let controller = load_identity(&dep.dir("controller"), Role::Agent).unwrap();
    let controller_ring = Keyring::open(&dep.keyring_dir("controller")).unwrap();

    // GET_STATUS over the signed control channel
    let status = send_control(
        agent.control_addr(),
        agent.agent_id(),
        &controller,
        &controller_ring,
        ControlVerb::GetStatus,
        &[],
    )
    .unwrap();
    assert!(status.contains("sessions_total=0"), "status was {status:?}");

    // an unauthorized identity (device0) is rejected before parsing
    let rogue = load_identity(&dep.device_dir(0), Role::Device).unwrap();
    let mut rogue_ring_dir = dep.device_dir(0);
    rogue_ring_dir.push("keyring");
    let rogue_ring = Keyring::open(&rogue_ring_dir).unwrap();
    let err = send_control(
        agent.control_addr(),
        agent.agent_id(),
        &rogue,
        &rogue_ring,
        ControlVerb::GetStatus,
        &[],
    )
    .unwrap_err();
    assert!(err.to_string().contains("rejected"), "got {err}");

    // SET_LOG_FILTER that excludes device1 refuses its next connection
    let keep = dep.device_ids[0].to_hex();
    send_control(
        agent.control_addr(),
        agent.agent_id(),
        &controller,
        &controller_ring,
        ControlVerb::SetLogFilter,
        &[("filter", &keep)],
    )
    .unwrap();

    let corpus = dep.corpus_path(1);
    loghive::device::write_corpus(&corpus, &loghive::device::default_templates(), 100, 9).unwrap();
    let mut filtered = DeviceProfile::new(
        dep.device_dir(1),
        dep.device_dir(1).join("keyring"),
        corpus.clone(),
    );
    filtered.agent_endpoint = Some(agent.capture_addr());
    filtered.total_bytes = 5_000;
    let report = run_device(&filtered).unwrap();
    assert!(report.handshake_rejected, "filtered device was not refused");

    // SET_WAREHOUSE: batches after the switch land at warehouse B
    let warehouse_b = launch_warehouse(&dep, small_link_params(), "store-b").unwrap();
    send_control(
        agent.control_addr(),
        agent.agent_id(),
        &controller,
        &controller_ring,
        ControlVerb::SetWarehouse,
        &[("endpoint", &warehouse_b.addr().to_string())],
    )
    .unwrap();

    let corpus0 = dep.corpus_path(0);
    loghive::device::write_corpus(&corpus0, &loghive::device::default_templates(), 200, 5).unwrap();
    let mut honest = DeviceProfile::new(
        dep.device_dir(0),
        dep.device_dir(0).join("keyring"),
        corpus0,
    );
    honest.agent_endpoint = Some(agent.capture_addr());
    honest.agent_id = Some(agent.agent_id());
    honest.total_bytes = 20_000;
    let report = run_device(&honest).unwrap();
    assert!(report.batches > 0);

    agent.stop();
    let at_b = warehouse_b.read_device_log(dep.device_ids[0], None).unwrap();
    assert!(!at_b.is_empty(), "redirected batches missing from warehouse B");
    let at_a = warehouse_a.read_device_log(dep.device_ids[0], None).unwrap();
    assert!(at_a.is_empty(), "batches leaked to the old warehouse");

    warehouse_a.stop();
    warehouse_b.stop();
}
