use std::thread::{self, JoinHandle};
use std::time::Duration;

use xmk_core::fedavg::SynthConfig;
use xmk_core::federation::{initial_model, run_federation, CryptoContext, FederationSpec, Scheme};
use xmk_core::mkhe::{self, Preset};
use xmk_core::{ModelLayout, TrainingConfig};
use xmk_node::device::{run_device, DeviceConfig, DeviceError, DeviceReport, Fault};
use xmk_node::framing::DEFAULT_MAX_FRAME;
use xmk_node::message::{AbortScope, Body, JoinRequest, MessageKind, RoundMessage, TrainingParams};
use xmk_node::server::{Direction, ProtocolError, Server, ServerConfig, ServerPhase};
use xmk_node::sim::{run_simulation, Network, SimulationConfig, SimulationReport};
use xmk_node::transport::{Endpoint, Hub, Loopback, Received};

fn training() -> TrainingConfig {
    TrainingConfig {
        local_epochs: 5,
        ..TrainingConfig::default()
    }
}

fn synth() -> SynthConfig {
    SynthConfig {
        samples_per_device: 150,
        test_samples: 400,
        ..SynthConfig::default()
    }
}

fn sim(devices: usize, rounds: u32) -> SimulationConfig {
    SimulationConfig {
        devices,
        rounds,
        preset: Preset::Small,
        training: training(),
        seed: 21,
        synth: synth(),
        phase_timeout: Duration::from_secs(20),
        device_timeout: Duration::from_secs(30),
        ..SimulationConfig::default()
    }
}

fn faulty(devices: usize, rounds: u32, faults: Vec<(u32, Fault)>) -> SimulationConfig {
    SimulationConfig {
        faults,
        phase_timeout: Duration::from_millis(1500),
        ..sim(devices, rounds)
    }
}

fn devices_ok(report: &SimulationReport) -> Vec<&DeviceReport> {
    report
        .devices
        .iter()
        .map(|d| d.as_ref().expect("device finished"))
        .collect()
}

#[test]
fn ten_devices_finish_with_identical_state() {
    let cfg = sim(10, 2);
    let report = run_simulation(&cfg).unwrap();
    let session = report.session.as_ref().unwrap();
    assert_eq!(session.outcomes.len(), 2);
    assert!(session.rounds.iter().all(|r| r.failure.is_none()));
    for (i, d) in devices_ok(&report).into_iter().enumerate() {
        assert_eq!(d.id, i as u32 + 1);
        assert_eq!(d.apk_fingerprint, session.apk_fingerprint);
        assert_eq!(d.completed, vec![1, 2]);
        assert_eq!(d.global, report.global);
        let fps: Vec<_> = session
            .outcomes
            .iter()
            .map(|o| (o.round, o.merged_fingerprint))
            .collect();
        assert_eq!(d.results, fps);
    }

    // the in-process pipeline with the same seeds lands on the same model
    let data = cfg.dataset().unwrap();
    let ctx = CryptoContext::new(cfg.preset).unwrap();
    let local = run_federation(
        &FederationSpec {
            scheme: Scheme::XmkCkks,
            rounds: 2,
            training: cfg.training,
            layout: ModelLayout::DEFAULT,
            seed: cfg.seed,
        },
        &data,
        &ctx,
    )
    .unwrap();
    assert_eq!(local.global, report.global);
    let acc: Vec<f64> = report.accuracy().into_iter().map(|(_, a)| a).collect();
    assert_eq!(acc, local.accuracy);
}

#[test]
fn two_devices_are_a_quorum_over_tcp() {
    let report = run_simulation(&SimulationConfig {
        network: Network::Tcp,
        ..sim(2, 2)
    })
    .unwrap();
    let session = report.session.as_ref().unwrap();
    assert_eq!(session.outcomes.len(), 2);
    assert_eq!(devices_ok(&report).len(), 2);
}

#[test]
fn silent_share_aborts_the_round_and_keeps_the_model() {
    let cfg = faulty(3, 2, vec![(2, Fault::SilentOnDecShare(1))]);
    let report = run_simulation(&cfg).unwrap();
    let session = report.session.as_ref().unwrap();
    let r1 = &session.rounds[0];
    let why = r1.failure.as_deref().expect("round 1 fails");
    assert!(why.contains("incomplete decryption quorum"), "{why}");
    assert!(why.contains("[2]"), "{why}");
    assert!(session.rounds[1].failure.is_none());
    assert_eq!(session.outcomes.len(), 1);
    assert_eq!(session.outcomes[0].round, 2);

    // round 2 trained from the untouched initial model
    let data = cfg.dataset().unwrap();
    let ctx = CryptoContext::new(cfg.preset).unwrap();
    let ids: Vec<u32> = (1..=3).collect();
    let s = xmk_core::federation::Session::new(ctx, &ids, cfg.seed).unwrap();
    let w0 = initial_model(ModelLayout::DEFAULT, cfg.seed);
    let local: Vec<_> = data
        .devices
        .iter()
        .zip(&ids)
        .map(|(d, &id)| {
            let t = xmk_core::federation::round_training(&cfg.training, cfg.seed, id, 2);
            xmk_core::fedavg::local_update(&w0, d, &t).unwrap()
        })
        .collect();
    let expected = s.aggregate(Scheme::XmkCkks, &local, 2).unwrap();
    assert_eq!(report.global, expected.average);

    for d in devices_ok(&report) {
        assert_eq!(d.completed, vec![2]);
        assert_eq!(d.failed.len(), 1);
        assert_eq!(d.failed[0].0, 1);
    }
    let aborts: Vec<_> = report
        .transcript
        .iter()
        .filter(|e| e.kind == MessageKind::Abort)
        .collect();
    assert_eq!(aborts.len(), 1);
    assert_eq!(aborts[0].round_id, 1);
}

#[test]
fn silent_update_aborts_before_the_sum_is_broadcast() {
    let report = run_simulation(&faulty(3, 2, vec![(3, Fault::SilentOnUpdate(2))])).unwrap();
    let session = report.session.as_ref().unwrap();
    assert!(session.rounds[0].failure.is_none());
    let why = session.rounds[1].failure.as_deref().unwrap();
    assert!(
        why.contains("missing encrypted updates from devices [3]"),
        "{why}"
    );
    assert!(session.rounds[1].sum_fingerprints.is_empty());
    let csum = report
        .transcript
        .iter()
        .filter(|e| e.kind == MessageKind::CSum1Broadcast)
        .count();
    assert_eq!(csum, 1);
    assert_eq!(report.global, session.outcomes[0].weights);
}

#[test]
fn replayed_shares_are_rejected() {
    let report = run_simulation(&faulty(3, 2, vec![(1, Fault::ReplayDecShare(2))])).unwrap();
    let session = report.session.as_ref().unwrap();
    assert_eq!(session.outcomes.len(), 2, "{:?}", session.rounds);
    let share_rejections: Vec<_> = report
        .rejections
        .iter()
        .filter(|r| r.kind == Some(MessageKind::DecShare))
        .collect();
    assert_eq!(share_rejections.len(), 2);
    assert!(share_rejections.iter().all(|r| r.device == Some(1)));
    assert!(share_rejections[0].reason.contains("stale"));
    assert!(share_rejections[1].reason.contains("different sum"));
}

#[test]
fn garbled_update_names_the_offender() {
    let report = run_simulation(&faulty(3, 2, vec![(2, Fault::GarbledUpdate(1))])).unwrap();
    let session = report.session.as_ref().unwrap();
    let why = session.rounds[0].failure.as_deref().unwrap();
    assert!(why.contains("malformed message from device 2"), "{why}");
    assert!(why.contains("checksum"), "{why}");
    assert!(session.rounds[1].failure.is_none());
}

#[test]
fn every_message_goes_through_the_server() {
    let n = 3;
    let rounds = 2;
    let report = run_simulation(&sim(n, rounds)).unwrap();
    let t = &report.transcript;
    let count = |dir: Direction, kind: MessageKind| {
        t.iter()
            .filter(|e| e.direction == dir && e.kind == kind)
            .count()
    };
    use Direction::*;
    use MessageKind::*;
    let (n, r) = (n, rounds as usize);
    assert_eq!(count(Inbound, JoinRequest), n);
    assert_eq!(count(Outbound, ParamsAnnounce), n);
    assert_eq!(count(Inbound, PubKeyShare), n);
    assert_eq!(count(Outbound, AggPkBroadcast), 1);
    assert_eq!(count(Outbound, GlobalModel), 1);
    assert_eq!(count(Inbound, EncryptedUpdate), n * r);
    assert_eq!(count(Outbound, CSum1Broadcast), r);
    assert_eq!(count(Inbound, DecShare), n * r);
    assert_eq!(count(Outbound, RoundResult), r);
    assert_eq!(count(Outbound, Abort), 0);
    assert_eq!(t.len(), 3 * n + 2 + r * (2 * n + 2));
    assert!(t.iter().all(|e| e.accepted && e.bytes > 0));

    // inbound traffic comes from registered devices; device-to-device never happens
    for e in t.iter().filter(|e| e.direction == Inbound) {
        assert!(matches!(e.peer, Some(id) if (1..=n as u32).contains(&id)));
    }
    // per-device messages are unicast, everything else is a broadcast
    for e in t.iter().filter(|e| e.direction == Outbound) {
        assert_eq!(e.peer.is_some(), e.kind == ParamsAnnounce, "{e:?}");
    }

    // in-round ordering: all updates, one broadcast, all shares, one result
    let round1: Vec<_> = t
        .iter()
        .filter(|e| e.round_id == 1)
        .map(|e| e.kind)
        .collect();
    let mut expected = vec![EncryptedUpdate; n];
    expected.push(CSum1Broadcast);
    expected.extend(vec![DecShare; n]);
    expected.push(RoundResult);
    assert_eq!(round1, expected);
}

#[test]
fn accepted_shares_only_bind_to_the_summed_ciphertext() {
    let report = run_simulation(&sim(4, 2)).unwrap();
    let session = report.session.as_ref().unwrap();
    for rec in &session.rounds {
        assert_eq!(rec.share_bindings.len(), 4);
        assert_eq!(rec.individual_c1.len(), 4);
        for bound in rec.share_bindings.values() {
            assert_eq!(bound, &rec.sum_fingerprints);
        }
        for c1 in rec.individual_c1.values() {
            for fp in c1 {
                assert!(!rec.sum_fingerprints.contains(fp));
            }
        }
    }
}

struct Manual {
    hub_net: Loopback,
    server: Server,
}

fn manual(devices: usize, rounds: u32, timeout: Duration) -> Manual {
    let hub = Hub::new(DEFAULT_MAX_FRAME);
    let hub_net = Loopback::new(hub.handle());
    let server = Server::new(
        ServerConfig {
            devices,
            preset: Preset::Small,
            rounds,
            training: TrainingParams::from_config(&training()),
            layout: ModelLayout::DEFAULT,
            seed: 21,
            phase_timeout: timeout,
            test_set: None,
        },
        hub,
    )
    .unwrap();
    Manual { hub_net, server }
}

fn spawn_device(
    net: &Loopback,
    id: u32,
    preset: Preset,
) -> JoinHandle<Result<DeviceReport, DeviceError>> {
    let data = xmk_core::fedavg::synth_dataset(&SynthConfig {
        num_devices: 3,
        ..synth()
    })
    .unwrap();
    let ep = net.connect();
    let cfg = DeviceConfig {
        requested_id: id,
        preset,
        seed: 21,
        data: data.devices[(id.max(1) - 1) as usize % 3].clone(),
        timeout: Duration::from_secs(20),
        fault: Fault::None,
    };
    thread::spawn(move || run_device(cfg, ep))
}

fn join(ep: &mut Endpoint, id: u32, preset: Preset) {
    let ctx = CryptoContext::new(preset).unwrap();
    let hash = mkhe::params_hash(&ctx.ring, ctx.encoding());
    ep.send(&RoundMessage::new(
        0,
        id,
        Body::JoinRequest(JoinRequest {
            requested_id: id,
            preset: preset.name().into(),
            params_hash: hash,
        }),
    ))
    .unwrap();
}

fn next_message(ep: &Endpoint) -> RoundMessage {
    match ep.recv_timeout(Duration::from_secs(10)) {
        Received::Message(m) => m,
        other => panic!("expected a message, got {other:?}"),
    }
}

#[test]
fn late_joiner_is_turned_away() {
    let mut m = manual(2, 1, Duration::from_secs(20));
    let devices: Vec<_> = (1..=2)
        .map(|id| spawn_device(&m.hub_net, id, Preset::Small))
        .collect();
    let apk = m.server.run_setup().unwrap();
    assert_eq!(m.server.phase(), ServerPhase::Idle);
    assert_eq!(m.server.registered(), vec![1, 2]);

    let mut late = m.hub_net.connect();
    join(&mut late, 3, Preset::Small);
    let out = m.server.run_round(1).unwrap();
    assert_eq!(out.round, 1);
    match next_message(&late).body {
        Body::Abort { scope, reason, .. } => {
            assert_eq!(scope, AbortScope::Session);
            assert_eq!(reason, "registration closed");
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(m.server.registered(), vec![1, 2]);
    assert!(m
        .server
        .rejections()
        .iter()
        .any(|r| r.reason == "registration closed"));
    drop(m);
    for d in devices {
        let d = d.join().unwrap().unwrap();
        assert_eq!(d.apk_fingerprint, apk);
        assert_eq!(d.completed, vec![1]);
    }
}

#[test]
fn duplicate_ids_and_server_assigned_ids() {
    let mut m = manual(3, 0, Duration::from_millis(1500));
    let eps: Vec<Endpoint> = (0..4).map(|_| m.hub_net.connect()).collect();
    let answers = thread::spawn(move || {
        let mut out = Vec::new();
        for (mut ep, id) in eps.into_iter().zip([1, 1, 0, 5]) {
            join(&mut ep, id, Preset::Small);
            out.push(match next_message(&ep).body {
                Body::ParamsAnnounce(p) => Ok(p.device_id),
                Body::Abort { reason, .. } => Err(reason),
                other => panic!("{other:?}"),
            });
        }
        out
    });
    // nobody sends key shares, so setup times out once registration is done
    let err = m.server.run_setup().unwrap_err();
    assert_eq!(
        answers.join().unwrap(),
        vec![
            Ok(1),
            Err("duplicate device id 1".to_string()),
            Ok(2),
            Ok(5)
        ]
    );
    assert!(matches!(err, ProtocolError::SessionAborted { .. }), "{err}");
    assert_eq!(m.server.registered(), vec![1, 2, 5]);
}

#[test]
fn parameter_mismatch_aborts_the_session() {
    let mut m = manual(2, 1, Duration::from_secs(20));
    let good = spawn_device(&m.hub_net, 1, Preset::Small);
    let bad = spawn_device(&m.hub_net, 2, Preset::Standard);
    let err = m.server.run_setup().unwrap_err();
    assert!(
        matches!(&err, ProtocolError::SessionAborted { reason, .. } if reason.contains("parameter hash mismatch")),
        "{err}"
    );
    assert_eq!(m.server.phase(), ServerPhase::Failed);
    drop(m);
    assert!(matches!(
        good.join().unwrap(),
        Err(DeviceError::Aborted(_) | DeviceError::Closed(_))
    ));
    assert!(bad.join().unwrap().is_err());
}

#[test]
fn impersonation_is_rejected() {
    let mut m = manual(2, 1, Duration::from_millis(800));
    let honest = spawn_device(&m.hub_net, 1, Preset::Small);
    let mut rogue = m.hub_net.connect();
    join(&mut rogue, 2, Preset::Small);
    // forge a key share in device 1's name from device 2's connection
    let ctx = CryptoContext::new(Preset::Small).unwrap();
    let p = xmk_core::federation::device_keygen(&ctx, 5, 1).unwrap();
    rogue
        .send(&RoundMessage::new(0, 1, Body::PubKeyShare(p.pk)))
        .unwrap();
    let err = m.server.run_setup().unwrap_err();
    assert!(
        err.to_string()
            .contains("missing public key shares from devices [2]"),
        "{err}"
    );
    assert!(m
        .server
        .rejections()
        .iter()
        .any(|r| r.device == Some(2) && r.reason.contains("sender id 1")));
    drop(m);
    assert!(honest.join().unwrap().is_err());
}
