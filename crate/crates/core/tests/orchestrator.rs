mod common;

use std::time::Duration;

use common::{boxed, ForgedQuote, World};
use secfl::attestation::{frame_kind, CaptureDirection, FrameKind, MemoryTransport, Tapped, WireCapture};
use secfl::audit::{read_entries, verify_audit};
use secfl::canonical;
use secfl::crypto::Digest;
use secfl::fl::{gaussian_classes, Dataset};
use secfl::orchestrator::demo::{run_demo, DemoOptions, DynTransport};
use secfl::orchestrator::{
    AdmissionError, Attack, Coordinator, CoordinatorError, CHECKPOINT_FILE, CLIENT_BUNDLE,
};
use secfl::shield::ShieldError;
use secfl::tee::EnclaveIdentity;
use secfl::{CloneMode, SessionConfig};

fn quick_session(max_rounds: u64) -> SessionConfig {
    SessionConfig {
        max_rounds,
        target_accuracy: 1.0,
        patience: 0,
        ..Default::default()
    }
}

fn kinds(path: &std::path::Path) -> Vec<String> {
    read_entries(path).unwrap().into_iter().map(|e| e.kind).collect()
}

#[test]
fn demo_session_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut opts = DemoOptions::new(dir.path());
    opts.rows_per_client = 100;
    opts.session = quick_session(4);
    let report = run_demo(&opts).unwrap();

    assert_eq!(report.outcome.rounds.len(), 4);
    assert_eq!(report.outcome.model.round, 4);
    for r in &report.outcome.rounds {
        assert_eq!(r.admitted.len(), 3);
        assert_eq!(r.updates.len(), 3);
        assert!(r.dropped.is_empty());
    }
    for c in &report.clients {
        assert_eq!(c.end.as_ref().unwrap().reason, "max-rounds");
        assert_eq!(c.final_params.as_ref(), Some(&report.outcome.model.params));
        assert_eq!(c.submitted.len(), 4);
    }
    assert!(report.test_accuracy > 0.7, "accuracy {}", report.test_accuracy);
    let verdict = verify_audit(&report.outcome.audit_path).unwrap();
    assert!(verdict.is_accepted(), "{verdict}");
    let k = kinds(&report.outcome.audit_path);
    assert_eq!(k.first().map(String::as_str), Some("session-started"));
    assert_eq!(k.last().map(String::as_str), Some("session-ended"));
    assert_eq!(k.iter().filter(|k| *k == "round-committed").count(), 4);
}

#[test]
fn rejected_clients_never_participate() {
    let dir = tempfile::tempdir().unwrap();
    let w = World::new(dir.path(), 4, 60, quick_session(2));
    let (setup, _) = w.coordinator_setup(&dir.path().join("coord"), None);
    let coord: Coordinator<DynTransport> = Coordinator::start(setup).unwrap();

    let mut clients = Vec::new();
    let mut results = Vec::new();
    for i in 0..2 {
        let (a, b) = MemoryTransport::pair();
        clients.push(w.spawn_client(i, boxed(a), None, None));
        results.push(coord.admit(boxed(b)));
    }

    // Right code, wrong data.
    let other: Dataset<f64> = gaussian_classes(60, 4, 1.0, 555);
    let (a, b) = MemoryTransport::pair();
    let wrong_data = w.spawn_client(2, boxed(a), None, Some(other.to_csv_bytes()));
    results.push(coord.admit(boxed(b)));

    // Right data, unapproved code, with its link captured.
    let capture = WireCapture::new();
    let rogue = w.party().spawn_enclave(b"patched client", CLIENT_BUNDLE.config).unwrap();
    let (a, b) = MemoryTransport::pair();
    let wrong_code = w.spawn_agent(3, boxed(Tapped::new(a, capture.clone())), Box::new(rogue), None, None);
    results.push(coord.admit(boxed(b)));

    // Approved measurement, forged signature.
    let forger = ForgedQuote {
        key: ed25519_dalek::SigningKey::from_bytes(&[9; 32]),
        identity: EnclaveIdentity {
            measurement: CLIENT_BUNDLE.measurement(),
            platform_id: w.party().platform_id(),
            svn: 0,
        },
        replayed_nonce: None,
    };
    let (a, b) = MemoryTransport::pair();
    let forged = w.spawn_agent(3, boxed(a), Box::new(forger), None, None);
    results.push(coord.admit(boxed(b)));

    assert!(results[0].is_ok() && results[1].is_ok());
    assert_eq!(results[2], Err(AdmissionError::DatasetHash("site-03".into())));
    assert!(matches!(results[3], Err(AdmissionError::Attestation(_))));
    assert!(matches!(results[4], Err(AdmissionError::Attestation(_))));
    assert!(wrong_data.join().unwrap().unwrap_err().contains("dataset-hash"));
    assert!(wrong_code.join().unwrap().is_err());
    assert!(forged.join().unwrap().is_err());
    assert_eq!(capture.data_frames(), 0);
    assert!(capture
        .frames()
        .iter()
        .all(|f| f.direction == CaptureDirection::Sent || matches!(frame_kind(&f.bytes), FrameKind::Handshake(_))));

    let mut coord = coord;
    let outcome = coord.run_session().unwrap();
    for r in &outcome.rounds {
        assert_eq!(r.admitted, vec!["site-01", "site-02"]);
        assert!(r.updates.iter().all(|u| u.client_id != "site-03" && u.client_id != "site-04"));
    }
    for c in clients {
        assert_eq!(c.join().unwrap().unwrap().commits.len(), 2);
    }
    let entries = read_entries(&outcome.audit_path).unwrap();
    let reasons: Vec<&str> = entries
        .iter()
        .filter(|e| e.kind == "client-rejected")
        .map(|e| e.payload["reason"].as_str().unwrap())
        .collect();
    assert_eq!(reasons, ["dataset-hash", "attestation", "attestation"]);
}

#[test]
fn corrupted_update_is_dropped_and_round_commits() {
    let dir = tempfile::tempdir().unwrap();
    let w = World::new(dir.path(), 3, 60, quick_session(1));
    let (setup, _) = w.coordinator_setup(&dir.path().join("coord"), None);
    let mut coord: Coordinator<DynTransport> = Coordinator::start(setup).unwrap();

    let mut handles = Vec::new();
    for i in 0..3 {
        let (a, b) = MemoryTransport::pair();
        let link: DynTransport = if i == 2 {
            let mut data_frames = 0;
            boxed(Tapped::new(a, WireCapture::new()).with_send_hook(move |mut f| {
                if frame_kind(&f) == FrameKind::Data {
                    data_frames += 1;
                    if data_frames == 2 {
                        let last = f.len() - 1;
                        f[last] ^= 0x40;
                    }
                }
                vec![f]
            }))
        } else {
            boxed(a)
        };
        handles.push(w.spawn_client(i, link, None, None));
        coord.admit(boxed(b)).unwrap();
    }
    let outcome = coord.run_session().unwrap();
    let r = &outcome.rounds[0];
    assert_eq!(r.updates.len(), 2);
    assert_eq!(r.dropped.len(), 1);
    assert_eq!(r.dropped[0].client_id, "site-03");
    assert_eq!(r.dropped[0].reason, "integrity");
    assert_eq!(r.aggregated, vec!["site-01", "site-02"]);
    drop(coord);
    assert!(handles.pop().unwrap().join().unwrap().unwrap().commits.is_empty());
    for h in handles {
        assert_eq!(h.join().unwrap().unwrap().commits.len(), 1);
    }
}

fn run_rounds(w: &World, coord: &mut Coordinator<DynTransport>, rounds: u64) -> Vec<std::thread::JoinHandle<Result<secfl::orchestrator::ClientReport, String>>> {
    let mut handles = Vec::new();
    for i in 0..w.datasets.len() {
        let (a, b) = MemoryTransport::pair();
        handles.push(w.spawn_client(i, boxed(a), None, None));
        coord.admit(boxed(b)).unwrap();
    }
    coord.halt_after(rounds);
    let outcome = coord.run_session().unwrap();
    assert!(outcome.reason.is_none());
    handles
}

#[test]
fn resume_continues_and_stale_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("coord");
    let w = World::new(dir.path(), 2, 60, quick_session(10));

    let (setup, counter_id) = w.coordinator_setup(&state, None);
    let mut coord: Coordinator<DynTransport> = Coordinator::start(setup).unwrap();
    let handles = run_rounds(&w, &mut coord, 2);
    let after_two = coord.model().clone();
    drop(coord);
    for h in handles {
        let r = h.join().unwrap().unwrap();
        assert!(r.end.is_none());
        assert_eq!(r.commits.len(), 2);
    }
    let stale = std::fs::read(state.join(CHECKPOINT_FILE)).unwrap();

    let (setup, _) = w.coordinator_setup(&state, Some(counter_id));
    assert!(matches!(
        Coordinator::<DynTransport>::start(setup),
        Err(CoordinatorError::CheckpointExists(_))
    ));

    let (setup, _) = w.coordinator_setup(&state, Some(counter_id));
    let mut coord: Coordinator<DynTransport> = Coordinator::resume(setup).unwrap();
    assert_eq!(coord.model(), &after_two);
    let handles = run_rounds(&w, &mut coord, 1);
    assert_eq!(coord.model().round, 3);
    assert_eq!(coord.model().history.len(), 3);
    drop(coord);
    for h in handles {
        let r = h.join().unwrap().unwrap();
        assert_eq!(r.joined_at, 2);
        assert_eq!(r.commits[0].round, 3);
    }

    std::fs::write(state.join(CHECKPOINT_FILE), stale).unwrap();
    let (setup, _) = w.coordinator_setup(&state, Some(counter_id));
    match Coordinator::<DynTransport>::resume(setup) {
        Err(CoordinatorError::Shield(ShieldError::RollbackDetected { found, stable })) => assert_eq!(stable, found + 1),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("stale checkpoint accepted"),
    }

    let audit = state.join("audit.log");
    assert!(verify_audit(&audit).unwrap().is_accepted());
    let k = kinds(&audit);
    assert_eq!(k.iter().filter(|k| *k == "session-resumed").count(), 1);
    assert_eq!(k.last().map(String::as_str), Some("resume-refused"));
}

#[test]
fn missing_quorum_fails_the_session() {
    let dir = tempfile::tempdir().unwrap();
    let session = SessionConfig {
        min_clients: 3,
        ..quick_session(5)
    };
    let w = World::new(dir.path(), 3, 40, session);
    let (mut setup, _) = w.coordinator_setup(&dir.path().join("coord"), None);
    setup.join_timeout = Duration::from_millis(100);
    let mut coord: Coordinator<DynTransport> = Coordinator::start(setup).unwrap();
    let mut handles = Vec::new();
    for i in 0..2 {
        let (a, b) = MemoryTransport::pair();
        handles.push(w.spawn_client(i, boxed(a), None, None));
        coord.admit(boxed(b)).unwrap();
    }
    assert!(matches!(coord.run_session(), Err(CoordinatorError::SessionFailed(3))));
    for h in handles {
        let r = h.join().unwrap().unwrap();
        assert_eq!(r.end.unwrap().reason, "failed");
        assert!(r.submitted.is_empty());
    }
    let k = kinds(&coord.audit_path());
    assert_eq!(k.iter().filter(|k| *k == "round-aborted").count(), 3);
    assert_eq!(k.last().map(String::as_str), Some("session-failed"));
    assert!(!coord.checkpoint_path().exists());
}

#[test]
fn scaled_attacker_is_flagged_and_excluded() {
    let dir = tempfile::tempdir().unwrap();
    let mut opts = DemoOptions::new(dir.path());
    opts.clients = 4;
    opts.rows_per_client = 80;
    opts.session = SessionConfig {
        clone_mode: CloneMode::LeaveOneOut,
        outlier_threshold: 0.02,
        ..quick_session(3)
    };
    opts.attack = Some((3, Attack::Scale(-10.0)));
    let report = run_demo(&opts).unwrap();
    for r in &report.outcome.rounds {
        let g = r.guard.as_ref().unwrap();
        assert!(g.flagged.contains("site-04"), "round {}: {:?}", r.round, g.scores);
        assert_eq!(g.flagged.len(), 1);
        assert!(!r.aggregated.contains(&"site-04".to_string()));
    }
    let attacker = report.clients.iter().find(|c| c.client_id == "site-04").unwrap();
    assert!(attacker.commits.iter().all(|c| c.excluded));
    assert!(report.test_accuracy > 0.7);
}

#[test]
fn runs_with_equal_inputs_write_equal_audit_payloads() {
    let payloads = |dir: &std::path::Path| -> Vec<(String, Digest)> {
        let mut opts = DemoOptions::new(dir);
        opts.rows_per_client = 60;
        opts.session = quick_session(3);
        let report = run_demo(&opts).unwrap();
        read_entries(&report.outcome.audit_path)
            .unwrap()
            .into_iter()
            .map(|e| (e.kind, Digest::of(&canonical::to_bytes(&e.payload).unwrap())))
            .collect()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = payloads(a.path());
    assert!(first.len() > 5);
    assert_eq!(first, payloads(b.path()));
}
