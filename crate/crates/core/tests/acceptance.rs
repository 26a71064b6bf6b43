//! End-to-end acceptance criteria. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{boxed, files_under, ForgedQuote, NeedleSet, World};
use ed25519_dalek::SigningKey;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secfl::attestation::{MemoryTransport, Rejection, Role, Tapped, WireCapture};
use secfl::audit::{verify_audit_bytes, AuditVerdict};
use secfl::counter::wal::MemWal;
use secfl::counter::{CounterClient, CounterService, Stabilization};
use secfl::fl::{aggregate, evaluate, gaussian_classes, gradient, local_train, loss, train, Dataset, ModelUpdate, ParameterVector};
use secfl::guard::inspect;
use secfl::orchestrator::demo::{run_demo, DemoOptions, DynTransport};
use secfl::orchestrator::{Coordinator, CLIENT_BUNDLE};
use secfl::policy::{PolicyClient, PolicyError};
use secfl::shield::{shield_decrypt, shield_encrypt_fresh, KeyId, ShieldError, ShieldedFile};
use secfl::tee::{measure, EnclaveIdentity, Platform};
use secfl::{CloneMode, SessionConfig};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Federated training matches centralized SGD on the pooled data.
fn utility_parity() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let opts = DemoOptions::new(dir.path());
    let report = run_demo(&opts).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    let owners: Vec<Dataset<f64>> = report.datasets[..opts.clients]
        .iter()
        .map(|d| Dataset::from_csv_bytes(&d.csv).unwrap())
        .collect();
    let pooled = Dataset::concat(&owners.iter().collect::<Vec<_>>()).unwrap();
    let rounds = report.outcome.model.round as usize;
    let cfg = SessionConfig {
        local_epochs: opts.session.local_epochs * rounds,
        ..opts.session.clone()
    };
    let central = train(&ParameterVector::zeros(opts.dim), &pooled, &cfg, 1).map_err(|e| e.to_string())?;
    let central_acc = evaluate(&central, &report.test).unwrap().accuracy;
    let gap = (report.test_accuracy - central_acc).abs();
    let detail = format!(
        "federated {:.4} vs centralized {:.4} after {rounds} rounds, gap {:.2} pp, {:.1}s",
        report.test_accuracy,
        central_acc,
        gap * 100.0,
        elapsed.as_secs_f64()
    );
    check(gap <= 0.02, format!("gap too large: {detail}"))?;
    check(elapsed < Duration::from_secs(30), format!("too slow: {detail}"))?;
    Ok(detail)
}

/// Signature x measurement x nonce: only the all-good cell gets secrets or
/// admission, and no other cell sees an application frame.
fn attestation_matrix() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let session = SessionConfig {
        max_rounds: 1,
        target_accuracy: 1.0,
        ..Default::default()
    };
    let w = World::new(dir.path(), 2, 40, session);
    let (legit, _) = w.client_bundle();
    let secret_values: Vec<Vec<u8>> = legit.environment.values().chain(&legit.arguments).map(|s| s.as_bytes().to_vec()).collect();
    let secrets = NeedleSet::new(secret_values.iter().map(Vec::as_slice));
    let bogus_key = SigningKey::from_bytes(&[0x5a; 32]);
    let unpinned = measure(b"unapproved client build", CLIENT_BUNDLE.config).unwrap();

    let mut cells = 0;
    for sig_ok in [true, false] {
        for pinned in [true, false] {
            for fresh in [true, false] {
                let all_good = sig_ok && pinned && fresh;
                let forger = || ForgedQuote {
                    key: if sig_ok { w.root.root_signing_key().clone() } else { bogus_key.clone() },
                    identity: EnclaveIdentity {
                        measurement: if pinned { CLIENT_BUNDLE.measurement() } else { unpinned },
                        platform_id: w.root.platform_id(),
                        svn: 0,
                    },
                    replayed_nonce: if fresh { None } else { Some([0x11; 32]) },
                };
                let cell = format!("sig={sig_ok} pinned={pinned} fresh={fresh}");

                // Secret release by the policy manager.
                let capture = WireCapture::new();
                let link = Tapped::new(w.manager_link(), capture.clone());
                let mut pc = PolicyClient::connect(link, &forger(), Role::Client, w.manager_policy()).map_err(|e| e.to_string())?;
                let reply = pc.request_secrets(&w.policy_hash, Role::Client);
                drop(pc);
                match (&reply, all_good) {
                    (Ok(b), true) => check(b.environment == legit.environment, format!("{cell}: wrong bundle"))?,
                    (Err(PolicyError::AccessDenied(r)), false) => {
                        let expected = if !sig_ok {
                            Rejection::Signature
                        } else if !fresh {
                            Rejection::NonceMismatch
                        } else {
                            Rejection::MeasurementMismatch
                        };
                        check(*r == expected, format!("{cell}: denied for {r}, expected {expected}"))?;
                        check(secrets.find_in(&capture.bytes()).is_none(), format!("{cell}: secret bytes on the wire"))?;
                    }
                    (other, _) => return Err(format!("{cell}: unexpected secret reply {other:?}")),
                }

                // Admission by the coordinator.
                let (setup, _) = w.coordinator_setup(&dir.path().join(format!("coord-{cells}")), None);
                let mut coord: Coordinator<DynTransport> = Coordinator::start(setup).map_err(|e| e.to_string())?;
                let capture = WireCapture::new();
                let (a, b) = MemoryTransport::pair();
                let agent = w.spawn_agent(1, boxed(Tapped::new(a, capture.clone())), Box::new(forger()), None, None);
                let admitted = coord.admit(boxed(b));
                check(admitted.is_ok() == all_good, format!("{cell}: admission {admitted:?}"))?;
                if all_good {
                    let (a, b) = MemoryTransport::pair();
                    let honest = w.spawn_client(0, boxed(a), None, None);
                    coord.admit(boxed(b)).map_err(|e| e.to_string())?;
                    let outcome = coord.run_session().map_err(|e| e.to_string())?;
                    drop(coord);
                    check(outcome.rounds[0].aggregated.len() == 2, format!("{cell}: round did not include both"))?;
                    let report = agent.join().unwrap()?;
                    check(report.commits.len() == 1, format!("{cell}: no model received"))?;
                    honest.join().unwrap()?;
                } else {
                    drop(coord);
                    check(agent.join().unwrap().is_err(), format!("{cell}: agent ran"))?;
                    check(capture.data_frames() == 0, format!("{cell}: {} application frames", capture.data_frames()))?;
                }
                cells += 1;
            }
        }
    }
    Ok(format!("{cells} cells, release and admission only with valid signature, pinned measurement and fresh nonce"))
}

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).unwrap()
}

/// FedAvg against exact rational arithmetic.
fn fedavg_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfeda);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let clients = rng.gen_range(1..=10);
        let dim = rng.gen_range(1..=64);
        let scale = 10f64.powi(rng.gen_range(-3..=3));
        let updates: Vec<ModelUpdate<f64>> = (0..clients)
            .map(|c| {
                let p: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
                ModelUpdate::new(format!("c{c:02}"), 1, ParameterVector::new(p).unwrap(), rng.gen_range(1..=1000)).unwrap()
            })
            .collect();
        let got = aggregate(&updates).map_err(|e| e.to_string())?;
        let total: u64 = updates.iter().map(|u| u.num_examples).sum();
        for j in 0..dim {
            let mut sum = BigRational::zero();
            for u in &updates {
                sum += exact(u.params.as_slice()[j]) * BigRational::from_integer(BigInt::from(u.num_examples));
            }
            let want = sum / BigRational::from_integer(BigInt::from(total));
            let err = ((exact(got.as_slice()[j]) - &want).abs() / want.abs().max(exact(f64::MIN_POSITIVE)))
                .to_f64()
                .unwrap();
            worst = worst.max(err);
            check(err <= 1e-12, format!("case {case} coordinate {j}: relative error {err:e}"))?;
        }
    }
    Ok(format!("100 cases, worst relative error {worst:.2e}"))
}

/// Analytic gradient against central finite differences.
fn gradient_check() -> Outcome {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for point in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(point);
        let dim = rng.gen_range(1..=10);
        let data: Dataset<f64> = gaussian_classes(rng.gen_range(5..80), dim, 1.0, point + 100);
        let theta: Vec<f64> = (0..=dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g = gradient(&ParameterVector::new(theta.clone()).unwrap(), &data).map_err(|e| e.to_string())?;
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        for i in 0..theta.len() {
            let at = |d: f64| {
                let mut t = theta.clone();
                t[i] += d;
                loss(&ParameterVector::new(t).unwrap(), &data).unwrap()
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            diff2 += (g[i] - fd).powi(2);
            norm2 += g[i].powi(2).max(fd.powi(2));
        }
        let rel = diff2.sqrt() / norm2.sqrt().max(1e-12);
        worst = worst.max(rel);
        check(rel <= 1e-5, format!("point {point}: relative error {rel:e}"))?;
    }
    Ok(format!("20 points, worst relative error {worst:.2e}"))
}

/// Only the newest version of a protected file decrypts, and stable counter
/// values never move backwards across crashes.
fn freshness() -> Outcome {
    let platform = Platform::generate();
    let enclave = platform.spawn_enclave(b"counter host", b"v1").unwrap();
    let key = [0x42u8; 32];
    let key_id = KeyId::for_secret("k");
    for writes in 1..=10usize {
        let wal = MemWal::new();
        let mut svc = CounterService::open(&enclave, Box::new(wal.clone()), Stabilization::Background).unwrap();
        let id = svc.create_counter().unwrap();
        let mut versions: Vec<ShieldedFile> = Vec::new();
        for v in 0..writes {
            let pt = format!("version {v}");
            versions.push(shield_encrypt_fresh(pt.as_bytes(), &key, key_id, &svc, id, Duration::from_secs(5)).unwrap());
            if v % 3 == 2 {
                svc.simulate_crash();
                wal.crash();
                svc = CounterService::open(&enclave, Box::new(wal.clone()), Stabilization::Background).unwrap();
            }
        }
        for (v, f) in versions.iter().enumerate() {
            let r = shield_decrypt(&ShieldedFile::from_bytes(&f.to_bytes()).unwrap(), &key, &svc);
            if v + 1 == writes {
                check(r.as_deref() == Ok(format!("version {v}").as_bytes()), format!("{writes} writes: latest rejected: {r:?}"))?;
            } else {
                check(
                    matches!(r, Err(ShieldError::RollbackDetected { .. })),
                    format!("{writes} writes: version {v} accepted"),
                )?;
            }
        }
    }

    let mut schedules = 0;
    for schedule in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(schedule);
        let wal = MemWal::new();
        let mut svc = CounterService::open(&enclave, Box::new(wal.clone()), Stabilization::Manual).unwrap();
        let id = svc.create_counter().unwrap();
        let mut last = svc.read_stable(id).unwrap().value;
        for _ in 0..rng.gen_range(5..50) {
            match rng.gen_range(0..8) {
                0..=2 => {
                    svc.increment_async(id).unwrap();
                }
                3..=4 => {
                    svc.stabilize().unwrap();
                }
                5..=6 => {}
                _ => {
                    svc.simulate_crash();
                    wal.crash();
                    svc = CounterService::open(&enclave, Box::new(wal.clone()), Stabilization::Manual).unwrap();
                }
            }
            let v = svc.read_stable(id).unwrap().value;
            check(v >= last, format!("schedule {schedule}: stable value fell from {last} to {v}"))?;
            last = v;
        }
        schedules += 1;
    }
    Ok(format!("write sequences of 1..=10 and {schedules} crash schedules"))
}

/// Leave-one-out cloning flags a scaled attacker and leaves honest rosters alone.
fn poisoning() -> Outcome {
    let (mut detected, mut clean) = (0, 0);
    for seed in 0..20u64 {
        let cfg = SessionConfig {
            clone_mode: CloneMode::LeaveOneOut,
            outlier_threshold: 0.02,
            rng_seed: seed,
            ..Default::default()
        };
        let validation: Dataset<f64> = gaussian_classes(400, 8, 0.8, 10_000 + seed);
        let start = ParameterVector::zeros(8);
        let honest: Vec<ModelUpdate<f64>> = (0..9)
            .map(|i| {
                let data: Dataset<f64> = gaussian_classes(100, 8, 0.8, seed * 100 + i);
                local_train(&format!("c{i}"), 1, &start, &data, &cfg, seed * 100 + i).unwrap()
            })
            .collect();
        let mut attacked = honest[..8].to_vec();
        let a = &honest[8];
        attacked.push(ModelUpdate::new("c8", 1, a.params.scaled(-10.0), a.num_examples).unwrap());

        let r = inspect(&attacked, &validation, &cfg, 1).map_err(|e| e.to_string())?;
        if r.flagged.contains("c8") {
            detected += 1;
        }
        if inspect(&honest, &validation, &cfg, 1).map_err(|e| e.to_string())?.flagged.is_empty() {
            clean += 1;
        }
    }
    let detail = format!("attacker flagged in {detected}/20 seeds, honest control clean in {clean}/20");
    check(detected >= 18 && clean >= 18, detail.clone())?;
    Ok(detail)
}

/// No plaintext rows, updates or secrets on the wire or on disk.
fn confidentiality() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let capture = WireCapture::new();
    let mut opts = DemoOptions::new(dir.path());
    opts.capture = Some(capture.clone());
    opts.session.max_rounds = 5;
    let report = run_demo(&opts).map_err(|e| e.to_string())?;

    let mut needles: Vec<Vec<u8>> = Vec::new();
    for d in &report.datasets {
        let text = std::str::from_utf8(&d.csv).unwrap();
        needles.extend(text.lines().skip(1).map(|l| l.as_bytes().to_vec()));
        let parsed: Dataset<f64> = Dataset::from_csv_bytes(&d.csv).unwrap();
        for i in 0..parsed.len() {
            needles.push(parsed.row(i).iter().flat_map(|x| x.to_be_bytes()).collect());
            needles.push(parsed.row(i).iter().flat_map(|x| x.to_le_bytes()).collect());
        }
    }
    let mut updates = 0;
    for c in &report.clients {
        for u in &c.submitted {
            needles.push(u.params.to_bytes());
            needles.push(secfl::orchestrator::protocol::encode_params(&u.params).into_bytes());
            updates += 1;
        }
    }
    needles.extend(report.secret_values.iter().map(|s| s.as_bytes().to_vec()));
    let set = NeedleSet::new(needles.iter().map(Vec::as_slice));

    let control = report.clients[0].submitted[0].params.to_bytes();
    check(
        set.find_in(&report.datasets[0].csv).is_some() && set.find_in(&control).is_some(),
        "scanner misses known plaintext",
    )?;

    let wire = capture.bytes();
    if let Some(at) = set.find_in(&wire) {
        return Err(format!("plaintext on the wire at byte {at}"));
    }
    let files = files_under(dir.path());
    let mut disk = 0;
    for f in &files {
        let bytes = std::fs::read(f).unwrap();
        disk += bytes.len();
        if let Some(at) = set.find_in(&bytes) {
            return Err(format!("plaintext in {} at byte {at}", f.display()));
        }
    }
    check(updates > 0 && wire.len() > 0, "nothing was captured")?;
    Ok(format!(
        "{} needles ({} rows, {updates} updates, {} secrets) absent from {} wire bytes and {} files ({disk} bytes)",
        set.len(),
        report.datasets.iter().map(|d| d.csv.iter().filter(|&&b| b == b'\n').count() - 1).sum::<usize>(),
        report.secret_values.len(),
        wire.len(),
        files.len()
    ))
}

/// Any single-byte edit is reported at the entry that contains it.
fn audit_tamper() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut opts = DemoOptions::new(dir.path());
    opts.rows_per_client = 60;
    opts.session.max_rounds = 5;
    let report = run_demo(&opts).map_err(|e| e.to_string())?;
    let log = std::fs::read(&report.outcome.audit_path).unwrap();
    let entries = log.iter().filter(|&&b| b == b'\n').count() as u64;
    check(
        verify_audit_bytes(&log) == AuditVerdict::Accepted { entries },
        "untouched log rejected",
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xa0d17);
    for trial in 0..50 {
        let pos = rng.gen_range(0..log.len());
        let mut bad = log.clone();
        let old = bad[pos];
        bad[pos] = loop {
            let b = rng.gen_range(0x20u8..0x7f);
            if b != old {
                break b;
            }
        };
        let expected = 1 + log[..pos].iter().filter(|&&b| b == b'\n').count() as u64;
        match verify_audit_bytes(&bad) {
            AuditVerdict::Broken { entry, .. } if entry == expected => {}
            other => return Err(format!("trial {trial}: edit at byte {pos} (entry {expected}) gave {other}")),
        }
    }
    Ok(format!("50 edits over {entries} entries, each localized"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("utility parity", utility_parity),
        ("attestation matrix", attestation_matrix),
        ("FedAvg exactness", fedavg_oracle),
        ("gradient check", gradient_check),
        ("rollback freshness", freshness),
        ("poisoning detection", poisoning),
        ("confidentiality scan", confidentiality),
        ("audit tamper localization", audit_tamper),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {}. {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}. {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
