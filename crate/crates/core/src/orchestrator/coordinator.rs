use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use ed25519_dalek::VerifyingKey;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::protocol::{
    self, decode_params, encode_params, Join, JoinAccepted, ModelBroadcast, RoundCommit, SessionEnd, UpdateSubmit,
    MSG_JOIN, MSG_MODEL_BROADCAST, MSG_ROUND_COMMIT, MSG_SESSION_END, MSG_UPDATE_SUBMIT,
};
use super::train_seed;
use crate::attestation::{
    attested_handshake, AttestationPolicy, ChannelError, HandshakeConfig, PeerCheck, Role, SecureChannel, Side,
    Transport,
};
use crate::audit::{AuditError, AuditLog, Clock};
use crate::canonical;
use crate::counter::{CounterClient, CounterError, CounterId};
use crate::crypto::Digest;
use crate::fl::{aggregate, converged, evaluate, Convergence, Dataset, FlError, GlobalModel, ModelUpdate, ParameterVector, RoundMetrics};
use crate::guard::{inspect, GuardError, GuardReport};
use crate::policy::PolicyView;
use crate::shield::{shield_decrypt, shield_encrypt, KeyId, ShieldError, ShieldedFile};
use crate::tee::{Enclave, Measurement};

pub const CHECKPOINT_FILE: &str = "checkpoint.sfl";
pub const COORDINATOR_AUDIT_FILE: &str = "audit.log";
/// Policy secret whose value encrypts checkpoints.
pub const CHECKPOINT_KEY_NAME: &str = "checkpoint_key";

/// Consecutive rounds that may miss quorum before the session fails.
pub const MAX_QUORUM_FAILURES: u32 = 3;

#[derive(Debug, Error)]
pub enum CoordinatorError {
    #[error("validation dataset: {0}")]
    Validation(String),
    #[error("round {round}: {received} of {required} required updates")]
    Quorum { round: u64, received: usize, required: usize },
    #[error("session failed after {0} rounds without quorum")]
    SessionFailed(u32),
    #[error("a checkpoint already exists at {0}; resume instead")]
    CheckpointExists(PathBuf),
    #[error("no checkpoint at {0}")]
    NoCheckpoint(PathBuf),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint refused: {0}")]
    Shield(#[from] ShieldError),
    #[error("counter: {0}")]
    Counter(#[from] CounterError),
    #[error("audit log: {0}")]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Fl(#[from] FlError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AdmissionError {
    #[error("attestation: {0}")]
    Attestation(String),
    #[error("{0} is not on the roster")]
    Roster(String),
    #[error("{0} presented a dataset that does not match the policy")]
    DatasetHash(String),
    #[error("{0} is already connected")]
    Duplicate(String),
    #[error("join: {0}")]
    Protocol(String),
}

impl AdmissionError {
    pub fn reason(&self) -> &'static str {
        match self {
            AdmissionError::Attestation(_) => "attestation",
            AdmissionError::Roster(_) => "roster",
            AdmissionError::DatasetHash(_) => "dataset-hash",
            AdmissionError::Duplicate(_) => "duplicate",
            AdmissionError::Protocol(_) => "protocol",
        }
    }
}

/// Everything a coordinator needs, normally assembled from its injection
/// bundle.
pub struct CoordinatorSetup {
    pub enclave: Enclave,
    pub trusted_root: VerifyingKey,
    pub min_svn: u16,
    pub policy: PolicyView,
    /// Plaintext CSV of the validation dataset; its hash must match the policy.
    pub validation_csv: Vec<u8>,
    pub checkpoint_key: [u8; 32],
    pub counter: Arc<dyn CounterClient>,
    pub checkpoint_counter: CounterId,
    pub state_dir: PathBuf,
    pub round_deadline: Duration,
    /// How long admission waits for a JOIN and the session waits for the roster.
    pub join_timeout: Duration,
    pub clock: Option<Clock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmittedUpdate {
    pub client_id: String,
    pub params_hash: Digest,
    pub num_examples: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedClient {
    pub client_id: String,
    pub reason: String,
}

/// What one committed round did, as written to the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub admitted: Vec<String>,
    pub updates: Vec<SubmittedUpdate>,
    pub dropped: Vec<DroppedClient>,
    pub guard: Option<GuardReport>,
    pub guard_skipped: Option<String>,
    pub aggregated: Vec<String>,
    pub params_hash: Digest,
    pub checkpoint_hash: Digest,
    pub counter_value: u64,
    pub metrics: RoundMetrics,
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub model: GlobalModel<f64>,
    /// `None` when the session was halted before converging.
    pub reason: Option<Convergence>,
    pub rounds: Vec<RoundRecord>,
    pub audit_path: PathBuf,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    policy_hash: Digest,
    round: u64,
    params: String,
    history: Vec<RoundMetrics>,
}

struct Member<T> {
    channel: SecureChannel<T>,
    num_examples: u64,
}

struct Shared<T> {
    enclave: Enclave,
    client_policy: AttestationPolicy,
    policy: PolicyView,
    join_timeout: Duration,
    audit: Mutex<AuditLog>,
    members: Mutex<BTreeMap<String, Member<T>>>,
    joined: Condvar,
    round: Mutex<u64>,
}

/// Admits clients into a running coordinator; cheap to clone and safe to
/// use from acceptor threads.
pub struct Admitter<T>(Arc<Shared<T>>);

impl<T> Clone for Admitter<T> {
    fn clone(&self) -> Self {
        Self(self.0.clone())
    }
}

impl<T: Transport> Admitter<T> {
    /// Attests the client, checks its JOIN against the roster and, on
    /// success, adds it to the next round.
    pub fn admit(&self, transport: T) -> Result<String, AdmissionError> {
        let s = &self.0;
        let mut ch = match attested_handshake(
            transport,
            HandshakeConfig {
                side: Side::Responder,
                role: Role::Coordinator,
                attester: &s.enclave,
                peer_check: PeerCheck::Verify(s.client_policy.clone()),
            },
        ) {
            Ok(ch) => ch,
            Err(e) => return self.reject(None, AdmissionError::Attestation(e.to_string())),
        };
        let join = ch
            .set_read_timeout(Some(s.join_timeout))
            .and_then(|_| ch.recv_msg())
            .map_err(|e| AdmissionError::Protocol(e.to_string()))
            .and_then(|(ty, body)| match ty {
                MSG_JOIN => protocol::parse::<Join>(&body).map_err(|e| AdmissionError::Protocol(e.to_string())),
                other => Err(AdmissionError::Protocol(format!("expected JOIN, got message {other}"))),
            });
        let join = match join {
            Ok(j) => j,
            Err(e) => return self.reject(None, e),
        };
        let id = join.client_id.clone();
        let check = match s.policy.roster_hash(&id) {
            None => Err(AdmissionError::Roster(id.clone())),
            Some(h) if h != join.dataset_hash => Err(AdmissionError::DatasetHash(id.clone())),
            Some(_) if join.num_examples == 0 => Err(AdmissionError::Protocol("empty dataset".into())),
            Some(_) => Ok(()),
        };
        let mut members = s.members.lock().unwrap();
        let check = check.and_then(|_| match members.contains_key(&id) {
            true => Err(AdmissionError::Duplicate(id.clone())),
            false => Ok(()),
        });
        if let Err(e) = check {
            drop(members);
            let _ = protocol::send_error(&mut ch, e.reason());
            return self.reject(Some(&id), e);
        }
        let round = *s.round.lock().unwrap();
        let reply = JoinAccepted {
            client_id: id.clone(),
            round,
        };
        if let Err(e) = protocol::send(&mut ch, MSG_JOIN, &reply) {
            drop(members);
            return self.reject(Some(&id), AdmissionError::Protocol(e.to_string()));
        }
        let measurement = ch.peer_identity().map(|i| i.measurement);
        members.insert(
            id.clone(),
            Member {
                channel: ch,
                num_examples: join.num_examples,
            },
        );
        drop(members);
        s.joined.notify_all();
        let _ = s
            .audit
            .lock()
            .unwrap()
            .append("client-admitted", json!({ "client_id": id, "measurement": measurement }));
        log::info!("admitted {id}");
        Ok(id)
    }

    fn reject(&self, id: Option<&str>, e: AdmissionError) -> Result<String, AdmissionError> {
        log::warn!("rejected client: {e}");
        let _ = self
            .0
            .audit
            .lock()
            .unwrap()
            .append("client-rejected", json!({ "client_id": id, "reason": e.reason() }));
        Err(e)
    }
}

/// Drives training rounds for one policy.
pub struct Coordinator<T> {
    shared: Arc<Shared<T>>,
    validation: Dataset<f64>,
    checkpoint_key: [u8; 32],
    counter: Arc<dyn CounterClient>,
    checkpoint_counter: CounterId,
    state_dir: PathBuf,
    round_deadline: Duration,
    model: GlobalModel<f64>,
    records: Vec<RoundRecord>,
    halt_after: Option<u64>,
}

fn open_validation(setup: &CoordinatorSetup) -> Result<Dataset<f64>, CoordinatorError> {
    if Digest::of(&setup.validation_csv) != setup.policy.validation_dataset_hash {
        return Err(CoordinatorError::Validation("hash does not match the policy".into()));
    }
    let data = Dataset::from_csv_bytes(&setup.validation_csv).map_err(|e| CoordinatorError::Validation(e.to_string()))?;
    if data.is_empty() {
        return Err(CoordinatorError::Validation("no rows".into()));
    }
    Ok(data)
}

fn open_audit(setup: &mut CoordinatorSetup) -> Result<AuditLog, CoordinatorError> {
    std::fs::create_dir_all(&setup.state_dir)?;
    let path = setup.state_dir.join(COORDINATOR_AUDIT_FILE);
    Ok(match setup.clock.take() {
        Some(c) => AuditLog::open_with_clock(&path, c)?,
        None => AuditLog::open(&path)?,
    })
}

fn client_policy(setup: &CoordinatorSetup) -> AttestationPolicy {
    AttestationPolicy::new(
        setup.trusted_root,
        [setup.policy.allowed_measurements.client],
        setup.min_svn,
    )
    .expect("one measurement")
}

impl<T: Transport> Coordinator<T> {
    /// Starts a new session. Refuses if a checkpoint already exists.
    pub fn start(mut setup: CoordinatorSetup) -> Result<Self, CoordinatorError> {
        setup
            .policy
            .session
            .validate(setup.policy.client_roster.len())
            .map_err(|e| CoordinatorError::Validation(e.to_string()))?;
        let validation = open_validation(&setup)?;
        let checkpoint = setup.state_dir.join(CHECKPOINT_FILE);
        if checkpoint.exists() {
            return Err(CoordinatorError::CheckpointExists(checkpoint));
        }
        let mut audit = open_audit(&mut setup)?;
        audit.append(
            "session-started",
            json!({
                "policy_hash": setup.policy.policy_hash,
                "measurement": setup.enclave.measurement(),
                "roster": setup.policy.client_roster.iter().map(|c| &c.id).collect::<Vec<_>>(),
            }),
        )?;
        let model = GlobalModel::new(ParameterVector::zeros(validation.dim()));
        Ok(Self::assemble(setup, validation, audit, model))
    }

    /// Continues from the sealed checkpoint. A checkpoint whose counter
    /// value is not the current stable value is refused as a rollback.
    pub fn resume(mut setup: CoordinatorSetup) -> Result<Self, CoordinatorError> {
        let validation = open_validation(&setup)?;
        let path = setup.state_dir.join(CHECKPOINT_FILE);
        let mut audit = open_audit(&mut setup)?;
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(CoordinatorError::NoCheckpoint(path)),
            Err(e) => return Err(e.into()),
        };
        let opened = ShieldedFile::from_bytes(&bytes)
            .and_then(|f| shield_decrypt(&f, &setup.checkpoint_key, &setup.counter));
        let plaintext = match opened {
            Ok(p) => p,
            Err(e) => {
                audit.append("resume-refused", json!({ "reason": e.to_string() }))?;
                return Err(e.into());
            }
        };
        let cp: Checkpoint =
            canonical::from_slice(&plaintext).map_err(|e| CoordinatorError::Checkpoint(e.to_string()))?;
        if cp.policy_hash != setup.policy.policy_hash {
            return Err(CoordinatorError::Checkpoint("checkpoint belongs to another policy".into()));
        }
        let params = decode_params(&cp.params)?;
        if params.dim() != validation.dim() + 1 {
            return Err(CoordinatorError::Checkpoint("parameter dimension mismatch".into()));
        }
        let model = GlobalModel {
            round: cp.round,
            params,
            history: cp.history,
        };
        audit.append(
            "session-resumed",
            json!({ "policy_hash": cp.policy_hash, "round": cp.round, "checkpoint_hash": Digest::of(&plaintext) }),
        )?;
        Ok(Self::assemble(setup, validation, audit, model))
    }

    fn assemble(setup: CoordinatorSetup, validation: Dataset<f64>, audit: AuditLog, model: GlobalModel<f64>) -> Self {
        let shared = Arc::new(Shared {
            client_policy: client_policy(&setup),
            enclave: setup.enclave,
            policy: setup.policy,
            join_timeout: setup.join_timeout,
            audit: Mutex::new(audit),
            members: Mutex::new(BTreeMap::new()),
            joined: Condvar::new(),
            round: Mutex::new(model.round),
        });
        Self {
            shared,
            validation,
            checkpoint_key: setup.checkpoint_key,
            counter: setup.counter,
            checkpoint_counter: setup.checkpoint_counter,
            state_dir: setup.state_dir,
            round_deadline: setup.round_deadline,
            model,
            records: Vec::new(),
            halt_after: None,
        }
    }

    pub fn admitter(&self) -> Admitter<T> {
        Admitter(self.shared.clone())
    }

    pub fn admit(&self, transport: T) -> Result<String, AdmissionError> {
        self.admitter().admit(transport)
    }

    pub fn admitted(&self) -> Vec<String> {
        self.shared.members.lock().unwrap().keys().cloned().collect()
    }

    /// Waits until at least `n` clients are connected or `timeout` passes.
    pub fn wait_for_clients(&self, n: usize, timeout: Duration) -> bool {
        let members = self.shared.members.lock().unwrap();
        let (members, _) = self
            .shared
            .joined
            .wait_timeout_while(members, timeout, |m| m.len() < n)
            .unwrap();
        members.len() >= n
    }

    pub fn model(&self) -> &GlobalModel<f64> {
        &self.model
    }

    pub fn policy(&self) -> &PolicyView {
        &self.shared.policy
    }

    pub fn audit_path(&self) -> PathBuf {
        self.state_dir.join(COORDINATOR_AUDIT_FILE)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.state_dir.join(CHECKPOINT_FILE)
    }

    /// Stop [`run_session`](Self::run_session) once this many rounds have
    /// been committed by this process, without ending the session.
    pub fn halt_after(&mut self, rounds: u64) {
        self.halt_after = Some(rounds);
    }

    fn audit(&self) -> MutexGuard<'_, AuditLog> {
        self.shared.audit.lock().unwrap()
    }

    /// Runs one round with every connected client.
    pub fn run_round(&mut self) -> Result<RoundRecord, CoordinatorError> {
        let cfg = self.shared.policy.session.clone();
        let round = self.model.round + 1;
        let shared = self.shared.clone();
        let mut members = shared.members.lock().unwrap();
        let admitted: Vec<String> = members.keys().cloned().collect();
        let mut dropped = Vec::new();
        let drop_member =
            |members: &mut BTreeMap<String, Member<T>>, dropped: &mut Vec<DroppedClient>, id: &str, reason: &str, close: bool| {
                log::warn!("round {round}: dropping {id}: {reason}");
                if close {
                    members.remove(id);
                }
                dropped.push(DroppedClient {
                    client_id: id.to_string(),
                    reason: reason.to_string(),
                });
            };

        if admitted.len() < cfg.min_clients {
            drop(members);
            return self.abort(round, admitted.len(), &dropped);
        }

        let params = encode_params(&self.model.params);
        for id in &admitted {
            let msg = ModelBroadcast {
                round,
                params: params.clone(),
                seed: train_seed(cfg.rng_seed, round, id),
            };
            let m = members.get_mut(id).expect("listed");
            if protocol::send(&mut m.channel, MSG_MODEL_BROADCAST, &msg).is_err() {
                drop_member(&mut members, &mut dropped, id, "disconnected", true);
            }
        }

        let deadline = Instant::now() + self.round_deadline;
        let dim = self.model.params.dim();
        let mut updates: Vec<ModelUpdate<f64>> = Vec::new();
        let ids: Vec<String> = members.keys().cloned().collect();
        for id in ids {
            let m = members.get_mut(&id).expect("listed");
            let outcome = loop {
                let remaining = deadline.saturating_duration_since(Instant::now());
                if remaining.is_zero() {
                    break Err(("deadline", false));
                }
                let _ = m.channel.set_read_timeout(Some(remaining));
                let (ty, body) = match m.channel.recv_msg() {
                    Ok(msg) => msg,
                    Err(ChannelError::Timeout) => break Err(("deadline", false)),
                    Err(ChannelError::Closed | ChannelError::Transport(_)) => break Err(("disconnected", true)),
                    Err(_) => break Err(("integrity", true)),
                };
                if ty != MSG_UPDATE_SUBMIT {
                    break Err(("protocol", true));
                }
                let Ok(sub) = protocol::parse::<UpdateSubmit>(&body) else {
                    break Err(("protocol", true));
                };
                if sub.round < round {
                    log::debug!("round {round}: discarding stale update from {id} for round {}", sub.round);
                    continue;
                }
                break check_update(&id, round, dim, m.num_examples, sub).map_err(|r| (r, true));
            };
            match outcome {
                Ok(u) => updates.push(u),
                Err((reason, close)) => drop_member(&mut members, &mut dropped, &id, reason, close),
            }
        }
        drop(members);

        if updates.len() < cfg.min_clients {
            return self.abort(round, updates.len(), &dropped);
        }

        let (guard, guard_skipped) = match inspect(&updates, &self.validation, &cfg, round) {
            Ok(r) => (Some(r), None),
            Err(GuardError::InvalidConfig(reason)) => (None, Some(reason)),
            Err(GuardError::Fl(e)) => (None, Some(e.to_string())),
        };
        let flagged: BTreeSet<String> = guard.as_ref().map(|g| g.flagged.clone()).unwrap_or_default();
        let kept: Vec<ModelUpdate<f64>> = updates
            .iter()
            .filter(|u| !flagged.contains(&u.client_id))
            .cloned()
            .collect();
        if kept.is_empty() {
            return self.abort(round, 0, &dropped);
        }
        let new_params = aggregate(&kept)?;
        let eval = evaluate(&new_params, &self.validation)?;
        let metrics = RoundMetrics {
            round,
            accuracy: eval.accuracy,
            loss: eval.loss,
        };

        let mut history = self.model.history.clone();
        history.push(metrics);
        let (checkpoint_hash, counter_value) = self.write_checkpoint(round, &new_params, history)?;
        self.model.commit(new_params, metrics)?;
        *self.shared.round.lock().unwrap() = round;

        let record = RoundRecord {
            round,
            admitted,
            updates: updates
                .iter()
                .map(|u| SubmittedUpdate {
                    client_id: u.client_id.clone(),
                    params_hash: Digest(u.params_hash),
                    num_examples: u.num_examples,
                })
                .collect(),
            dropped,
            guard,
            guard_skipped,
            aggregated: kept.iter().map(|u| u.client_id.clone()).collect(),
            params_hash: Digest(self.model.params.hash()),
            checkpoint_hash,
            counter_value,
            metrics,
        };
        self.audit()
            .append("round-committed", serde_json::to_value(&record).expect("records serialize"))?;

        let aggregated: BTreeSet<&String> = record.aggregated.iter().collect();
        let params = encode_params(&self.model.params);
        let mut members = shared.members.lock().unwrap();
        let mut gone = Vec::new();
        for (id, m) in members.iter_mut() {
            let msg = RoundCommit {
                round,
                params: params.clone(),
                accuracy: metrics.accuracy,
                loss: metrics.loss,
                excluded: !aggregated.contains(id),
            };
            if protocol::send(&mut m.channel, MSG_ROUND_COMMIT, &msg).is_err() {
                gone.push(id.clone());
            }
        }
        for id in gone {
            members.remove(&id);
        }
        log::info!(
            "round {round} committed: {} updates, accuracy {:.4}, loss {:.6}",
            record.aggregated.len(),
            metrics.accuracy,
            metrics.loss
        );
        self.records.push(record.clone());
        Ok(record)
    }

    fn abort(&mut self, round: u64, received: usize, dropped: &[DroppedClient]) -> Result<RoundRecord, CoordinatorError> {
        let required = self.shared.policy.session.min_clients;
        self.audit().append(
            "round-aborted",
            json!({ "round": round, "received": received, "required": required, "dropped": dropped }),
        )?;
        Err(CoordinatorError::Quorum {
            round,
            received,
            required,
        })
    }

    /// Increment, encrypt, write aside, wait for stability, then rename into
    /// place: the file on disk always matches the stable counter value.
    fn write_checkpoint(
        &self,
        round: u64,
        params: &ParameterVector<f64>,
        history: Vec<RoundMetrics>,
    ) -> Result<(Digest, u64), CoordinatorError> {
        let cp = Checkpoint {
            policy_hash: self.shared.policy.policy_hash,
            round,
            params: encode_params(params),
            history,
        };
        let plaintext = canonical::to_bytes(&cp).expect("checkpoints serialize");
        let token = self.counter.increment_async(self.checkpoint_counter)?;
        let file = shield_encrypt(
            &plaintext,
            &self.checkpoint_key,
            KeyId::for_secret(CHECKPOINT_KEY_NAME),
            &token,
            &self.counter.verifying_key(),
        )?;
        let path = self.checkpoint_path();
        let tmp = path.with_extension("tmp");
        write_synced(&tmp, &file.to_bytes())?;
        self.counter
            .wait_stable(self.checkpoint_counter, token.value, Duration::from_secs(30))?;
        std::fs::rename(&tmp, &path)?;
        Ok((Digest::of(&plaintext), token.value))
    }

    /// Runs rounds until convergence, the configured halt, or repeated
    /// quorum failure.
    pub fn run_session(&mut self) -> Result<SessionOutcome, CoordinatorError> {
        let cfg = self.shared.policy.session.clone();
        let roster = self.shared.policy.client_roster.len();
        let join_timeout = self.shared.join_timeout;
        self.wait_for_clients(roster, join_timeout);
        let mut failures = 0;
        let mut committed = 0;
        loop {
            if let Some(reason) = converged(&self.model.history, &cfg) {
                self.end(reason.as_str())?;
                return Ok(self.outcome(Some(reason)));
            }
            if self.halt_after.is_some_and(|n| committed >= n) {
                return Ok(self.outcome(None));
            }
            match self.run_round() {
                Ok(_) => {
                    failures = 0;
                    committed += 1;
                }
                Err(CoordinatorError::Quorum { .. }) => {
                    failures += 1;
                    if failures >= MAX_QUORUM_FAILURES {
                        self.audit()
                            .append("session-failed", json!({ "round": self.model.round + 1, "reason": "quorum" }))?;
                        self.broadcast_end("failed");
                        return Err(CoordinatorError::SessionFailed(failures));
                    }
                    self.wait_for_clients(cfg.min_clients, join_timeout);
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn end(&mut self, reason: &str) -> Result<(), CoordinatorError> {
        self.audit().append(
            "session-ended",
            json!({ "round": self.model.round, "reason": reason, "params_hash": Digest(self.model.params.hash()) }),
        )?;
        self.broadcast_end(reason);
        Ok(())
    }

    fn broadcast_end(&self, reason: &str) {
        let msg = SessionEnd {
            round: self.model.round,
            reason: reason.to_string(),
        };
        for m in self.shared.members.lock().unwrap().values_mut() {
            let _ = protocol::send(&mut m.channel, MSG_SESSION_END, &msg);
        }
    }

    fn outcome(&self, reason: Option<Convergence>) -> SessionOutcome {
        SessionOutcome {
            model: self.model.clone(),
            reason,
            rounds: self.records.clone(),
            audit_path: self.audit_path(),
        }
    }
}

fn check_update(
    id: &str,
    round: u64,
    dim: usize,
    declared_examples: u64,
    sub: UpdateSubmit,
) -> Result<ModelUpdate<f64>, &'static str> {
    if sub.client_id != id || sub.round != round || sub.num_examples != declared_examples {
        return Err("invalid-update");
    }
    let params = decode_params(&sub.params).map_err(|_| "invalid-update")?;
    if params.dim() != dim {
        return Err("invalid-update");
    }
    let update = ModelUpdate::new(id, round, params, sub.num_examples).map_err(|_| "invalid-update")?;
    if update.params_hash != sub.params_hash.0 {
        return Err("hash-mismatch");
    }
    Ok(update)
}

fn write_synced(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()
}

/// Measurement a coordinator must present to clients under `policy`.
pub fn coordinator_policy(policy: &PolicyView, trusted_root: VerifyingKey, min_svn: u16) -> AttestationPolicy {
    let m: Measurement = policy.allowed_measurements.coordinator;
    AttestationPolicy::new(trusted_root, [m], min_svn).expect("one measurement")
}
