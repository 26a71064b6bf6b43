use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;

use ed25519_dalek::VerifyingKey;
use serde::Deserialize;
use serde_json::json;

use super::{
    render_template, InjectionBundle, Mechanism, Policy, PolicyError, SecretKind, MSG_GENERATE, MSG_REQUEST_SECRETS,
    MSG_UPLOAD_POLICY,
};
use crate::attestation::{
    attested_handshake, AttestationPolicy, AttestationVerdict, ChannelError, HandshakeConfig, HandshakeError,
    PeerCheck, PeerEvidence, Rejection, Role, Side, TcpTransport, Transport, MSG_ERROR,
};
use crate::audit::AuditLog;
use crate::canonical;
use crate::counter::{serve_counter_request, CounterService};
use crate::crypto::{self, Digest};
use crate::tee::{Enclave, SealedBlob};

pub const MANAGER_AUDIT_FILE: &str = "audit.log";
const GENERATED_MARKER: &str = "GENERATED";

#[derive(Default)]
struct Store {
    policies: BTreeMap<Digest, Policy>,
    names: BTreeMap<String, Digest>,
    generated: BTreeSet<Digest>,
}

/// The policy manager, hosted in its own enclave.
///
/// Policies and secrets are persisted only as blobs sealed to the manager's
/// enclave: `policies/<hash>.pol`, `secrets/<hash>/<name>.sealed`. Events go
/// to a hash-chained `audit.log`. Uploads and generation are serialized;
/// secret requests run concurrently.
pub struct PolicyManager {
    enclave: Enclave,
    trusted_root: VerifyingKey,
    min_svn: u16,
    dir: PathBuf,
    store: RwLock<Store>,
    audit: Mutex<AuditLog>,
    counters: Option<Arc<CounterService>>,
}

fn storage<E: std::fmt::Display>(e: E) -> PolicyError {
    PolicyError::Storage(e.to_string())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PolicyError> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(storage)?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(storage)?;
    std::fs::rename(&tmp, path).map_err(storage)
}

impl PolicyManager {
    /// Opens the store under `dir`, loading every previously uploaded policy.
    /// Quotes are verified against `trusted_root` with `min_svn`.
    pub fn open(enclave: Enclave, dir: &Path, trusted_root: VerifyingKey, min_svn: u16) -> Result<Self, PolicyError> {
        std::fs::create_dir_all(dir.join("policies")).map_err(storage)?;
        std::fs::create_dir_all(dir.join("secrets")).map_err(storage)?;
        let audit = AuditLog::open(&dir.join(MANAGER_AUDIT_FILE)).map_err(storage)?;
        let mut store = Store::default();
        for entry in std::fs::read_dir(dir.join("policies")).map_err(storage)? {
            let path = entry.map_err(storage)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("pol") {
                continue;
            }
            let blob = SealedBlob::from_bytes(&std::fs::read(&path).map_err(storage)?).map_err(storage)?;
            let policy = Policy::parse(&enclave.unseal(&blob).map_err(storage)?)?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            if stem != policy.policy_hash.to_string() {
                return Err(PolicyError::Storage(format!("{} does not match its content", path.display())));
            }
            if dir.join("secrets").join(stem).join(GENERATED_MARKER).exists() {
                store.generated.insert(policy.policy_hash);
            }
            store.names.insert(policy.document.name.clone(), policy.policy_hash);
            store.policies.insert(policy.policy_hash, policy);
        }
        Ok(Self {
            enclave,
            trusted_root,
            min_svn,
            dir: dir.to_path_buf(),
            store: RwLock::new(store),
            audit: Mutex::new(audit),
            counters: None,
        })
    }

    /// Also answers counter requests on the same channels.
    pub fn with_counter_service(mut self, counters: Arc<CounterService>) -> Self {
        self.counters = Some(counters);
        self
    }

    pub fn enclave(&self) -> &Enclave {
        &self.enclave
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn policy(&self, hash: &Digest) -> Option<Policy> {
        self.store.read().unwrap().policies.get(hash).cloned()
    }

    fn record(&self, audit: &mut AuditLog, kind: &str, payload: serde_json::Value) -> Result<(), PolicyError> {
        audit.append(kind, payload).map(|_| ()).map_err(storage)
    }

    /// Stores `source` and returns its hash. Identical re-uploads are no-ops.
    pub fn upload_policy(&self, source: &[u8]) -> Result<Digest, PolicyError> {
        let policy = Policy::parse(source)?;
        let hash = policy.policy_hash;
        let mut audit = self.audit.lock().unwrap();
        {
            let store = self.store.read().unwrap();
            if store.policies.contains_key(&hash) {
                return Ok(hash);
            }
            if store.names.contains_key(&policy.document.name) {
                return Err(PolicyError::PolicyConflict(policy.document.name.clone()));
            }
        }
        let blob = self.enclave.seal(&policy.canonical_bytes());
        write_atomic(&self.dir.join("policies").join(format!("{hash}.pol")), &blob.to_bytes())?;
        self.record(&mut audit, "policy-uploaded", json!({ "name": policy.document.name, "policy_hash": hash }))?;
        let mut store = self.store.write().unwrap();
        store.names.insert(policy.document.name.clone(), hash);
        store.policies.insert(hash, policy);
        Ok(hash)
    }

    /// Materializes every declared secret, sealed to the manager's enclave.
    pub fn generate_secrets(&self, hash: &Digest) -> Result<(), PolicyError> {
        let mut audit = self.audit.lock().unwrap();
        let policy = {
            let store = self.store.read().unwrap();
            if store.generated.contains(hash) {
                return Err(PolicyError::AlreadyGenerated(*hash));
            }
            store.policies.get(hash).cloned().ok_or(PolicyError::NotFound(*hash))?
        };
        let dir = self.dir.join("secrets").join(hash.to_string());
        std::fs::create_dir_all(&dir).map_err(storage)?;
        for spec in &policy.document.secrets {
            let value = match spec.kind {
                SecretKind::SymmetricKey256 => hex::encode(crypto::random_array::<32>()),
                SecretKind::RandomHex(n) => hex::encode(crypto::random_vec(n)),
                SecretKind::ProvidedValue => spec.value.clone().unwrap_or_default(),
            };
            let blob = self.enclave.seal(value.as_bytes());
            write_atomic(&dir.join(format!("{}.sealed", spec.name)), &blob.to_bytes())?;
        }
        write_atomic(&dir.join(GENERATED_MARKER), b"")?;
        let names: Vec<&str> = policy.document.secrets.iter().map(|s| s.name.as_str()).collect();
        self.record(&mut audit, "secrets-generated", json!({ "policy_hash": hash, "secrets": names }))?;
        self.store.write().unwrap().generated.insert(*hash);
        Ok(())
    }

    fn load_secrets(&self, hash: &Digest, policy: &Policy) -> Result<BTreeMap<String, String>, PolicyError> {
        let dir = self.dir.join("secrets").join(hash.to_string());
        policy
            .document
            .secrets
            .iter()
            .map(|s| {
                let bytes = std::fs::read(dir.join(format!("{}.sealed", s.name))).map_err(storage)?;
                let blob = SealedBlob::from_bytes(&bytes).map_err(storage)?;
                let value = self.enclave.unseal(&blob).map_err(storage)?;
                Ok((s.name.clone(), String::from_utf8(value).map_err(storage)?))
            })
            .collect()
    }

    /// Releases the secrets and configuration injected into `role`, provided
    /// the peer's evidence matches the policy's measurement for that role.
    pub fn request_secrets(&self, peer: &PeerEvidence, hash: &Digest, role: &str) -> Result<InjectionBundle, PolicyError> {
        let role = match role.parse::<Role>() {
            Ok(r @ (Role::Client | Role::Coordinator)) => r,
            _ => return Err(PolicyError::RoleUnknown(role.to_string())),
        };
        let policy = {
            let store = self.store.read().unwrap();
            let p = store.policies.get(hash).cloned().ok_or(PolicyError::NotFound(*hash))?;
            if !store.generated.contains(hash) {
                return Err(PolicyError::NotGenerated(*hash));
            }
            p
        };
        let expected = policy.document.allowed_measurements.for_role(role);
        let verdict = if peer.role != role {
            AttestationVerdict::Rejected(Rejection::BindingMismatch)
        } else {
            let ap = AttestationPolicy::new(self.trusted_root, [expected], self.min_svn).expect("one measurement");
            peer.verify(&ap).unwrap_or(AttestationVerdict::Rejected(Rejection::NoEvidence))
        };
        let identity = match verdict {
            AttestationVerdict::Accepted(id) => id,
            AttestationVerdict::Rejected(r) => {
                let mut audit = self.audit.lock().unwrap();
                self.record(
                    &mut audit,
                    "secrets-denied",
                    json!({ "policy_hash": hash, "role": role, "reason": r.to_string() }),
                )?;
                return Err(PolicyError::AccessDenied(r));
            }
        };

        let secrets = self.load_secrets(hash, &policy)?;
        let mut bundle = InjectionBundle {
            role,
            policy: policy.view(),
            arguments: Vec::new(),
            environment: BTreeMap::new(),
            files: BTreeMap::new(),
        };
        for rule in policy.document.injection.iter().filter(|r| r.role == role) {
            let text = render_template(&rule.template, &secrets)?;
            match rule.mechanism {
                Mechanism::Argument => bundle.arguments.push(text),
                Mechanism::EnvironmentVariable => {
                    bundle.environment.insert(rule.variable.clone().unwrap_or_default(), text);
                }
                Mechanism::FileTemplate => {
                    bundle.files.insert(rule.path.clone().unwrap_or_default(), text);
                }
            }
        }
        let mut audit = self.audit.lock().unwrap();
        self.record(
            &mut audit,
            "secrets-released",
            json!({ "policy_hash": hash, "role": role, "measurement": identity.measurement }),
        )?;
        Ok(bundle)
    }

    /// Answers one request received over an established channel.
    pub fn handle(&self, peer: &PeerEvidence, msg_type: u8, body: &[u8]) -> (u8, Vec<u8>) {
        #[derive(Deserialize)]
        struct Generate {
            policy_hash: Digest,
        }
        #[derive(Deserialize)]
        struct Request {
            policy_hash: Digest,
            role: String,
        }
        let protocol = |e: serde_json::Error| PolicyError::Protocol(e.to_string());
        let result = match msg_type {
            MSG_UPLOAD_POLICY => self
                .upload_policy(body)
                .map(|h| canonical::to_bytes(&json!({ "policy_hash": h })).expect("JSON value")),
            MSG_GENERATE => canonical::from_slice::<Generate>(body)
                .map_err(protocol)
                .and_then(|g| self.generate_secrets(&g.policy_hash).map(|_| g.policy_hash))
                .map(|h| canonical::to_bytes(&json!({ "policy_hash": h })).expect("JSON value")),
            MSG_REQUEST_SECRETS => canonical::from_slice::<Request>(body)
                .map_err(protocol)
                .and_then(|r| self.request_secrets(peer, &r.policy_hash, &r.role))
                .map(|b| canonical::to_bytes(&b).expect("bundles serialize")),
            other => {
                if let Some(reply) = self.counters.as_ref().and_then(|c| serve_counter_request(c, other, body)) {
                    return reply;
                }
                Err(PolicyError::Protocol(format!("unknown request type {other}")))
            }
        };
        match result {
            Ok(reply) => (msg_type, reply),
            Err(e) => {
                log::info!("policy request {msg_type} failed: {e}");
                (MSG_ERROR, e.to_wire())
            }
        }
    }

    /// Runs the responder handshake on `transport` and serves requests until
    /// the peer disconnects.
    pub fn serve<T: Transport>(&self, transport: T) -> Result<(), HandshakeError> {
        let mut ch = attested_handshake(
            transport,
            HandshakeConfig {
                side: Side::Responder,
                role: Role::PolicyManager,
                attester: &self.enclave,
                peer_check: PeerCheck::Defer,
            },
        )?;
        let peer = ch.peer_evidence().clone();
        loop {
            match ch.recv_msg() {
                Ok((ty, body)) => {
                    let (rt, reply) = self.handle(&peer, ty, &body);
                    if ch.send_msg(rt, &reply).is_err() {
                        break;
                    }
                }
                Err(ChannelError::Closed | ChannelError::Transport(_)) => break,
                Err(e) => {
                    log::warn!("policy manager: dropping connection: {e}");
                    break;
                }
            }
        }
        Ok(())
    }

    /// Accepts connections forever, one thread each.
    pub fn serve_listener(self: Arc<Self>, listener: TcpListener) -> std::io::Result<()> {
        for stream in listener.incoming() {
            let stream = stream?;
            let me = self.clone();
            thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = me.serve(TcpTransport::new(stream)) {
                    log::warn!("handshake with {peer:?} failed: {e}");
                }
            });
        }
        Ok(())
    }
}
