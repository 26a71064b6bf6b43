//! Session orchestration: the coordinator's round driver, the client agent,
//! provisioning from the policy manager and protected dataset files.

mod client;
mod coordinator;
pub mod demo;
pub mod protocol;

use std::time::Duration;

use ed25519_dalek::VerifyingKey;
use thiserror::Error;

pub use client::{Attack, ClientAgent, ClientError, ClientReport, CommitSeen};
pub use coordinator::{
    coordinator_policy, AdmissionError, Admitter, Coordinator, CoordinatorError, CoordinatorSetup, DroppedClient,
    RoundRecord, SessionOutcome, SubmittedUpdate, CHECKPOINT_FILE, CHECKPOINT_KEY_NAME, COORDINATOR_AUDIT_FILE,
    MAX_QUORUM_FAILURES,
};

use crate::attestation::{AttestationPolicy, Role, Transport};
use crate::config::SessionConfig;
use crate::counter::{CounterClient, CounterError, CounterId, RemoteCounter};
use crate::crypto::{self, Digest};
use crate::policy::{
    AllowedMeasurements, InjectionBundle, InjectionRule, Mechanism, PolicyClient, PolicyDocument, PolicyError,
    RosterEntry, SecretKind, SecretSpec,
};
use crate::shield::{shield_decrypt, shield_encrypt_fresh, Freshness, KeyId, ShieldError, ShieldedFile};
use crate::tee::{measure, Enclave, Measurement, Platform, TeeError};

/// Code and configuration loaded into an enclave for one role.
#[derive(Debug, Clone, Copy)]
pub struct CodeBundle {
    pub name: &'static str,
    pub code: &'static [u8],
    pub config: &'static [u8],
}

impl CodeBundle {
    pub fn measurement(&self) -> Measurement {
        measure(self.code, self.config).expect("built-in bundles are non-empty")
    }

    pub fn spawn(&self, platform: &Platform) -> Result<Enclave, TeeError> {
        platform.spawn_enclave(self.code, self.config)
    }

    pub fn by_name(name: &str) -> Option<CodeBundle> {
        [COORDINATOR_BUNDLE, CLIENT_BUNDLE, MANAGER_BUNDLE]
            .into_iter()
            .find(|b| b.name == name)
    }
}

pub const COORDINATOR_BUNDLE: CodeBundle = CodeBundle {
    name: "coordinator",
    code: include_bytes!("coordinator.rs"),
    config: b"secfl/1 role=coordinator",
};

pub const CLIENT_BUNDLE: CodeBundle = CodeBundle {
    name: "client",
    code: include_bytes!("client.rs"),
    config: b"secfl/1 role=client",
};

pub const MANAGER_BUNDLE: CodeBundle = CodeBundle {
    name: "policy-manager",
    code: include_bytes!("../policy/service.rs"),
    config: b"secfl/1 role=policy-manager",
};

pub fn builtin_measurements() -> AllowedMeasurements {
    AllowedMeasurements {
        coordinator: COORDINATOR_BUNDLE.measurement(),
        client: CLIENT_BUNDLE.measurement(),
        policy_manager_self: MANAGER_BUNDLE.measurement(),
    }
}

/// What a party expects of the policy manager it talks to.
pub fn manager_policy(trusted_root: VerifyingKey, min_svn: u16) -> AttestationPolicy {
    AttestationPolicy::new(trusted_root, [MANAGER_BUNDLE.measurement()], min_svn).expect("one measurement")
}

/// Secret names and environment variables of the standard policy.
pub const DATASET_KEY_NAME: &str = "dataset_key";
pub const DATASET_KEY_ENV: &str = "SECFL_DATASET_KEY";
pub const CHECKPOINT_KEY_ENV: &str = "SECFL_CHECKPOINT_KEY";
pub const SESSION_TOKEN_NAME: &str = "session_token";

/// Per-client training seed for one round.
pub fn train_seed(rng_seed: u64, round: u64, client_id: &str) -> u64 {
    let h = crypto::sha256(&[
        b"secfl-train",
        &rng_seed.to_be_bytes(),
        &round.to_be_bytes(),
        client_id.as_bytes(),
    ]);
    u64::from_be_bytes(h[..8].try_into().unwrap())
}

/// The policy used by the command line and the demo: one dataset key
/// shared by clients and coordinator, a checkpoint key for the coordinator
/// and a session token handed to everyone.
pub fn standard_policy(
    name: &str,
    measurements: AllowedMeasurements,
    roster: Vec<RosterEntry>,
    validation_dataset_hash: Digest,
    session: SessionConfig,
) -> PolicyDocument {
    let secret = |name: &str, kind| SecretSpec {
        name: name.into(),
        kind,
        value: None,
    };
    let rule = |role, mechanism, template: &str, variable: Option<&str>, path: Option<&str>| InjectionRule {
        role,
        mechanism,
        template: template.into(),
        variable: variable.map(Into::into),
        path: path.map(Into::into),
    };
    let key_ref = format!("$${DATASET_KEY_NAME}$$");
    let checkpoint_ref = format!("$${CHECKPOINT_KEY_NAME}$$");
    let token_arg = format!("--session-token=$${SESSION_TOKEN_NAME}$$");
    PolicyDocument {
        name: name.into(),
        allowed_measurements: measurements,
        client_roster: roster,
        validation_dataset_hash,
        session,
        secrets: vec![
            secret(DATASET_KEY_NAME, SecretKind::SymmetricKey256),
            secret(CHECKPOINT_KEY_NAME, SecretKind::SymmetricKey256),
            secret(SESSION_TOKEN_NAME, SecretKind::RandomHex(16)),
        ],
        injection: vec![
            rule(Role::Client, Mechanism::EnvironmentVariable, &key_ref, Some(DATASET_KEY_ENV), None),
            rule(Role::Client, Mechanism::Argument, &token_arg, None, None),
            rule(Role::Coordinator, Mechanism::EnvironmentVariable, &key_ref, Some(DATASET_KEY_ENV), None),
            rule(Role::Coordinator, Mechanism::EnvironmentVariable, &checkpoint_ref, Some(CHECKPOINT_KEY_ENV), None),
            rule(Role::Coordinator, Mechanism::Argument, &token_arg, None, None),
        ],
    }
}

#[derive(Debug, Error)]
pub enum DeployError {
    #[error("policy manager: {0}")]
    Policy(#[from] PolicyError),
    #[error("counter service: {0}")]
    Counter(#[from] CounterError),
    #[error("protected file: {0}")]
    Shield(#[from] ShieldError),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Connects to the policy manager as `role`, fetches the injection bundle
/// for `policy_hash` and keeps the channel open for counter requests.
pub fn provision<T: Transport>(
    transport: T,
    enclave: &Enclave,
    role: Role,
    manager: AttestationPolicy,
    policy_hash: &Digest,
) -> Result<(InjectionBundle, RemoteCounter<T>), DeployError> {
    let mut pc = PolicyClient::connect(transport, enclave, role, manager)?;
    let bundle = pc.request_secrets(policy_hash, role)?;
    let counter = RemoteCounter::connect(pc.into_channel())?;
    Ok((bundle, counter))
}

pub const COUNTER_TIMEOUT: Duration = Duration::from_secs(30);

/// Encrypts a dataset under the dataset key. A new counter is created when
/// `counter_id` is `None`; otherwise the existing one is advanced, which
/// invalidates every earlier version of the file.
pub fn encrypt_dataset(
    plaintext: &[u8],
    key: &[u8; 32],
    counter: &dyn CounterClient,
    counter_id: Option<CounterId>,
) -> Result<(ShieldedFile, CounterId), DeployError> {
    let id = match counter_id {
        Some(id) => id,
        None => counter.create_counter()?,
    };
    let file = shield_encrypt_fresh(plaintext, key, KeyId::for_secret(DATASET_KEY_NAME), counter, id, COUNTER_TIMEOUT)?;
    Ok((file, id))
}

pub fn decrypt_dataset(bytes: &[u8], key: &[u8; 32], counter: &dyn CounterClient) -> Result<Vec<u8>, DeployError> {
    let file = ShieldedFile::from_bytes(bytes)?;
    if file.header.key_id != KeyId::for_secret(DATASET_KEY_NAME) {
        return Err(ShieldError::KeyResolution(file.header.key_id).into());
    }
    Ok(shield_decrypt(&file, key, &Fresh(counter))?)
}

struct Fresh<'a>(&'a dyn CounterClient);

impl Freshness for Fresh<'_> {
    fn stable_value(&self, id: CounterId) -> Result<u64, ShieldError> {
        Freshness::stable_value(self.0, id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundles_have_distinct_measurements() {
        let m = builtin_measurements();
        assert_ne!(m.client, m.coordinator);
        assert_ne!(m.client, m.policy_manager_self);
        assert_eq!(CodeBundle::by_name("client").unwrap().measurement(), m.client);
        assert!(CodeBundle::by_name("nope").is_none());
    }

    #[test]
    fn standard_policy_validates() {
        let doc = standard_policy(
            "s",
            builtin_measurements(),
            vec![
                RosterEntry { id: "a".into(), dataset_hash: Digest([1; 32]) },
                RosterEntry { id: "b".into(), dataset_hash: Digest([2; 32]) },
            ],
            Digest([3; 32]),
            SessionConfig::default(),
        );
        doc.validate().unwrap();
    }

    #[test]
    fn train_seeds_differ_by_client_and_round() {
        assert_ne!(train_seed(1, 1, "a"), train_seed(1, 1, "b"));
        assert_ne!(train_seed(1, 1, "a"), train_seed(1, 2, "a"));
        assert_eq!(train_seed(1, 1, "a"), train_seed(1, 1, "a"));
    }
}
