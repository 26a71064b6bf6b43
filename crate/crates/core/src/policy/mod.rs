//! Pre-agreed session policies and the secrets they declare.
//!
//! A policy is written as JSON in any key order. Its identity is the SHA-256
//! of the canonical encoding of the validated document, so reordering keys
//! never changes the hash.

mod client;
mod service;
mod template;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::json;
use thiserror::Error;

use crate::attestation::{Rejection, Role};
use crate::canonical;
use crate::config::SessionConfig;
use crate::crypto::{self, Digest};
use crate::tee::Measurement;

pub use client::PolicyClient;
pub use service::{PolicyManager, MANAGER_AUDIT_FILE};
pub use template::{is_secret_name, render_template, template_tokens};

pub const MSG_UPLOAD_POLICY: u8 = 10;
pub const MSG_GENERATE: u8 = 11;
pub const MSG_REQUEST_SECRETS: u8 = 12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("policy invalid: {0}")]
    PolicyInvalid(String),
    #[error("policy conflict: a different policy named {0:?} exists")]
    PolicyConflict(String),
    #[error("secrets already generated for policy {0}")]
    AlreadyGenerated(Digest),
    #[error("no policy {0}")]
    NotFound(Digest),
    #[error("secrets not yet generated for policy {0}")]
    NotGenerated(Digest),
    #[error("access denied: {0}")]
    AccessDenied(Rejection),
    #[error("role unknown: {0}")]
    RoleUnknown(String),
    #[error("template error: unresolved token $${0}$$")]
    TemplateError(String),
    #[error("policy storage: {0}")]
    Storage(String),
    #[error("policy manager unreachable: {0}")]
    Unavailable(String),
    #[error("malformed policy message: {0}")]
    Protocol(String),
}

impl PolicyError {
    pub fn code(&self) -> &'static str {
        match self {
            PolicyError::PolicyInvalid(_) => "policy-invalid",
            PolicyError::PolicyConflict(_) => "policy-conflict",
            PolicyError::AlreadyGenerated(_) => "already-generated",
            PolicyError::NotFound(_) => "not-found",
            PolicyError::NotGenerated(_) => "not-generated",
            PolicyError::AccessDenied(_) => "access-denied",
            PolicyError::RoleUnknown(_) => "role-unknown",
            PolicyError::TemplateError(_) => "template-error",
            PolicyError::Storage(_) => "storage",
            PolicyError::Unavailable(_) => "unavailable",
            PolicyError::Protocol(_) => "protocol",
        }
    }

    /// Error reply body: `{"error": code, "detail": text}`.
    pub(crate) fn to_wire(&self) -> Vec<u8> {
        let detail = match self {
            PolicyError::PolicyInvalid(s)
            | PolicyError::PolicyConflict(s)
            | PolicyError::RoleUnknown(s)
            | PolicyError::TemplateError(s)
            | PolicyError::Storage(s)
            | PolicyError::Unavailable(s)
            | PolicyError::Protocol(s) => s.clone(),
            PolicyError::AlreadyGenerated(d) | PolicyError::NotFound(d) | PolicyError::NotGenerated(d) => d.to_string(),
            PolicyError::AccessDenied(r) => r.to_string(),
        };
        canonical::to_bytes(&json!({ "error": self.code(), "detail": detail })).expect("JSON value")
    }

    pub(crate) fn from_wire(body: &[u8]) -> Self {
        #[derive(Deserialize)]
        struct Wire {
            error: String,
            detail: String,
        }
        let Ok(w) = serde_json::from_slice::<Wire>(body) else {
            return PolicyError::Protocol(String::from_utf8_lossy(body).into_owned());
        };
        let digest = || w.detail.parse::<Digest>().unwrap_or_default();
        match w.error.as_str() {
            "policy-invalid" => PolicyError::PolicyInvalid(w.detail),
            "policy-conflict" => PolicyError::PolicyConflict(w.detail),
            "already-generated" => PolicyError::AlreadyGenerated(digest()),
            "not-found" => PolicyError::NotFound(digest()),
            "not-generated" => PolicyError::NotGenerated(digest()),
            "access-denied" => match serde_json::from_value::<Rejection>(json!(w.detail)) {
                Ok(r) => PolicyError::AccessDenied(r),
                Err(_) => PolicyError::Protocol(format!("unknown rejection {}", w.detail)),
            },
            "role-unknown" => PolicyError::RoleUnknown(w.detail),
            "template-error" => PolicyError::TemplateError(w.detail),
            "storage" => PolicyError::Storage(w.detail),
            "unavailable" => PolicyError::Unavailable(w.detail),
            _ => PolicyError::Protocol(w.detail),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecretKind {
    SymmetricKey256,
    /// `N` random bytes, hex encoded.
    RandomHex(usize),
    ProvidedValue,
}

impl fmt::Display for SecretKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SecretKind::SymmetricKey256 => f.write_str("symmetric-key-256"),
            SecretKind::RandomHex(n) => write!(f, "random-hex-{n}"),
            SecretKind::ProvidedValue => f.write_str("provided-value"),
        }
    }
}

impl FromStr for SecretKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "symmetric-key-256" => Ok(SecretKind::SymmetricKey256),
            "provided-value" => Ok(SecretKind::ProvidedValue),
            _ => s
                .strip_prefix("random-hex-")
                .filter(|n| n.bytes().all(|b| b.is_ascii_digit()) && !n.starts_with('0'))
                .and_then(|n| n.parse::<usize>().ok())
                .map(SecretKind::RandomHex)
                .ok_or_else(|| format!("unknown secret kind {s:?}")),
        }
    }
}

impl Serialize for SecretKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SecretKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecretSpec {
    pub name: String,
    pub kind: SecretKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    Argument,
    EnvironmentVariable,
    FileTemplate,
}

/// Delivers `template`, with secret tokens substituted, to computations of
/// `role` as a command-line argument, an environment variable named
/// `variable`, or a file at `path`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionRule {
    pub role: Role,
    pub mechanism: Mechanism,
    pub template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variable: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllowedMeasurements {
    pub coordinator: Measurement,
    pub client: Measurement,
    pub policy_manager_self: Measurement,
}

impl AllowedMeasurements {
    pub fn for_role(&self, role: Role) -> Measurement {
        match role {
            Role::Client => self.client,
            Role::Coordinator => self.coordinator,
            Role::PolicyManager => self.policy_manager_self,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RosterEntry {
    pub id: String,
    /// SHA-256 of the client's plaintext dataset file.
    pub dataset_hash: Digest,
}

/// The agreed document, as uploaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDocument {
    pub name: String,
    pub allowed_measurements: AllowedMeasurements,
    pub client_roster: Vec<RosterEntry>,
    pub validation_dataset_hash: Digest,
    pub session: SessionConfig,
    pub secrets: Vec<SecretSpec>,
    pub injection: Vec<InjectionRule>,
}

impl PolicyDocument {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let invalid = |m: String| Err(PolicyError::PolicyInvalid(m));
        if self.name.trim().is_empty() {
            return invalid("name is empty".into());
        }
        if self.client_roster.is_empty() {
            return invalid("client roster is empty".into());
        }
        let mut ids = BTreeSet::new();
        for c in &self.client_roster {
            if c.id.is_empty() || c.id.len() > 128 || c.id.chars().any(|ch| ch.is_control()) {
                return invalid(format!("bad client id {:?}", c.id));
            }
            if !ids.insert(&c.id) {
                return invalid(format!("client {:?} listed twice", c.id));
            }
        }
        self.session
            .validate(self.client_roster.len())
            .map_err(|e| PolicyError::PolicyInvalid(e.to_string()))?;

        let mut names = BTreeSet::new();
        for s in &self.secrets {
            if !is_secret_name(&s.name) {
                return invalid(format!("bad secret name {:?}", s.name));
            }
            if !names.insert(s.name.as_str()) {
                return invalid(format!("secret {:?} declared twice", s.name));
            }
            match (s.kind, &s.value) {
                (SecretKind::ProvidedValue, None) => return invalid(format!("secret {:?} needs a value", s.name)),
                (SecretKind::ProvidedValue, Some(_)) => {}
                (_, Some(_)) => return invalid(format!("secret {:?} is generated and must not carry a value", s.name)),
                (_, None) => {}
            }
        }

        for (i, r) in self.injection.iter().enumerate() {
            if r.role == Role::PolicyManager {
                return invalid(format!("injection rule {i} targets the policy manager"));
            }
            let ok = match r.mechanism {
                Mechanism::Argument => r.variable.is_none() && r.path.is_none(),
                Mechanism::EnvironmentVariable => {
                    r.path.is_none() && r.variable.as_deref().is_some_and(|v| !v.is_empty() && !v.contains(['=', '\0']))
                }
                Mechanism::FileTemplate => {
                    r.variable.is_none() && r.path.as_deref().is_some_and(|p| !p.is_empty() && !p.contains('\0'))
                }
            };
            if !ok {
                return invalid(format!("injection rule {i} has fields that do not fit mechanism {:?}", r.mechanism));
            }
            for t in template_tokens(&r.template) {
                if !names.contains(t) {
                    return invalid(format!("injection rule {i} references undeclared secret {t:?}"));
                }
            }
        }
        Ok(())
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical::to_bytes(self).expect("policy documents serialize")
    }
}

/// A validated document together with its hash.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub document: PolicyDocument,
    pub policy_hash: Digest,
}

impl Policy {
    pub fn from_document(document: PolicyDocument) -> Result<Self, PolicyError> {
        document.validate()?;
        let policy_hash = Digest::of(&document.canonical_bytes());
        Ok(Self { document, policy_hash })
    }

    /// Parses policy source text; key order and whitespace are irrelevant.
    pub fn parse(source: &[u8]) -> Result<Self, PolicyError> {
        let document: PolicyDocument =
            serde_json::from_slice(source).map_err(|e| PolicyError::PolicyInvalid(e.to_string()))?;
        Self::from_document(document)
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        self.document.canonical_bytes()
    }

    pub fn view(&self) -> PolicyView {
        let d = &self.document;
        PolicyView {
            name: d.name.clone(),
            policy_hash: self.policy_hash,
            allowed_measurements: d.allowed_measurements.clone(),
            client_roster: d.client_roster.clone(),
            validation_dataset_hash: d.validation_dataset_hash,
            session: d.session.clone(),
        }
    }
}

/// The non-secret part of a policy, as handed to attested computations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyView {
    pub name: String,
    pub policy_hash: Digest,
    pub allowed_measurements: AllowedMeasurements,
    pub client_roster: Vec<RosterEntry>,
    pub validation_dataset_hash: Digest,
    pub session: SessionConfig,
}

impl PolicyView {
    pub fn roster_hash(&self, client_id: &str) -> Option<Digest> {
        self.client_roster
            .iter()
            .find(|c| c.id == client_id)
            .map(|c| c.dataset_hash)
    }
}

/// Rendered secrets and configuration for one role.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionBundle {
    pub role: Role,
    pub policy: PolicyView,
    pub arguments: Vec<String>,
    pub environment: BTreeMap<String, String>,
    pub files: BTreeMap<String, String>,
}

impl fmt::Debug for InjectionBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InjectionBundle")
            .field("role", &self.role)
            .field("policy", &self.policy.policy_hash)
            .field("arguments", &self.arguments.len())
            .field("environment", &self.environment.keys().collect::<Vec<_>>())
            .field("files", &self.files.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl InjectionBundle {
    pub fn env(&self, name: &str) -> Option<&str> {
        self.environment.get(name).map(String::as_str)
    }

    /// A 32-byte key delivered as hex in environment variable `name`.
    pub fn key_from_env(&self, name: &str) -> Result<[u8; 32], PolicyError> {
        let v = self
            .env(name)
            .ok_or_else(|| PolicyError::Protocol(format!("bundle has no variable {name}")))?;
        crypto::hex_array(v).map_err(|e| PolicyError::Protocol(format!("{name}: {e}")))
    }
}
