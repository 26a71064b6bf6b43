#![allow(dead_code)]

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use ed25519_dalek::SigningKey;
use secfl::attestation::{
    AttestationPolicy, Attester, MemoryTransport, Role, Transport, Unattested,
};
use secfl::counter::wal::MemWal;
use secfl::counter::{CounterClient, CounterId, CounterService, RemoteCounter, Stabilization};
use secfl::crypto::Digest;
use secfl::fl::{gaussian_classes, Dataset};
use secfl::orchestrator::demo::{client_id, DynTransport};
use secfl::orchestrator::{
    builtin_measurements, coordinator_policy, manager_policy, provision, standard_policy, Attack, ClientAgent,
    ClientReport, CoordinatorSetup, CHECKPOINT_KEY_ENV, CLIENT_BUNDLE, COORDINATOR_BUNDLE, DATASET_KEY_ENV,
    MANAGER_BUNDLE,
};
use secfl::policy::{InjectionBundle, PolicyClient, PolicyManager, PolicyView, RosterEntry};
use secfl::tee::{EnclaveIdentity, Platform, Quote, REPORT_DATA_LEN};
use secfl::SessionConfig;

/// A policy manager with an uploaded, generated standard policy.
pub struct World {
    pub root: Platform,
    pub manager: Arc<PolicyManager>,
    pub policy_hash: Digest,
    pub datasets: Vec<(String, Vec<u8>)>,
    pub validation_csv: Vec<u8>,
    pub session: SessionConfig,
}

impl World {
    pub fn new(dir: &Path, clients: usize, rows: usize, session: SessionConfig) -> Self {
        let root = Platform::generate();
        let enclave = MANAGER_BUNDLE.spawn(&Platform::with_root(root.root_signing_key().clone())).unwrap();
        let counters = CounterService::open(&enclave, Box::new(MemWal::new()), Stabilization::Background).unwrap();
        let manager = PolicyManager::open(enclave, &dir.join("manager"), root.root_public(), 0)
            .unwrap()
            .with_counter_service(Arc::new(counters));
        let datasets: Vec<(String, Vec<u8>)> = (0..clients)
            .map(|i| {
                let d: Dataset<f64> = gaussian_classes(rows, 4, 1.0, 100 + i as u64);
                (client_id(i), d.to_csv_bytes())
            })
            .collect();
        let validation_csv = gaussian_classes::<f64>(100, 4, 1.0, 99).to_csv_bytes();
        let roster = datasets
            .iter()
            .map(|(id, csv)| RosterEntry {
                id: id.clone(),
                dataset_hash: Digest::of(csv),
            })
            .collect();
        let doc = standard_policy("t", builtin_measurements(), roster, Digest::of(&validation_csv), session.clone());
        let mut w = World {
            root,
            manager: Arc::new(manager),
            policy_hash: Digest([0; 32]),
            datasets,
            validation_csv,
            session,
        };
        let mut op = PolicyClient::connect(w.manager_link(), &Unattested, Role::Client, w.manager_policy()).unwrap();
        w.policy_hash = op.upload_policy(&doc.canonical_bytes()).unwrap();
        op.generate_secrets(&w.policy_hash).unwrap();
        w
    }

    pub fn party(&self) -> Platform {
        Platform::with_root(self.root.root_signing_key().clone())
    }

    pub fn manager_policy(&self) -> AttestationPolicy {
        manager_policy(self.root.root_public(), 0)
    }

    pub fn manager_link(&self) -> MemoryTransport {
        let (near, far) = MemoryTransport::pair();
        let m = self.manager.clone();
        thread::spawn(move || {
            let _ = m.serve(far);
        });
        near
    }

    pub fn view(&self) -> PolicyView {
        self.manager.policy(&self.policy_hash).unwrap().view()
    }

    pub fn coordinator_attestation(&self) -> AttestationPolicy {
        coordinator_policy(&self.view(), self.root.root_public(), 0)
    }

    /// Provisions a freshly spawned coordinator enclave. Creates the
    /// checkpoint counter unless one is given.
    pub fn coordinator_setup(&self, state_dir: &Path, checkpoint_counter: Option<CounterId>) -> (CoordinatorSetup, CounterId) {
        let enclave = COORDINATOR_BUNDLE.spawn(&self.party()).unwrap();
        let (bundle, counter) = provision(self.manager_link(), &enclave, Role::Coordinator, self.manager_policy(), &self.policy_hash).unwrap();
        let id = checkpoint_counter.unwrap_or_else(|| counter.create_counter().unwrap());
        let setup = CoordinatorSetup {
            enclave,
            trusted_root: self.root.root_public(),
            min_svn: 0,
            policy: bundle.policy.clone(),
            validation_csv: self.validation_csv.clone(),
            checkpoint_key: bundle.key_from_env(CHECKPOINT_KEY_ENV).unwrap(),
            counter: Arc::new(counter),
            checkpoint_counter: id,
            state_dir: state_dir.to_path_buf(),
            round_deadline: Duration::from_secs(10),
            join_timeout: Duration::from_secs(10),
            clock: Some(Box::new(|| 0)),
        };
        (setup, id)
    }

    pub fn client_bundle(&self) -> (InjectionBundle, RemoteCounter<MemoryTransport>) {
        let enclave = CLIENT_BUNDLE.spawn(&self.party()).unwrap();
        provision(self.manager_link(), &enclave, Role::Client, self.manager_policy(), &self.policy_hash).unwrap()
    }

    /// Runs client `i` on `link` in a thread. `data` overrides its dataset.
    pub fn spawn_client(
        &self,
        i: usize,
        link: DynTransport,
        attack: Option<Attack>,
        data: Option<Vec<u8>>,
    ) -> JoinHandle<Result<ClientReport, String>> {
        let enclave = CLIENT_BUNDLE.spawn(&self.party()).unwrap();
        self.spawn_agent(i, link, Box::new(enclave), attack, data)
    }

    pub fn spawn_agent(
        &self,
        i: usize,
        link: DynTransport,
        attester: Box<dyn Attester>,
        attack: Option<Attack>,
        data: Option<Vec<u8>>,
    ) -> JoinHandle<Result<ClientReport, String>> {
        let (id, csv) = self.datasets[i].clone();
        let csv = data.unwrap_or(csv);
        let coordinator = self.coordinator_attestation();
        let session = self.session.clone();
        thread::spawn(move || {
            let dataset = Dataset::from_csv_bytes(&csv).map_err(|e| e.to_string())?;
            ClientAgent {
                client_id: id,
                attester: attester.as_ref(),
                coordinator,
                data: &dataset,
                dataset_hash: Digest::of(&csv),
                session,
                attack,
                recv_timeout: Some(Duration::from_secs(20)),
            }
            .run(link)
            .map_err(|e| e.to_string())
        })
    }
}

pub fn boxed<T: Transport + 'static>(t: T) -> DynTransport {
    Box::new(t)
}

pub fn dataset_key(bundle: &InjectionBundle) -> [u8; 32] {
    bundle.key_from_env(DATASET_KEY_ENV).unwrap()
}

/// Evidence with a chosen signer, identity and nonce, for negative tests.
pub struct ForgedQuote {
    pub key: SigningKey,
    pub identity: EnclaveIdentity,
    /// Sign this nonce instead of the one the verifier issued.
    pub replayed_nonce: Option<[u8; 32]>,
}

impl Attester for ForgedQuote {
    fn attest(&self, report_data: &[u8; REPORT_DATA_LEN], nonce: [u8; 32]) -> Option<Vec<u8>> {
        let nonce = self.replayed_nonce.unwrap_or(nonce);
        Some(Quote::sign(&self.key, self.identity, *report_data, nonce).to_bytes())
    }
}

/// Every `WINDOW`-byte window of the needles, for substring scans of large
/// haystacks. A needle shorter than the window is kept whole and checked
/// directly.
pub const WINDOW: usize = 16;

pub struct NeedleSet {
    windows: HashSet<[u8; WINDOW]>,
    short: Vec<Vec<u8>>,
}

impl NeedleSet {
    pub fn new<'a>(needles: impl IntoIterator<Item = &'a [u8]>) -> Self {
        let mut windows = HashSet::new();
        let mut short = Vec::new();
        for n in needles {
            if n.len() < WINDOW {
                if !n.is_empty() {
                    short.push(n.to_vec());
                }
                continue;
            }
            // Non-overlapping windows plus the tail: any occurrence of the
            // needle contains all of them.
            let mut i = 0;
            while i + WINDOW <= n.len() {
                windows.insert(n[i..i + WINDOW].try_into().unwrap());
                i += WINDOW;
            }
            windows.insert(n[n.len() - WINDOW..].try_into().unwrap());
        }
        Self { windows, short }
    }

    pub fn len(&self) -> usize {
        self.windows.len() + self.short.len()
    }

    /// Offset of the first window found in `haystack`.
    pub fn find_in(&self, haystack: &[u8]) -> Option<usize> {
        if let Some(p) = haystack
            .windows(WINDOW)
            .position(|w| self.windows.contains(<&[u8; WINDOW]>::try_from(w).unwrap()))
        {
            return Some(p);
        }
        self.short
            .iter()
            .find_map(|n| haystack.windows(n.len()).position(|w| w == n.as_slice()))
    }
}

/// Every regular file under `dir`, recursively.
pub fn files_under(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}
