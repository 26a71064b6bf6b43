//! A complete session in one process: policy manager, coordinator and
//! clients on separate simulated platforms, joined by in-memory links.
//!
//! Only protected files are written to disk. Plaintext datasets exist in
//! memory, standing in for what each data owner holds on premises.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use thiserror::Error;

use super::{
    builtin_measurements, coordinator_policy, decrypt_dataset, encrypt_dataset, manager_policy, provision,
    standard_policy, Attack, ClientAgent, ClientReport, Coordinator, CoordinatorError, CoordinatorSetup, DeployError,
    SessionOutcome, CHECKPOINT_KEY_ENV, CLIENT_BUNDLE, COORDINATOR_BUNDLE, DATASET_KEY_ENV, MANAGER_BUNDLE,
};
use crate::attestation::{MemoryTransport, Role, Tapped, Transport, Unattested, WireCapture};
use crate::config::SessionConfig;
use crate::counter::wal::FileWal;
use crate::counter::{CounterClient, CounterService, Stabilization};
use crate::crypto::Digest;
use crate::fl::{evaluate, gaussian_classes, Dataset};
use crate::policy::{InjectionBundle, PolicyClient, PolicyError, PolicyManager, RosterEntry};
use crate::tee::{Platform, TeeError};

pub type DynTransport = Box<dyn Transport>;

#[derive(Debug, Clone)]
pub struct DemoOptions {
    pub dir: PathBuf,
    pub clients: usize,
    pub rows_per_client: usize,
    pub dim: usize,
    /// Distance between the two class means along every axis.
    pub separation: f64,
    pub validation_rows: usize,
    pub test_rows: usize,
    pub data_seed: u64,
    pub session: SessionConfig,
    /// Client index and its misbehavior.
    pub attack: Option<(usize, Attack)>,
    /// Records every frame on every link when set.
    pub capture: Option<WireCapture>,
}

impl DemoOptions {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            clients: 3,
            rows_per_client: 200,
            dim: 8,
            separation: 0.8,
            validation_rows: 200,
            test_rows: 1000,
            data_seed: 7,
            session: SessionConfig::default(),
            attack: None,
            capture: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OwnedDataset {
    pub id: String,
    pub csv: Vec<u8>,
}

pub struct DemoReport {
    pub policy_hash: Digest,
    pub outcome: SessionOutcome,
    pub clients: Vec<ClientReport>,
    /// Accuracy of the final model on a held-out test set.
    pub test_accuracy: f64,
    pub test: Dataset<f64>,
    /// Plaintext held by the data owners, validation set last.
    pub datasets: Vec<OwnedDataset>,
    /// Secret values released into the enclaves, for leak scanning.
    pub secret_values: Vec<String>,
    pub manager_dir: PathBuf,
    pub coordinator_dir: PathBuf,
    pub client_dirs: Vec<PathBuf>,
}

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Deploy(#[from] DeployError),
    #[error(transparent)]
    Coordinator(#[from] CoordinatorError),
    #[error("policy manager: {0}")]
    Policy(#[from] PolicyError),
    #[error("enclave: {0}")]
    Tee(#[from] TeeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

struct Links {
    manager: Arc<PolicyManager>,
    capture: Option<WireCapture>,
}

impl Links {
    fn tap(&self, t: MemoryTransport) -> DynTransport {
        match &self.capture {
            Some(c) => Box::new(Tapped::new(t, c.clone())),
            None => Box::new(t),
        }
    }

    /// A fresh connection to the manager, served on its own thread.
    fn manager(&self) -> DynTransport {
        let (near, far) = MemoryTransport::pair();
        let m = self.manager.clone();
        thread::spawn(move || {
            if let Err(e) = m.serve(far) {
                log::debug!("manager connection ended: {e}");
            }
        });
        self.tap(near)
    }

    /// `(client end, coordinator end)`.
    fn pair(&self) -> (DynTransport, DynTransport) {
        let (near, far) = MemoryTransport::pair();
        (self.tap(near), Box::new(far))
    }
}

fn secret_values(bundle: &InjectionBundle) -> impl Iterator<Item = String> + '_ {
    bundle
        .environment
        .values()
        .chain(bundle.arguments.iter())
        .chain(bundle.files.values())
        .cloned()
}

pub fn client_id(i: usize) -> String {
    format!("site-{:02}", i + 1)
}

pub fn run_demo(opts: &DemoOptions) -> Result<DemoReport, DemoError> {
    let root = Platform::generate();
    let trusted = root.root_public();
    let party = || Platform::with_root(root.root_signing_key().clone());
    let mgr_policy = manager_policy(trusted, 0);

    let manager_dir = opts.dir.join("manager");
    let coordinator_dir = opts.dir.join("coordinator");
    std::fs::create_dir_all(&manager_dir)?;
    std::fs::create_dir_all(&coordinator_dir)?;
    let manager_enclave = MANAGER_BUNDLE.spawn(&party())?;
    let wal = FileWal::open(&manager_dir.join("counters.wal"))?;
    let counters = CounterService::open(&manager_enclave, Box::new(wal), Stabilization::Background)
        .map_err(DeployError::from)?;
    let manager = PolicyManager::open(manager_enclave, &manager_dir, trusted, 0)?.with_counter_service(Arc::new(counters));
    let links = Links {
        manager: Arc::new(manager),
        capture: opts.capture.clone(),
    };

    let mut datasets: Vec<OwnedDataset> = (0..opts.clients)
        .map(|i| {
            let d: Dataset<f64> = gaussian_classes(opts.rows_per_client, opts.dim, opts.separation, opts.data_seed + 1 + i as u64);
            OwnedDataset {
                id: client_id(i),
                csv: d.to_csv_bytes(),
            }
        })
        .collect();
    let validation: Dataset<f64> =
        gaussian_classes(opts.validation_rows, opts.dim, opts.separation, opts.data_seed ^ 0x5eed_0001);
    let validation_csv = validation.to_csv_bytes();
    let test: Dataset<f64> = gaussian_classes(opts.test_rows, opts.dim, opts.separation, opts.data_seed ^ 0x5eed_0002);

    let roster = datasets
        .iter()
        .map(|d| RosterEntry {
            id: d.id.clone(),
            dataset_hash: Digest::of(&d.csv),
        })
        .collect();
    let doc = standard_policy("demo", builtin_measurements(), roster, Digest::of(&validation_csv), opts.session.clone());
    let mut operator = PolicyClient::connect(links.manager(), &Unattested, Role::Client, mgr_policy.clone())?;
    let policy_hash = operator.upload_policy(&doc.canonical_bytes())?;
    operator.generate_secrets(&policy_hash)?;
    drop(operator);

    let mut secrets = Vec::new();
    let mut client_dirs = Vec::new();
    let mut enclaves = Vec::new();
    for d in &datasets {
        let enclave = CLIENT_BUNDLE.spawn(&party())?;
        let (bundle, counter) = provision(links.manager(), &enclave, Role::Client, mgr_policy.clone(), &policy_hash)?;
        let key = bundle.key_from_env(DATASET_KEY_ENV).map_err(DeployError::from)?;
        let (file, _) = encrypt_dataset(&d.csv, &key, &counter, None)?;
        let dir = opts.dir.join("clients").join(&d.id);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("data.sfl"), file.to_bytes())?;
        secrets.extend(secret_values(&bundle));
        client_dirs.push(dir);
        enclaves.push(enclave);
    }

    let coord_enclave = COORDINATOR_BUNDLE.spawn(&party())?;
    let (bundle, counter) = provision(links.manager(), &coord_enclave, Role::Coordinator, mgr_policy.clone(), &policy_hash)?;
    secrets.extend(secret_values(&bundle));
    let data_key = bundle.key_from_env(DATASET_KEY_ENV).map_err(DeployError::from)?;
    let checkpoint_key = bundle.key_from_env(CHECKPOINT_KEY_ENV).map_err(DeployError::from)?;
    let (file, _) = encrypt_dataset(&validation_csv, &data_key, &counter, None)?;
    let validation_path = coordinator_dir.join("validation.sfl");
    std::fs::write(&validation_path, file.to_bytes())?;
    let validation_plain = decrypt_dataset(&std::fs::read(&validation_path)?, &data_key, &counter)?;
    let checkpoint_counter = counter.create_counter().map_err(DeployError::from)?;

    let policy_view = bundle.policy.clone();
    let coord_attestation = coordinator_policy(&policy_view, trusted, 0);
    let mut coordinator: Coordinator<DynTransport> = Coordinator::start(CoordinatorSetup {
        enclave: coord_enclave,
        trusted_root: trusted,
        min_svn: 0,
        policy: policy_view,
        validation_csv: validation_plain,
        checkpoint_key,
        counter: Arc::new(counter),
        checkpoint_counter,
        state_dir: coordinator_dir.join("state"),
        round_deadline: Duration::from_secs(30),
        join_timeout: Duration::from_secs(30),
        clock: None,
    })?;

    let mut handles = Vec::new();
    let mut coordinator_ends = Vec::new();
    for (i, enclave) in enclaves.into_iter().enumerate() {
        let (client_end, coord_end) = links.pair();
        coordinator_ends.push(coord_end);
        let manager_link = links.manager();
        let id = datasets[i].id.clone();
        let data_path = client_dirs[i].join("data.sfl");
        let mgr_policy = mgr_policy.clone();
        let coord_attestation = coord_attestation.clone();
        let session = opts.session.clone();
        let attack = opts.attack.filter(|(a, _)| *a == i).map(|(_, a)| a);
        handles.push(thread::spawn(move || -> Result<ClientReport, String> {
            let (bundle, counter) =
                provision(manager_link, &enclave, Role::Client, mgr_policy, &policy_hash).map_err(|e| e.to_string())?;
            let key = bundle.key_from_env(DATASET_KEY_ENV).map_err(|e| e.to_string())?;
            let bytes = std::fs::read(&data_path).map_err(|e| e.to_string())?;
            let plain = decrypt_dataset(&bytes, &key, &counter).map_err(|e| e.to_string())?;
            let data = Dataset::from_csv_bytes(&plain).map_err(|e| e.to_string())?;
            let agent = ClientAgent {
                client_id: id,
                attester: &enclave,
                coordinator: coord_attestation,
                data: &data,
                dataset_hash: Digest::of(&plain),
                session,
                attack,
                recv_timeout: None,
            };
            agent.run(client_end).map_err(|e| e.to_string())
        }));
    }
    for end in coordinator_ends {
        coordinator
            .admit(end)
            .map_err(|e| DemoError::Other(format!("admission failed: {e}")))?;
    }
    let outcome = coordinator.run_session()?;
    drop(coordinator);

    let mut clients = Vec::new();
    for h in handles {
        let report = h
            .join()
            .map_err(|_| DemoError::Other("client thread panicked".into()))?
            .map_err(DemoError::Other)?;
        clients.push(report);
    }
    let test_accuracy = evaluate(&outcome.model.params, &test)
        .map_err(|e| DemoError::Other(e.to_string()))?
        .accuracy;
    datasets.push(OwnedDataset {
        id: "validation".into(),
        csv: validation_csv,
    });
    secrets.sort();
    secrets.dedup();
    Ok(DemoReport {
        policy_hash,
        outcome,
        clients,
        test_accuracy,
        test,
        datasets,
        secret_values: secrets,
        manager_dir,
        coordinator_dir,
        client_dirs,
    })
}
