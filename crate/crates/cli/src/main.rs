use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use secfl::attestation::{Role, TcpTransport, Unattested};
use secfl::audit::verify_audit;
use secfl::counter::wal::FileWal;
use secfl::counter::{CounterClient, CounterId, CounterService, RemoteCounter, Stabilization};
use secfl::crypto::Digest;
use secfl::fl::Dataset;
use secfl::orchestrator::demo::{run_demo, DemoOptions};
use secfl::orchestrator::{
    builtin_measurements, coordinator_policy, decrypt_dataset, encrypt_dataset, manager_policy, provision,
    standard_policy, Attack, ClientAgent, CodeBundle, Coordinator, CoordinatorSetup, CHECKPOINT_KEY_ENV, CLIENT_BUNDLE,
    COORDINATOR_BUNDLE, DATASET_KEY_ENV, MANAGER_BUNDLE,
};
use secfl::policy::{PolicyClient, PolicyManager, RosterEntry};
use secfl::tee::{measure, Platform};
use secfl::{CloneMode, SessionConfig};

#[derive(Parser)]
#[command(name = "secfl", version, about = "Confidential federated learning on simulated enclaves")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a platform key file, optionally under an existing root.
    Keygen {
        #[arg(long)]
        out: PathBuf,
        /// Platform file whose root key the new platform shares.
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Print the measurement of a built-in bundle or a code file.
    Measure {
        /// `coordinator`, `client`, `policy-manager`, or a file path.
        bundle: String,
        /// Configuration file measured together with a code file.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write and upload session policies.
    #[command(subcommand)]
    Policy(PolicyCommand),
    /// Encrypt a CSV dataset for a party of a policy.
    EncryptData {
        #[command(flatten)]
        conn: ManagerArgs,
        #[arg(long, default_value = "client")]
        role: Role,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Advance this counter instead of creating one.
        #[arg(long)]
        counter: Option<CounterId>,
    },
    /// Decrypt a protected dataset, refusing stale versions.
    DecryptData {
        #[command(flatten)]
        conn: ManagerArgs,
        #[arg(long, default_value = "client")]
        role: Role,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Manage rollback counters.
    #[command(subcommand)]
    Counter(CounterCommand),
    /// Serve the policy manager and counter service.
    RunManager {
        #[arg(long)]
        platform: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7000")]
        listen: String,
    },
    /// Run a coordinator described by a session file.
    RunCoordinator {
        #[arg(long)]
        session: PathBuf,
        /// Continue from the protected checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Join a session as a client.
    RunClient {
        #[command(flatten)]
        conn: ManagerArgs,
        #[arg(long)]
        coordinator: String,
        #[arg(long)]
        id: String,
        /// Protected dataset written by `encrypt-data`.
        #[arg(long)]
        data: PathBuf,
        /// Submit updates scaled by this factor.
        #[arg(long, allow_hyphen_values = true)]
        attack_scale: Option<f64>,
    },
    /// Inspect audit logs.
    #[command(subcommand)]
    Audit(AuditCommand),
    /// Run a whole session in one process on synthetic data.
    Demo(DemoArgs),
}

#[derive(Subcommand)]
enum PolicyCommand {
    /// Write the standard policy for a roster of CSV datasets.
    New {
        #[arg(long, default_value = "session")]
        name: String,
        /// `ID=PATH` for each client dataset.
        #[arg(long = "client", required = true)]
        clients: Vec<String>,
        #[arg(long)]
        validation: PathBuf,
        /// JSON session configuration; defaults apply otherwise.
        #[arg(long)]
        session_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Upload a policy and generate its secrets.
    Upload {
        #[arg(long)]
        manager: String,
        #[arg(long)]
        platform: PathBuf,
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        no_generate: bool,
    },
}

#[derive(Subcommand)]
enum CounterCommand {
    /// Create a counter and print its id.
    Init {
        #[arg(long)]
        manager: String,
        #[arg(long)]
        platform: PathBuf,
    },
}

#[derive(Subcommand)]
enum AuditCommand {
    /// Check an audit log's hash chain.
    Verify { log: PathBuf },
}

#[derive(Args)]
struct ManagerArgs {
    #[arg(long)]
    manager: String,
    #[arg(long)]
    platform: PathBuf,
    #[arg(long)]
    policy: Digest,
}

#[derive(Args)]
struct DemoArgs {
    /// Working directory; a temporary one is used otherwise.
    #[arg(long)]
    dir: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    clients: usize,
    #[arg(long, default_value_t = 200)]
    rows: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 30)]
    rounds: u64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Make the last client submit updates scaled by this factor.
    #[arg(long, allow_hyphen_values = true)]
    attack_scale: Option<f64>,
    /// Use leave-one-out clones instead of random subsets.
    #[arg(long)]
    leave_one_out: bool,
}

/// Deployment settings of a coordinator.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionFile {
    policy_hash: Digest,
    manager: String,
    platform: PathBuf,
    listen: String,
    validation_data: PathBuf,
    state_dir: PathBuf,
    #[serde(default = "default_deadline")]
    round_deadline_secs: u64,
    #[serde(default = "default_join_timeout")]
    join_timeout_secs: u64,
}

fn default_deadline() -> u64 {
    30
}

fn default_join_timeout() -> u64 {
    120
}

const CHECKPOINT_COUNTER_FILE: &str = "checkpoint.counter";

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_platform(path: &Path) -> Result<Platform> {
    Platform::load(path).with_context(|| format!("loading platform {}", path.display()))
}

fn connect(addr: &str) -> Result<TcpTransport> {
    TcpTransport::connect(addr).with_context(|| format!("connecting to {addr}"))
}

/// Spawns the built-in enclave for `role` and fetches its bundle.
fn provision_role(
    conn: &ManagerArgs,
    role: Role,
) -> Result<(secfl::policy::InjectionBundle, RemoteCounter<TcpTransport>, secfl::tee::Enclave, Platform)> {
    let platform = load_platform(&conn.platform)?;
    let bundle = match role {
        Role::Client => CLIENT_BUNDLE,
        Role::Coordinator => COORDINATOR_BUNDLE,
        Role::PolicyManager => bail!("the policy manager holds no dataset"),
    };
    let enclave = bundle.spawn(&platform)?;
    let (b, counter) = provision(
        connect(&conn.manager)?,
        &enclave,
        role,
        manager_policy(platform.root_public(), 0),
        &conn.policy,
    )?;
    Ok((b, counter, enclave, platform))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Keygen { out, root } => {
            let p = match root {
                Some(r) => Platform::with_root(load_platform(&r)?.root_signing_key().clone()),
                None => Platform::generate(),
            };
            p.save(&out)?;
            println!("platform {:?}", p.platform_id());
            println!("root {}", hex::encode(p.root_public().to_bytes()));
        }
        Command::Measure { bundle, config } => {
            let m = match (CodeBundle::by_name(&bundle), config) {
                (Some(b), None) => b.measurement(),
                (_, config) => {
                    let code = std::fs::read(&bundle).with_context(|| format!("reading {bundle}"))?;
                    let config = std::fs::read(config.context("measuring a file needs --config")?)?;
                    measure(&code, &config)?
                }
            };
            println!("{m}");
        }
        Command::Policy(PolicyCommand::New {
            name,
            clients,
            validation,
            session_config,
            out,
        }) => {
            let mut roster = Vec::new();
            for c in clients {
                let (id, path) = c.split_once('=').context("--client takes ID=PATH")?;
                let bytes = std::fs::read(path).with_context(|| format!("reading {path}"))?;
                Dataset::<f64>::from_csv_bytes(&bytes).with_context(|| format!("parsing {path}"))?;
                roster.push(RosterEntry {
                    id: id.to_string(),
                    dataset_hash: Digest::of(&bytes),
                });
            }
            let val = std::fs::read(&validation)?;
            let session: SessionConfig = match session_config {
                Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
                None => SessionConfig::default(),
            };
            let doc = standard_policy(&name, builtin_measurements(), roster, Digest::of(&val), session);
            doc.validate()?;
            std::fs::write(&out, serde_json::to_string_pretty(&doc)? + "\n")?;
            println!("{}", secfl::policy::Policy::from_document(doc)?.policy_hash);
        }
        Command::Policy(PolicyCommand::Upload {
            manager,
            platform,
            file,
            no_generate,
        }) => {
            let p = load_platform(&platform)?;
            let mut pc = PolicyClient::connect(connect(&manager)?, &Unattested, Role::Client, manager_policy(p.root_public(), 0))?;
            let hash = pc.upload_policy(&std::fs::read(&file)?)?;
            if !no_generate {
                pc.generate_secrets(&hash)?;
            }
            println!("{hash}");
        }
        Command::Counter(CounterCommand::Init { manager, platform }) => {
            let p = load_platform(&platform)?;
            let pc = PolicyClient::connect(connect(&manager)?, &Unattested, Role::Client, manager_policy(p.root_public(), 0))?;
            let counter = RemoteCounter::connect(pc.into_channel())?;
            println!("{}", counter.create_counter()?);
        }
        Command::EncryptData {
            conn,
            role,
            input,
            out,
            counter,
        } => {
            let (bundle, remote, _, _) = provision_role(&conn, role)?;
            let key = bundle.key_from_env(DATASET_KEY_ENV)?;
            let plain = std::fs::read(&input)?;
            Dataset::<f64>::from_csv_bytes(&plain).context("input is not a dataset")?;
            let (file, id) = encrypt_dataset(&plain, &key, &remote, counter)?;
            std::fs::write(&out, file.to_bytes())?;
            println!("counter {id}");
            println!("dataset-hash {}", Digest::of(&plain));
        }
        Command::DecryptData { conn, role, input, out } => {
            let (bundle, remote, _, _) = provision_role(&conn, role)?;
            let key = bundle.key_from_env(DATASET_KEY_ENV)?;
            let plain = decrypt_dataset(&std::fs::read(&input)?, &key, &remote)?;
            std::fs::write(&out, plain)?;
        }
        Command::RunManager { platform, dir, listen } => {
            let p = load_platform(&platform)?;
            let enclave = MANAGER_BUNDLE.spawn(&p)?;
            std::fs::create_dir_all(&dir)?;
            let wal = FileWal::open(&dir.join("counters.wal"))?;
            let counters = CounterService::open(&enclave, Box::new(wal), Stabilization::Background)?;
            let manager = PolicyManager::open(enclave, &dir, p.root_public(), 0)?.with_counter_service(Arc::new(counters));
            let listener = TcpListener::bind(&listen)?;
            log::info!("policy manager {} listening on {listen}", MANAGER_BUNDLE.measurement());
            Arc::new(manager).serve_listener(listener)?;
        }
        Command::RunCoordinator { session, resume } => run_coordinator(&session, resume)?,
        Command::RunClient {
            conn,
            coordinator,
            id,
            data,
            attack_scale,
        } => {
            let (bundle, remote, enclave, platform) = provision_role(&conn, Role::Client)?;
            let key = bundle.key_from_env(DATASET_KEY_ENV)?;
            let plain = decrypt_dataset(&std::fs::read(&data)?, &key, &remote)?;
            let dataset = Dataset::from_csv_bytes(&plain)?;
            let agent = ClientAgent {
                client_id: id,
                attester: &enclave,
                coordinator: coordinator_policy(&bundle.policy, platform.root_public(), 0),
                data: &dataset,
                dataset_hash: Digest::of(&plain),
                session: bundle.policy.session.clone(),
                attack: attack_scale.map(Attack::Scale),
                recv_timeout: None,
            };
            let report = agent.run(connect(&coordinator)?)?;
            match &report.end {
                Some(end) => println!("session ended after round {}: {}", end.round, end.reason),
                None => println!("coordinator disconnected after {} commits", report.commits.len()),
            }
        }
        Command::Audit(AuditCommand::Verify { log }) => {
            let verdict = verify_audit(&log)?;
            println!("{verdict}");
            if !verdict.is_accepted() {
                std::process::exit(2);
            }
        }
        Command::Demo(args) => demo(args)?,
    }
    Ok(())
}

fn run_coordinator(session_path: &Path, resume: bool) -> Result<()> {
    let sf: SessionFile = serde_json::from_slice(&std::fs::read(session_path)?)
        .with_context(|| format!("parsing {}", session_path.display()))?;
    let conn = ManagerArgs {
        manager: sf.manager.clone(),
        platform: sf.platform.clone(),
        policy: sf.policy_hash,
    };
    let (bundle, remote, enclave, platform) = provision_role(&conn, Role::Coordinator)?;
    let data_key = bundle.key_from_env(DATASET_KEY_ENV)?;
    let validation_csv = decrypt_dataset(&std::fs::read(&sf.validation_data)?, &data_key, &remote)?;

    std::fs::create_dir_all(&sf.state_dir)?;
    let counter_file = sf.state_dir.join(CHECKPOINT_COUNTER_FILE);
    let checkpoint_counter: CounterId = if counter_file.exists() {
        std::fs::read_to_string(&counter_file)?.trim().parse().map_err(anyhow::Error::msg)?
    } else {
        if resume {
            bail!("nothing to resume in {}", sf.state_dir.display());
        }
        let id = remote.create_counter()?;
        std::fs::write(&counter_file, format!("{id}\n"))?;
        id
    };
    let setup = CoordinatorSetup {
        enclave,
        trusted_root: platform.root_public(),
        min_svn: 0,
        policy: bundle.policy.clone(),
        validation_csv,
        checkpoint_key: bundle.key_from_env(CHECKPOINT_KEY_ENV)?,
        counter: Arc::new(remote),
        checkpoint_counter,
        state_dir: sf.state_dir.clone(),
        round_deadline: Duration::from_secs(sf.round_deadline_secs),
        join_timeout: Duration::from_secs(sf.join_timeout_secs),
        clock: None,
    };
    let mut coordinator: Coordinator<TcpTransport> = if resume {
        Coordinator::resume(setup)?
    } else {
        Coordinator::start(setup)?
    };
    let listener = TcpListener::bind(&sf.listen)?;
    log::info!("coordinator {} listening on {}", COORDINATOR_BUNDLE.measurement(), sf.listen);
    let admitter = coordinator.admitter();
    thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let admitter = admitter.clone();
            thread::spawn(move || {
                let _ = admitter.admit(TcpTransport::new(stream));
            });
        }
    });
    let outcome = coordinator.run_session()?;
    let last = outcome.model.history.last();
    println!(
        "session ended after round {} ({}), accuracy {:.4}",
        outcome.model.round,
        outcome.reason.map(|r| r.as_str()).unwrap_or("halted"),
        last.map(|m| m.accuracy).unwrap_or(0.0)
    );
    println!("audit log {}", outcome.audit_path.display());
    Ok(())
}

fn demo(args: DemoArgs) -> Result<()> {
    let tmp;
    let dir = match &args.dir {
        Some(d) => d.clone(),
        None => {
            tmp = std::env::temp_dir().join(format!("secfl-demo-{}", std::process::id()));
            tmp
        }
    };
    let mut opts = DemoOptions::new(&dir);
    opts.clients = args.clients;
    opts.rows_per_client = args.rows;
    opts.dim = args.dim;
    opts.data_seed = args.seed;
    opts.session.max_rounds = args.rounds;
    opts.session.rng_seed = args.seed;
    if args.leave_one_out {
        opts.session.clone_mode = CloneMode::LeaveOneOut;
    }
    opts.attack = args.attack_scale.map(|f| (args.clients - 1, Attack::Scale(f)));
    let report = run_demo(&opts)?;
    for r in &report.outcome.rounds {
        let flagged: Vec<&String> = r.guard.iter().flat_map(|g| g.flagged.iter()).collect();
        println!(
            "round {:>2}  accuracy {:.4}  loss {:.5}  updates {}  flagged {:?}",
            r.round,
            r.metrics.accuracy,
            r.metrics.loss,
            r.updates.len(),
            flagged
        );
    }
    println!(
        "stopped: {}",
        report.outcome.reason.map(|r| r.as_str()).unwrap_or("halted")
    );
    println!("test accuracy {:.4}", report.test_accuracy);
    println!("policy {}", report.policy_hash);
    println!("audit {} ({})", report.outcome.audit_path.display(), verify_audit(&report.outcome.audit_path)?);
    println!("state under {}", dir.display());
    Ok(())
}
