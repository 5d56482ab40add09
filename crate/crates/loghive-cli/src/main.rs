//! `loghive` — operator entry point for the log-harvesting system:
//! identity and CA tooling, the agent and warehouse services, the device
//! simulator, corpus generation, warehouse read-back, and benchmarks.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure. A rejected
//! impostor device is an expected outcome, not a failure.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use loghive::agent::{start_agent, AgentSettings};
use loghive::config::{Config, CONFIG_ENV_VAR};
use loghive::device::{
    default_templates, run_device, write_corpus, DeviceMode, DeviceProfile, DEFAULT_BATCH_BYTES,
};
use loghive::discovery::NetworkPrefix;
use loghive::harness::{run_bench, BenchOptions};
use loghive::identity::{
    attach_certificate, load_identity, load_or_create_identity, DevCa, EndpointId, Keyring, Role,
};
use loghive::transport::LinkParams;
use loghive::warehouse::{start_warehouse, Store, WarehouseSettings};

#[derive(Parser)]
#[command(name = "loghive", version, about = "Secure log harvesting: agents, warehouse, devices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create (or show) an endpoint identity derived from MAC + IP
    Keygen(KeygenArgs),
    /// Development certificate authority operations
    Ca(CaArgs),
    /// Run the agent service
    Agent(ServiceArgs),
    /// Run the warehouse server
    Server(ServiceArgs),
    /// Run a simulated device
    Device(DeviceArgs),
    /// Generate a deterministic synthetic log corpus
    Corpus(CorpusArgs),
    /// Reconstruct a device's original log lines from a warehouse store
    Readback(ReadbackArgs),
    /// Launch N simulated devices against a fresh agent + warehouse and
    /// print a throughput table
    Bench(BenchArgs),
}

#[derive(Args)]
struct KeygenArgs {
    /// Identity store directory
    #[arg(long)]
    store: PathBuf,
    /// MAC address (six colon-separated hex octets)
    #[arg(long)]
    mac: String,
    /// IPv4 or IPv6 address
    #[arg(long)]
    ip: String,
    /// device | agent | server
    #[arg(long, default_value = "device")]
    role: String,
}

#[derive(Args)]
struct CaArgs {
    #[command(subcommand)]
    action: CaAction,
}

#[derive(Subcommand)]
enum CaAction {
    /// Create a new self-signed development CA
    Init {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "loghive dev ca")]
        name: String,
    },
    /// Issue a certificate for an identity and attach it to its store
    Sign {
        /// CA store directory
        #[arg(long)]
        store: PathBuf,
        /// Identity store to certify
        #[arg(long)]
        identity: PathBuf,
        /// device | agent | server (how to load the identity)
        #[arg(long, default_value = "device")]
        role: String,
        /// Also add the issued certificate to this keyring
        #[arg(long)]
        add_to: Option<PathBuf>,
    },
    /// Create a keyring directory trusting this CA
    Keyring {
        /// CA store directory
        #[arg(long)]
        store: PathBuf,
        /// Keyring directory to create
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct ServiceArgs {
    /// Key-value configuration file (LOGHIVE_CONFIG overrides)
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DeviceArgs {
    /// honest | replayer | impostor
    #[arg(long, default_value = "honest")]
    mode: String,
    #[arg(long)]
    corpus: PathBuf,
    /// Raw-byte send budget
    #[arg(long, default_value_t = 2 * 1024 * 1024)]
    bytes: u64,
    /// Lines per second (0 = unthrottled)
    #[arg(long, default_value_t = 0)]
    rate: u64,
    /// 4 or 6: address family for discovery
    #[arg(long, default_value_t = 4)]
    ip: u8,
    /// Agent endpoint (host:port); omit to use multicast discovery
    #[arg(long)]
    agent: Option<SocketAddr>,
    /// Expected agent ID (hex), when known
    #[arg(long)]
    agent_id: Option<String>,
    #[arg(long)]
    identity: PathBuf,
    #[arg(long)]
    keyring: PathBuf,
    /// Duplicated frames to inject in replayer mode
    #[arg(long, default_value_t = 1000)]
    duplicates: u64,
    /// Pre-rekey frames to inject after a rekey in replayer mode
    #[arg(long, default_value_t = 0)]
    cross_epoch: u64,
    /// Session key TTL in kilobits
    #[arg(long, default_value_t = loghive::channel::DEFAULT_TTL_KILOBITS)]
    ttl_kilobits: u64,
    /// Maximum batch payload in bytes
    #[arg(long, default_value_t = DEFAULT_BATCH_BYTES)]
    batch_bytes: usize,
    /// Local network prefix for agent selection (e.g. 127.0.0.0/8)
    #[arg(long)]
    local_net: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    lines: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// File with one template per line (`:::` marks variable slots);
    /// defaults to the stock template set
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct ReadbackArgs {
    /// Warehouse store directory
    #[arg(long)]
    store: PathBuf,
    /// Device ID (hex)
    #[arg(long)]
    device: String,
    /// First line (1-based, inclusive)
    #[arg(long)]
    start: Option<u64>,
    /// Last line (inclusive)
    #[arg(long)]
    end: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 8)]
    devices: usize,
    /// Bytes per device
    #[arg(long, default_value_t = 2 * 1024 * 1024)]
    bytes: u64,
    /// 4 or 6
    #[arg(long, default_value_t = 4)]
    ip: u8,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = loghive::channel::DEFAULT_TTL_KILOBITS)]
    ttl_kilobits: u64,
    /// Group-signature size on the agent → warehouse link
    #[arg(long, default_value_t = loghive::agent::DEFAULT_BATCH_GROUP)]
    group: usize,
    /// Corpus lines per device
    #[arg(long, default_value_t = 10_000)]
    corpus_lines: usize,
    /// Working directory (default: a fresh temp dir, removed afterwards)
    #[arg(long)]
    dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own usage/help text
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("loghive: {e}");
            ExitCode::from(2)
        }
    }
}

fn parse_role(s: &str) -> Result<Role, String> {
    match s {
        "device" => Ok(Role::Device),
        "agent" => Ok(Role::Agent),
        "server" => Ok(Role::Server),
        other => Err(format!("unknown role {other:?} (device|agent|server)")),
    }
}

fn config_path(arg: Option<PathBuf>) -> Result<PathBuf, String> {
    if let Ok(env) = std::env::var(CONFIG_ENV_VAR) {
        return Ok(PathBuf::from(env));
    }
    arg.ok_or_else(|| format!("--config or {CONFIG_ENV_VAR} required"))
}

fn wait_for_interrupt() {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let _ = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst));
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(std::time::Duration::from_millis(100));
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Keygen(args) => {
            let role = parse_role(&args.role)?;
            let identity = load_or_create_identity(&args.store, &args.mac, &args.ip, role)?;
            println!("id={}", identity.id().to_hex());
            println!("store={}", args.store.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Ca(args) => run_ca(args),
        Command::Agent(args) => {
            let path = config_path(args.config)?;
            let cfg = Config::load(&path)?;
            let settings = AgentSettings::from_config(&cfg)?;
            let handle = start_agent(settings)?;
            println!("agent id={}", handle.agent_id().to_hex());
            println!("capture={} control={}", handle.capture_addr(), handle.control_addr());
            wait_for_interrupt();
            handle.stop();
            Ok(ExitCode::SUCCESS)
        }
        Command::Server(args) => {
            let path = config_path(args.config)?;
            let cfg = Config::load(&path)?;
            let settings = WarehouseSettings {
                listen: cfg.require_addr("listen")?,
                identity_dir: cfg
                    .get_path("identity_path")
                    .ok_or("missing identity_path")?,
                keyring_dir: cfg.get_path("keyring_path").ok_or("missing keyring_path")?,
                store_dir: cfg.get_path("store_path").ok_or("missing store_path")?,
                link: LinkParams {
                    ttl_kilobits: cfg.get_u64("ttl_kilobits", loghive::channel::DEFAULT_TTL_KILOBITS)?,
                    replay_width: cfg.get_u64("replay_window", 64)?,
                    validity_secs: cfg.get_u64("validity_secs", 60)?,
                },
            };
            let handle = start_warehouse(settings)?;
            println!("warehouse listening on {}", handle.addr());
            wait_for_interrupt();
            handle.stop();
            Ok(ExitCode::SUCCESS)
        }
        Command::Device(args) => run_device_cmd(args),
        Command::Corpus(args) => {
            let templates = match args.templates {
                Some(path) => std::fs::read_to_string(path)?
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(str::to_string)
                    .collect(),
                None => default_templates(),
            };
            let corpus = write_corpus(&args.out, &templates, args.lines, args.seed)?;
            println!("lines={} file={}", corpus.len(), args.out.display());
            println!("templates={}.templates", args.out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Readback(args) => {
            let device = EndpointId::from_hex(&args.device)?;
            let mut store = Store::open(&args.store)?;
            let range = match (args.start, args.end) {
                (Some(s), Some(e)) => Some((s, e)),
                (Some(s), None) => Some((s, u64::MAX)),
                (None, Some(e)) => Some((1, e)),
                (None, None) => None,
            };
            for line in store.read_device_log(device, range)? {
                println!("{line}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench(args) => {
            let opts = BenchOptions {
                devices: args.devices,
                bytes_per_device: args.bytes,
                ipv6: args.ip == 6,
                ttl_kilobits: args.ttl_kilobits,
                batch_group: args.group,
                corpus_lines: args.corpus_lines,
                seed: args.seed,
                rate: 0,
            };
            let report = match args.dir {
                Some(dir) => run_bench(&dir, &opts)?,
                None => {
                    let tmp = tempfile::tempdir()?;
                    run_bench(tmp.path(), &opts)?
                }
            };
            print!("{}", report.to_text());
            if !report.lossless || report.lost_batches > 0 {
                return Err("bench read-back failed verification".into());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run_ca(args: CaArgs) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match args.action {
        CaAction::Init { store, name } => {
            DevCa::create(&store, &name)?;
            println!("ca created at {}", store.display());
            Ok(ExitCode::SUCCESS)
        }
        CaAction::Sign {
            store,
            identity,
            role,
            add_to,
        } => {
            let ca = DevCa::load(&store)?;
            let role = parse_role(&role)?;
            let mut ident = load_identity(&identity, role)?;
            let cert = ca.issue_certificate(ident.id(), ident.public_key())?;
            attach_certificate(&mut ident, &identity, cert.clone())?;
            println!("certified {}", ident.id().to_hex());
            if let Some(ring_dir) = add_to {
                let mut ring = if ring_dir.join("ca.pem").exists() {
                    Keyring::open(&ring_dir)?
                } else {
                    Keyring::create(&ring_dir, ca.certificate().clone())?
                };
                ring.add(cert)?;
                println!("added to keyring {}", ring_dir.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        CaAction::Keyring { store, dir } => {
            let ca = DevCa::load(&store)?;
            Keyring::create(&dir, ca.certificate().clone())?;
            println!("keyring created at {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run_device_cmd(args: DeviceArgs) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let mode = match args.mode.as_str() {
        "honest" => DeviceMode::Honest,
        "replayer" => DeviceMode::Replayer {
            duplicates: args.duplicates,
            cross_epoch: args.cross_epoch,
        },
        "impostor" => DeviceMode::Impostor,
        other => return Err(format!("unknown mode {other:?} (honest|replayer|impostor)").into()),
    };
    let mut local_networks = Vec::new();
    for net in &args.local_net {
        let (addr, len) = net
            .split_once('/')
            .ok_or_else(|| format!("--local-net must be addr/prefix, got {net:?}"))?;
        local_networks.push(NetworkPrefix::new(addr.parse()?, len.parse()?));
    }
    let mut profile = DeviceProfile::new(args.identity, args.keyring, args.corpus);
    profile.mode = mode;
    profile.rate = args.rate;
    profile.total_bytes = args.bytes;
    profile.agent_endpoint = args.agent;
    profile.agent_id = match args.agent_id {
        Some(hex) => Some(EndpointId::from_hex(&hex)?),
        None => None,
    };
    profile.discover_ipv6 = args.ip == 6;
    profile.local_networks = local_networks;
    profile.link = LinkParams {
        ttl_kilobits: args.ttl_kilobits,
        ..LinkParams::default()
    };
    profile.batch_max_bytes = args.batch_bytes;
    let report = run_device(&profile)?;
    print!("{}", report.to_kv());
    Ok(ExitCode::SUCCESS)
}
