//! In-process deployment orchestration: provisioning identities and
//! keyrings for a CA, a warehouse, an agent, a controller, and N devices,
//! then running benchmark workloads against them. Used by the `bench`
//! command and the acceptance suite.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use crate::agent::{start_agent, AgentError, AgentHandle, AgentSettings, LogFilter};
use crate::device::{
    default_templates, run_device, write_corpus, DeviceError, DeviceProfile,
    DeviceReport,
};
use crate::discovery::DiscoveryError;
use crate::identity::{
    attach_certificate, load_or_create_identity, DevCa, EndpointId, EndpointIdentity,
    IdentityError, Keyring, Role,
};
use crate::transport::LinkParams;
use crate::warehouse::{start_warehouse, StoreError, WarehouseError, WarehouseHandle, WarehouseSettings};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Warehouse(#[from] WarehouseError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Discovery(#[from] DiscoveryError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

type Result<T> = std::result::Result<T, HarnessError>;

/// A provisioned deployment: all identities created, certified by one dev
/// CA, and distributed into each role's keyring.
pub struct Deployment {
    pub root: PathBuf,
    pub ipv6: bool,
    pub warehouse_id: EndpointId,
    pub agent_id: EndpointId,
    pub controller_id: EndpointId,
    pub device_ids: Vec<EndpointId>,
}

impl Deployment {
    pub fn dir(&self, role: &str) -> PathBuf {
        self.root.join(role)
    }

    pub fn keyring_dir(&self, role: &str) -> PathBuf {
        self.root.join(role).join("keyring")
    }

    pub fn device_dir(&self, i: usize) -> PathBuf {
        self.root.join(format!("device{i}"))
    }

    pub fn corpus_path(&self, i: usize) -> PathBuf {
        self.root.join(format!("device{i}")).join("corpus.log")
    }

    pub fn loopback(&self) -> &'static str {
        if self.ipv6 {
            "[::1]:0"
        } else {
            "127.0.0.1:0"
        }
    }
}

fn certify(
    ca: &DevCa,
    identity: &mut EndpointIdentity,
    store: &Path,
) -> Result<x509_cert::Certificate> {
    let cert = ca.issue_certificate(identity.id(), identity.public_key())?;
    attach_certificate(identity, store, cert.clone())?;
    Ok(cert)
}

/// Create identities, certificates, and keyrings for one warehouse, one
/// agent, one controller, and `n_devices` devices under `root`.
pub fn provision(root: &Path, n_devices: usize, ipv6: bool) -> Result<Deployment> {
    std::fs::create_dir_all(root)?;
    let ca = DevCa::create(&root.join("ca"), "loghive dev ca")?;

    let ip_of = |i: usize| -> String {
        if ipv6 {
            format!("2001:db8::{:x}", i + 1)
        } else {
            format!("192.0.2.{}", i + 1)
        }
    };

    let wh_dir = root.join("warehouse");
    let mut warehouse = load_or_create_identity(&wh_dir, "aa:bb:cc:dd:ff:01", &ip_of(200), Role::Server)?;
    let wh_cert = certify(&ca, &mut warehouse, &wh_dir)?;

    let agent_dir = root.join("agent");
    let mut agent = load_or_create_identity(&agent_dir, "aa:bb:cc:dd:fe:01", &ip_of(100), Role::Agent)?;
    let agent_cert = certify(&ca, &mut agent, &agent_dir)?;

    let ctl_dir = root.join("controller");
    let mut controller = load_or_create_identity(&ctl_dir, "aa:bb:cc:dd:fd:01", &ip_of(150), Role::Agent)?;
    let controller_cert = certify(&ca, &mut controller, &ctl_dir)?;

    let mut device_ids = Vec::with_capacity(n_devices);
    let mut device_certs = Vec::with_capacity(n_devices);
    for i in 0..n_devices {
        let dir = root.join(format!("device{i}"));
        let mac = format!("aa:bb:cc:dd:ee:{:02x}", i);
        let mut device = load_or_create_identity(&dir, &mac, &ip_of(i), Role::Device)?;
        let cert = certify(&ca, &mut device, &dir)?;
        device_ids.push(device.id());
        device_certs.push(cert);
    }

    // keyrings: each role trusts the CA and holds the peers it talks to
    let mut agent_ring = Keyring::create(&agent_dir.join("keyring"), ca.certificate().clone())?;
    agent_ring.add(wh_cert.clone())?;
    agent_ring.add(controller_cert.clone())?;
    for cert in &device_certs {
        agent_ring.add(cert.clone())?;
    }
    let mut wh_ring = Keyring::create(&wh_dir.join("keyring"), ca.certificate().clone())?;
    wh_ring.add(agent_cert.clone())?;
    let mut ctl_ring = Keyring::create(&ctl_dir.join("keyring"), ca.certificate().clone())?;
    ctl_ring.add(agent_cert.clone())?;
    for i in 0..n_devices {
        let mut ring = Keyring::create(&root.join(format!("device{i}")).join("keyring"), ca.certificate().clone())?;
        ring.add(agent_cert.clone())?;
    }

    Ok(Deployment {
        root: root.to_path_buf(),
        ipv6,
        warehouse_id: warehouse.id(),
        agent_id: agent.id(),
        controller_id: controller.id(),
        device_ids,
    })
}

/// Provision an extra identity certified by a *different* CA: apocryphal
/// from the deployment's point of view. Its keyring trusts only the rogue
/// CA, which is enough to attempt a handshake.
pub fn provision_impostor(root: &Path, ipv6: bool) -> Result<(PathBuf, PathBuf)> {
    let dir = root.join("impostor");
    let rogue = DevCa::create(&dir.join("ca"), "rogue ca")?;
    let ip = if ipv6 { "2001:db8::99" } else { "192.0.2.99" };
    let mut identity = load_or_create_identity(&dir, "aa:bb:cc:dd:ee:99", ip, Role::Device)?;
    let cert = rogue.issue_certificate(identity.id(), identity.public_key())?;
    attach_certificate(&mut identity, &dir, cert)?;
    let ring = dir.join("keyring");
    Keyring::create(&ring, rogue.certificate().clone())?;
    Ok((dir.clone(), ring))
}

/// Start a warehouse for the deployment on an ephemeral loopback port,
/// persisting under `<root>/<store_name>`. Distinct instances need
/// distinct store names.
pub fn launch_warehouse(
    dep: &Deployment,
    link: LinkParams,
    store_name: &str,
) -> Result<WarehouseHandle> {
    let settings = WarehouseSettings {
        listen: dep.loopback().parse().expect("loopback addr"),
        identity_dir: dep.dir("warehouse"),
        keyring_dir: dep.keyring_dir("warehouse"),
        store_dir: dep.root.join(store_name),
        link,
    };
    Ok(start_warehouse(settings)?)
}

/// Start an agent for the deployment on ephemeral loopback ports,
/// forwarding to `warehouse`.
pub fn launch_agent(
    dep: &Deployment,
    warehouse: SocketAddr,
    link: LinkParams,
    batch_group: usize,
) -> Result<AgentHandle> {
    let settings = AgentSettings {
        capture_listen: dep.loopback().parse().expect("loopback addr"),
        control_listen: dep.loopback().parse().expect("loopback addr"),
        warehouse,
        identity_dir: dep.dir("agent"),
        keyring_dir: dep.keyring_dir("agent"),
        filter: LogFilter::All,
        controllers: [dep.controller_id].into_iter().collect(),
        link,
        batch_group,
        theta: crate::pipeline::DEFAULT_THETA,
        learning_window: crate::pipeline::DEFAULT_LEARNING_WINDOW,
        forward_queue: crate::agent::DEFAULT_FORWARD_QUEUE,
        device_meta: HashMap::new(),
        discovery: None,
        advertise_endpoint: None,
    };
    Ok(start_agent(settings)?)
}

/// Benchmark knobs.
#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub devices: usize,
    pub bytes_per_device: u64,
    pub ipv6: bool,
    pub ttl_kilobits: u64,
    pub batch_group: usize,
    pub corpus_lines: usize,
    pub seed: u64,
    pub rate: u64,
}

impl Default for BenchOptions {
    fn default() -> BenchOptions {
        BenchOptions {
            devices: 8,
            bytes_per_device: 2 * 1024 * 1024,
            ipv6: false,
            ttl_kilobits: crate::channel::DEFAULT_TTL_KILOBITS,
            batch_group: crate::agent::DEFAULT_BATCH_GROUP,
            corpus_lines: 10_000,
            seed: 42,
            rate: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeviceOutcome {
    pub device: EndpointId,
    pub bytes: u64,
    pub secs: f64,
    pub mbps: f64,
    pub report: DeviceReport,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub per_device: Vec<DeviceOutcome>,
    pub total_bytes: u64,
    pub elapsed_secs: f64,
    pub aggregate_mbps: f64,
    /// Per-device read-back compared byte-for-byte against what was sent.
    pub lossless: bool,
    /// Batches acked by the agent but missing from the warehouse.
    pub lost_batches: u64,
}

impl BenchReport {
    /// One line per device plus a totals line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for d in &self.per_device {
            out.push_str(&format!(
                "device={} bytes={} secs={:.3} mbps={:.3}\n",
                d.device.to_hex(),
                d.bytes,
                d.secs,
                d.mbps
            ));
        }
        out.push_str(&format!(
            "total devices={} bytes={} secs={:.3} mbps={:.3} lossless={} lost_batches={}\n",
            self.per_device.len(),
            self.total_bytes,
            self.elapsed_secs,
            self.aggregate_mbps,
            self.lossless,
            self.lost_batches
        ));
        out
    }
}

/// Run a full bench: provision, start warehouse and agent, stream every
/// device concurrently, then verify warehouse read-back against each
/// device's source corpus.
pub fn run_bench(root: &Path, opts: &BenchOptions) -> Result<BenchReport> {
    let dep = provision(root, opts.devices, opts.ipv6)?;
    let templates = default_templates();
    let mut corpora: Vec<Vec<String>> = Vec::with_capacity(opts.devices);
    for i in 0..opts.devices {
        let corpus = write_corpus(
            &dep.corpus_path(i),
            &templates,
            opts.corpus_lines,
            opts.seed + i as u64,
        )?;
        corpora.push(corpus);
    }

    let link = LinkParams {
        ttl_kilobits: opts.ttl_kilobits,
        ..LinkParams::default()
    };
    let warehouse = launch_warehouse(&dep, link.clone(), "store")?;
    let agent = launch_agent(&dep, warehouse.addr(), link.clone(), opts.batch_group)?;
    let capture = agent.capture_addr();
    let agent_id = agent.agent_id();

    let started = Instant::now();
    let mut workers = Vec::new();
    for i in 0..opts.devices {
        let mut profile = DeviceProfile::new(
            dep.device_dir(i),
            dep.device_dir(i).join("keyring"),
            dep.corpus_path(i),
        );
        profile.total_bytes = opts.bytes_per_device;
        profile.agent_endpoint = Some(capture);
        profile.agent_id = Some(agent_id);
        profile.link = link.clone();
        profile.rate = opts.rate;
        workers.push(thread::spawn(move || run_device(&profile)));
    }
    let mut outcomes = Vec::with_capacity(opts.devices);
    for worker in workers {
        let report = worker
            .join()
            .map_err(|_| HarnessError::Other("device thread panicked".into()))??;
        let device = report.device.expect("device id in report");
        let mbps = if report.elapsed_secs > 0.0 {
            report.bytes_sent as f64 * 8.0 / report.elapsed_secs / 1e6
        } else {
            0.0
        };
        outcomes.push(DeviceOutcome {
            device,
            bytes: report.bytes_sent,
            secs: report.elapsed_secs,
            mbps,
            report,
        });
    }
    let elapsed_secs = started.elapsed().as_secs_f64();

    // drain the agent so every acked batch reaches the warehouse
    agent.stop();

    let mut lossless = true;
    let mut lost_batches = 0u64;
    for (i, outcome) in outcomes.iter().enumerate() {
        let expected: Vec<&String> = (0..outcome.report.lines_sent as usize)
            .map(|n| &corpora[i][n % corpora[i].len()])
            .collect();
        let got = warehouse.read_device_log(outcome.device, None)?;
        if got.len() != expected.len() || !got.iter().zip(&expected).all(|(a, b)| &a == b) {
            lossless = false;
        }
        let stored = warehouse
            .store()
            .lock()
            .expect("store lock")
            .record_count(outcome.device)? as u64;
        lost_batches += outcome.report.batches.saturating_sub(stored);
    }
    warehouse.stop();

    let total_bytes: u64 = outcomes.iter().map(|o| o.bytes).sum();
    let aggregate_mbps = if elapsed_secs > 0.0 {
        total_bytes as f64 * 8.0 / elapsed_secs / 1e6
    } else {
        0.0
    };
    Ok(BenchReport {
        per_device: outcomes,
        total_bytes,
        elapsed_secs,
        aggregate_mbps,
        lossless,
        lost_batches,
    })
}
