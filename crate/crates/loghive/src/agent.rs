//! The agent process: accepts authenticated device sessions (one
//! exclusive worker each), runs the compression/normalization pipeline,
//! and forwards processed batches to the warehouse over the same
//! transport protocol. A signed control channel adjusts orchestration
//! parameters at runtime.

use std::collections::{HashMap, HashSet};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, Sender};

use crate::channel::sign_batch;
use crate::config::{Config, ConfigError};
use crate::discovery::AdmResponder;
use crate::identity::{load_identity, EndpointId, EndpointIdentity, IdentityError, Keyring, Role};
use crate::pipeline::{
    attach_metadata_l1, events_to_xml, normalize_to_cbe, CbeEvent, DeviceMeta, LineProcessor,
    PipelineError, DEFAULT_LEARNING_WINDOW, DEFAULT_THETA,
};
use crate::timeutil;
use crate::transport::{
    encode_error, err_code, parse_error, Event, FrameStream, LinkParams, RejectReason, SecureLink,
    TransportError,
};
use crate::warehouse::encode_forward;
use crate::wire::{self, WireMessage};

pub const DEFAULT_BATCH_GROUP: usize = 32;
pub const DEFAULT_FORWARD_QUEUE: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("startup: {0}")]
    Startup(String),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("control: {0}")]
    Control(String),
}

/// Which devices may connect.
#[derive(Debug, Clone)]
pub enum LogFilter {
    All,
    Allow(HashSet<EndpointId>),
}

impl LogFilter {
    pub fn parse(text: &str) -> Result<LogFilter, String> {
        let text = text.trim();
        if text == "*" {
            return Ok(LogFilter::All);
        }
        let mut ids = HashSet::new();
        for part in text.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            ids.insert(EndpointId::from_hex(part).map_err(|e| e.to_string())?);
        }
        Ok(LogFilter::Allow(ids))
    }

    pub fn permits(&self, id: EndpointId) -> bool {
        match self {
            LogFilter::All => true,
            LogFilter::Allow(ids) => ids.contains(&id),
        }
    }
}

/// Parameters the control interface may change at runtime. Snapshots are
/// taken per batch / per session, so a change never applies halfway.
#[derive(Debug, Clone)]
pub struct RuntimeParams {
    pub warehouse: SocketAddr,
    pub filter: LogFilter,
    pub link: LinkParams,
    pub batch_group: usize,
    pub sig_proto: u8,
    pub enc_proto: u8,
}

#[derive(Debug, Default)]
pub struct AgentCounters {
    pub sessions_total: AtomicU64,
    pub sessions_active: AtomicU64,
    pub batches_received: AtomicU64,
    pub batches_forwarded: AtomicU64,
    pub rekeys: AtomicU64,
    pub replay_rejects: AtomicU64,
    pub epoch_rejects: AtomicU64,
    pub expired_drops: AtomicU64,
    pub signature_rejects: AtomicU64,
    pub decrypt_rejects: AtomicU64,
    pub wrong_peer_rejects: AtomicU64,
    pub auth_failures: AtomicU64,
    pub control_commands: AtomicU64,
}

impl AgentCounters {
    pub fn snapshot(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("sessions_total", self.sessions_total.load(Ordering::Relaxed)),
            ("sessions_active", self.sessions_active.load(Ordering::Relaxed)),
            ("batches_received", self.batches_received.load(Ordering::Relaxed)),
            ("batches_forwarded", self.batches_forwarded.load(Ordering::Relaxed)),
            ("rekeys", self.rekeys.load(Ordering::Relaxed)),
            ("replay_rejects", self.replay_rejects.load(Ordering::Relaxed)),
            ("epoch_rejects", self.epoch_rejects.load(Ordering::Relaxed)),
            ("expired_drops", self.expired_drops.load(Ordering::Relaxed)),
            ("signature_rejects", self.signature_rejects.load(Ordering::Relaxed)),
            ("decrypt_rejects", self.decrypt_rejects.load(Ordering::Relaxed)),
            ("wrong_peer_rejects", self.wrong_peer_rejects.load(Ordering::Relaxed)),
            ("auth_failures", self.auth_failures.load(Ordering::Relaxed)),
            ("control_commands", self.control_commands.load(Ordering::Relaxed)),
        ]
    }

    fn count_reject(&self, reason: RejectReason) {
        let counter = match reason {
            RejectReason::Expired => &self.expired_drops,
            RejectReason::Replay => &self.replay_rejects,
            RejectReason::EpochMismatch => &self.epoch_rejects,
            RejectReason::BadSignature => &self.signature_rejects,
            RejectReason::Unsigned => &self.signature_rejects,
            RejectReason::WrongPeer => &self.wrong_peer_rejects,
            RejectReason::DecryptFailed => &self.decrypt_rejects,
        };
        counter.fetch_add(1, Ordering::Relaxed);
    }
}

/// Static agent configuration.
#[derive(Debug, Clone)]
pub struct AgentSettings {
    pub capture_listen: SocketAddr,
    pub control_listen: SocketAddr,
    pub warehouse: SocketAddr,
    pub identity_dir: PathBuf,
    pub keyring_dir: PathBuf,
    pub filter: LogFilter,
    pub controllers: HashSet<EndpointId>,
    pub link: LinkParams,
    pub batch_group: usize,
    pub theta: f64,
    pub learning_window: usize,
    pub forward_queue: usize,
    pub device_meta: HashMap<EndpointId, DeviceMeta>,
    /// off, v4, or v6 multicast discovery responder.
    pub discovery: Option<bool /* ipv6 */>,
    pub advertise_endpoint: Option<String>,
}

impl AgentSettings {
    pub fn from_config(cfg: &Config) -> Result<AgentSettings, AgentError> {
        let capture_listen = cfg.require_addr("capture_listen")?;
        let control_listen = cfg.require_addr("control_listen")?;
        if capture_listen == control_listen {
            return Err(AgentError::Startup(
                "capture_listen and control_listen must differ".into(),
            ));
        }
        let warehouse = cfg.require_addr("warehouse_endpoint")?;
        let identity_dir = cfg
            .get_path("identity_path")
            .ok_or(ConfigError::Missing("identity_path".into()))?;
        let keyring_dir = cfg
            .get_path("keyring_path")
            .ok_or(ConfigError::Missing("keyring_path".into()))?;
        let filter = LogFilter::parse(cfg.get("log_filter").unwrap_or("*"))
            .map_err(|e| AgentError::Startup(format!("log_filter: {e}")))?;
        let mut controllers = HashSet::new();
        if let Some(list) = cfg.get("controllers") {
            for part in list.split(',') {
                let part = part.trim();
                if !part.is_empty() {
                    controllers.insert(
                        EndpointId::from_hex(part)
                            .map_err(|e| AgentError::Startup(format!("controllers: {e}")))?,
                    );
                }
            }
        }
        let ttl_kilobits = cfg.get_u64("ttl_kilobits", crate::channel::DEFAULT_TTL_KILOBITS)?;
        if ttl_kilobits == 0 {
            return Err(AgentError::Startup("ttl_kilobits must be positive".into()));
        }
        let link = LinkParams {
            ttl_kilobits,
            replay_width: cfg.get_u64("replay_window", 64)?,
            validity_secs: cfg.get_u64("validity_secs", 60)?,
        };
        let mut device_meta: HashMap<EndpointId, DeviceMeta> = HashMap::new();
        for key in cfg.keys() {
            if let Some(rest) = key.strip_prefix("device.") {
                if let Some((hex, field)) = rest.split_once('.') {
                    if let Ok(id) = EndpointId::from_hex(hex) {
                        let entry = device_meta.entry(id).or_default();
                        let value = cfg.get(key).unwrap_or("").to_string();
                        match field {
                            "type" => entry.device_type = Some(value),
                            "geo" => entry.geo_location = Some(value),
                            _ => {}
                        }
                    }
                }
            }
        }
        let discovery = match cfg.get("discovery").unwrap_or("off") {
            "off" => None,
            "v4" => Some(false),
            "v6" => Some(true),
            other => {
                return Err(AgentError::Startup(format!(
                    "discovery must be off, v4 or v6, got {other}"
                )))
            }
        };
        Ok(AgentSettings {
            capture_listen,
            control_listen,
            warehouse,
            identity_dir,
            keyring_dir,
            filter,
            controllers,
            link,
            batch_group: cfg.get_u64("batch_size", DEFAULT_BATCH_GROUP as u64)? as usize,
            theta: cfg.get_f64("theta", DEFAULT_THETA)?,
            learning_window: cfg.get_u64("learning_window", DEFAULT_LEARNING_WINDOW as u64)? as usize,
            forward_queue: cfg.get_u64("forward_queue", DEFAULT_FORWARD_QUEUE as u64)? as usize,
            device_meta,
            discovery,
            advertise_endpoint: cfg.get("advertise_endpoint").map(str::to_string),
        })
    }
}

struct ForwardItem {
    envelope: Vec<u8>,
}

struct AgentCtx {
    identity: Arc<EndpointIdentity>,
    keyring: Arc<Keyring>,
    runtime: RwLock<RuntimeParams>,
    counters: Arc<AgentCounters>,
    stop: AtomicBool,
    controllers: HashSet<EndpointId>,
    control_seen: Mutex<HashMap<EndpointId, u64>>,
    device_meta: HashMap<EndpointId, DeviceMeta>,
    theta: f64,
    learning_window: usize,
}

/// A running agent; `stop` drains in-flight batches before returning.
pub struct AgentHandle {
    capture_addr: SocketAddr,
    control_addr: SocketAddr,
    ctx: Arc<AgentCtx>,
    capture_thread: Option<thread::JoinHandle<()>>,
    control_thread: Option<thread::JoinHandle<()>>,
    forward_thread: Option<thread::JoinHandle<()>>,
    responder: Option<AdmResponder>,
}

impl AgentHandle {
    pub fn capture_addr(&self) -> SocketAddr {
        self.capture_addr
    }

    pub fn control_addr(&self) -> SocketAddr {
        self.control_addr
    }

    pub fn agent_id(&self) -> EndpointId {
        self.ctx.identity.id()
    }

    pub fn counters(&self) -> &Arc<AgentCounters> {
        &self.ctx.counters
    }

    /// Graceful shutdown: stop accepting, let device workers finish their
    /// current batch, then drain the forward queue to the warehouse.
    pub fn stop(mut self) {
        self.ctx.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.capture_thread.take() {
            let _ = h.join();
        }
        if let Some(h) = self.forward_thread.take() {
            let _ = h.join();
        }
        if let Some(h) = self.control_thread.take() {
            let _ = h.join();
        }
        if let Some(r) = self.responder.take() {
            r.stop();
        }
    }
}

/// Start the agent service: bind the capture and control listeners,
/// answer ADMs when discovery is enabled, and run one exclusive worker
/// per connected device.
pub fn start_agent(settings: AgentSettings) -> Result<AgentHandle, AgentError> {
    let identity = Arc::new(load_identity(&settings.identity_dir, Role::Agent)?);
    identity
        .certificate()
        .map_err(|_| AgentError::Startup("agent identity has no certificate".into()))?;
    let keyring = Arc::new(Keyring::open(&settings.keyring_dir)?);

    let capture = TcpListener::bind(settings.capture_listen)
        .map_err(|e| AgentError::Startup(format!("bind {}: {e}", settings.capture_listen)))?;
    let control = TcpListener::bind(settings.control_listen)
        .map_err(|e| AgentError::Startup(format!("bind {}: {e}", settings.control_listen)))?;
    let capture_addr = capture.local_addr()?;
    let control_addr = control.local_addr()?;
    capture.set_nonblocking(true)?;
    control.set_nonblocking(true)?;

    let ctx = Arc::new(AgentCtx {
        identity: identity.clone(),
        keyring: keyring.clone(),
        runtime: RwLock::new(RuntimeParams {
            warehouse: settings.warehouse,
            filter: settings.filter.clone(),
            link: settings.link.clone(),
            batch_group: settings.batch_group,
            sig_proto: wire::SIG_SHA256_RSA,
            enc_proto: wire::ENC_AES128,
        }),
        counters: Arc::new(AgentCounters::default()),
        stop: AtomicBool::new(false),
        controllers: settings.controllers.clone(),
        control_seen: Mutex::new(HashMap::new()),
        device_meta: settings.device_meta.clone(),
        theta: settings.theta,
        learning_window: settings.learning_window,
    });

    let responder = match settings.discovery {
        Some(ipv6) => {
            let advertised = settings
                .advertise_endpoint
                .clone()
                .unwrap_or_else(|| capture_addr.to_string());
            match AdmResponder::start(identity, keyring, ipv6, advertised) {
                Ok(r) => Some(r),
                Err(e) => {
                    eprintln!("agent: discovery responder unavailable: {e}");
                    None
                }
            }
        }
        None => None,
    };

    let (tx, rx) = bounded::<ForwardItem>(settings.forward_queue.max(1));

    let capture_ctx = ctx.clone();
    let capture_thread = thread::spawn(move || {
        let mut workers: Vec<thread::JoinHandle<()>> = Vec::new();
        while !capture_ctx.stop.load(Ordering::Relaxed) {
            match capture.accept() {
                Ok((stream, _)) => {
                    let _ = stream.set_nonblocking(false);
                    let ctx = capture_ctx.clone();
                    let tx = tx.clone();
                    workers.push(thread::spawn(move || device_worker(stream, ctx, tx)));
                }
                Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(20));
                }
                Err(_) => break,
            }
        }
        drop(tx);
        for worker in workers {
            let _ = worker.join();
        }
    });

    let control_ctx = ctx.clone();
    let control_thread = thread::spawn(move || {
        while !control_ctx.stop.load(Ordering::Relaxed) {
            match control.accept() {
                Ok((stream, _)) => {
                    let _ = stream.set_nonblocking(false);
                    control_worker(stream, &control_ctx);
                }
                Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(20));
                }
                Err(_) => break,
            }
        }
    });

    let forward_ctx = ctx.clone();
    let forward_thread = thread::spawn(move || forward_worker(forward_ctx, rx));

    Ok(AgentHandle {
        capture_addr,
        control_addr,
        ctx,
        capture_thread: Some(capture_thread),
        control_thread: Some(control_thread),
        forward_thread: Some(forward_thread),
        responder,
    })
}

/// Device batch payload: `batch_serial u64 | newline-joined UTF-8 lines`.
/// The serial is device-assigned and unique across reconnects, so the
/// warehouse can deduplicate retransmissions.
pub fn encode_device_batch(serial: u64, lines: &[String]) -> Vec<u8> {
    let mut out = serial.to_be_bytes().to_vec();
    out.extend_from_slice(lines.join("\n").as_bytes());
    out
}

pub fn parse_device_batch(payload: &[u8]) -> Option<(u64, Vec<String>)> {
    if payload.len() < 8 {
        return None;
    }
    let serial = u64::from_be_bytes(payload[..8].try_into().unwrap());
    let text = std::str::from_utf8(&payload[8..]).ok()?;
    Some((serial, text.split('\n').map(str::to_string).collect()))
}

fn device_worker(stream: TcpStream, ctx: Arc<AgentCtx>, tx: Sender<ForwardItem>) {
    let (link_params, filter, theta, window) = {
        let rt = ctx.runtime.read().expect("runtime lock");
        (rt.link.clone(), rt.filter.clone(), ctx.theta, ctx.learning_window)
    };
    let mut policy = |id: EndpointId| {
        if filter.permits(id) {
            Ok(())
        } else {
            Err(format!("device {id} excluded by log filter"))
        }
    };
    let mut link = match SecureLink::accept(
        stream,
        ctx.identity.clone(),
        &ctx.keyring,
        &link_params,
        &mut policy,
    ) {
        Ok(link) => link,
        Err(_) => {
            ctx.counters.auth_failures.fetch_add(1, Ordering::Relaxed);
            return;
        }
    };
    ctx.counters.sessions_total.fetch_add(1, Ordering::Relaxed);
    ctx.counters.sessions_active.fetch_add(1, Ordering::Relaxed);
    let device_id = link.peer_id();
    let peer_desc = link
        .peer_addr()
        .map(|a| a.to_string())
        .unwrap_or_else(|_| "unknown".into());
    let mut processor = LineProcessor::new(theta, window);
    let _ = link.set_read_timeout(Some(Duration::from_millis(200)));

    loop {
        if ctx.stop.load(Ordering::Relaxed) {
            break;
        }
        match link.recv_event() {
            Err(TransportError::Timeout) => continue,
            Err(_) => break,
            Ok(Event::Rekeyed) => {
                ctx.counters.rekeys.fetch_add(1, Ordering::Relaxed);
            }
            Ok(Event::Rejected { reason, .. }) => {
                ctx.counters.count_reject(reason);
            }
            Ok(Event::Message(inbound)) if inbound.msg_type == wire::LOG_BATCH => {
                if !inbound.signed {
                    ctx.counters.count_reject(RejectReason::Unsigned);
                    continue;
                }
                let Some((serial, lines)) = parse_device_batch(&inbound.payload) else {
                    let _ = link.send_error(err_code::PROTOCOL, "bad batch payload");
                    continue;
                };
                match process_device_batch(
                    &ctx, &mut processor, device_id, &peer_desc, &lines, serial,
                    inbound.received_ms, link.clock_offset_ms(),
                ) {
                    Ok(envelope) => {
                        // blocks when the forward queue is full: that is
                        // the backpressure the device sees as a late ack
                        if tx.send(ForwardItem { envelope }).is_err() {
                            break;
                        }
                        ctx.counters.batches_received.fetch_add(1, Ordering::Relaxed);
                        let _ = link.send_ack(inbound.message_id);
                    }
                    Err(e) => {
                        let _ = link.send_error(err_code::PROTOCOL, &e.to_string());
                    }
                }
            }
            Ok(Event::Message(other)) => {
                let _ = link.send_error(
                    err_code::PROTOCOL,
                    &format!("unexpected message type {}", other.msg_type.code()),
                );
            }
        }
    }
    ctx.counters.sessions_active.fetch_sub(1, Ordering::Relaxed);
    link.shutdown();
}

#[allow(clippy::too_many_arguments)]
fn process_device_batch(
    ctx: &AgentCtx,
    processor: &mut LineProcessor,
    device_id: EndpointId,
    peer_desc: &str,
    lines: &[String],
    serial: u64,
    received_ms: u64,
    clock_offset_ms: i64,
) -> Result<Vec<u8>, AgentError> {
    let batch = processor.process_batch(lines)?;
    let metadata = attach_metadata_l1(
        ctx.device_meta.get(&device_id),
        received_ms,
        clock_offset_ms,
        &format!("stream:tcp peer={peer_desc}"),
    );
    let events: Vec<CbeEvent> = batch
        .records
        .iter()
        .map(|r| normalize_to_cbe(r, &batch.dictionary, &metadata, device_id))
        .collect::<Result<_, _>>()?;
    let cbe = events_to_xml(&events);
    let batch_bytes = batch.encode();
    Ok(encode_forward(device_id, serial, &batch_bytes, cbe.as_bytes()))
}

fn connect_warehouse(ctx: &AgentCtx, endpoint: SocketAddr, link: &LinkParams) -> Result<SecureLink, TransportError> {
    let stream = TcpStream::connect(endpoint)?;
    SecureLink::connect(stream, ctx.identity.clone(), &ctx.keyring, link, None)
}

fn forward_worker(ctx: Arc<AgentCtx>, rx: Receiver<ForwardItem>) {
    let mut link: Option<(SocketAddr, SecureLink)> = None;
    loop {
        let first = loop {
            match rx.recv_timeout(Duration::from_millis(100)) {
                Ok(item) => break Some(item),
                Err(crossbeam_channel::RecvTimeoutError::Timeout) => {
                    if ctx.stop.load(Ordering::Relaxed) && rx.is_empty() {
                        break None;
                    }
                }
                Err(crossbeam_channel::RecvTimeoutError::Disconnected) => break None,
            }
        };
        let Some(first) = first else { break };
        let group_max = ctx.runtime.read().expect("runtime lock").batch_group.max(1);
        let mut group = vec![first];
        while group.len() < group_max {
            match rx.try_recv() {
                Ok(item) => group.push(item),
                Err(_) => break,
            }
        }
        if send_group(&ctx, &mut link, &group).is_ok() {
            ctx.counters
                .batches_forwarded
                .fetch_add(group.len() as u64, Ordering::Relaxed);
        }
    }
    if let Some((_, link)) = link {
        link.shutdown();
    }
}

/// Deliver one group to the warehouse, retrying on NAK, lost acks, or a
/// broken session. Retransmission is safe: the warehouse deduplicates on
/// (device, agent, batch serial). In-flight groups finish on the link
/// they started on; a warehouse change applies from the next group.
fn send_group(
    ctx: &AgentCtx,
    link_slot: &mut Option<(SocketAddr, SecureLink)>,
    group: &[ForwardItem],
) -> Result<(), AgentError> {
    let mut attempts = 0u32;
    'retry: loop {
        attempts += 1;
        if attempts > 50 {
            return Err(AgentError::Startup("warehouse unreachable, giving up on group".into()));
        }
        if attempts > 1 {
            thread::sleep(Duration::from_millis(100));
        }
        let (endpoint, link_params) = {
            let rt = ctx.runtime.read().expect("runtime lock");
            (rt.warehouse, rt.link.clone())
        };
        if link_slot.as_ref().map(|(ep, _)| *ep != endpoint).unwrap_or(true) {
            if let Some((_, old)) = link_slot.take() {
                old.shutdown();
            }
            match connect_warehouse(ctx, endpoint, &link_params) {
                Ok(l) => {
                    let _ = l.set_read_timeout(Some(Duration::from_secs(5)));
                    *link_slot = Some((endpoint, l));
                }
                Err(_) => {
                    if ctx.stop.load(Ordering::Relaxed) && attempts > 10 {
                        return Err(AgentError::Startup("warehouse unreachable during drain".into()));
                    }
                    continue 'retry;
                }
            }
        }
        let (_, link) = link_slot.as_mut().expect("connected above");
        let group_mode = group.len() > 1;
        link.set_group_signing(group_mode);

        let mut awaiting: HashSet<u64> = HashSet::new();
        let mut digests: Vec<[u8; 32]> = Vec::with_capacity(group.len());
        for item in group {
            match link.send(wire::LOG_BATCH, item.envelope.clone(), true) {
                Ok((wire_id, digest, _)) => {
                    awaiting.insert(wire_id);
                    digests.push(digest);
                }
                Err(_) => {
                    link_slot.take().map(|(_, l)| l.shutdown());
                    continue 'retry;
                }
            }
        }
        if group_mode {
            let payload = match sign_batch(&ctx.identity, &digests) {
                Ok(p) => p,
                Err(e) => return Err(AgentError::Control(e.to_string())),
            };
            if link.send(wire::BATCH_SIGNATURE, payload, false).is_err() {
                link_slot.take().map(|(_, l)| l.shutdown());
                continue 'retry;
            }
        }
        while !awaiting.is_empty() {
            match link.recv_event() {
                Ok(Event::Message(m)) if m.msg_type == wire::ACK => {
                    if let Ok(ref_id) = crate::transport::parse_ack(&m.payload) {
                        awaiting.remove(&ref_id);
                    }
                }
                Ok(Event::Message(m)) if m.msg_type == wire::ERROR => {
                    let (code, _) = parse_error(&m.payload).unwrap_or((0, String::new()));
                    match code {
                        err_code::BUSY => {
                            thread::sleep(Duration::from_millis(200));
                            continue 'retry;
                        }
                        // group signature or per-message signature failed:
                        // everything affected goes again
                        _ => continue 'retry,
                    }
                }
                Ok(_) => continue,
                Err(TransportError::Timeout) => continue 'retry, // lost acks: retransmit
                Err(_) => {
                    link_slot.take().map(|(_, l)| l.shutdown());
                    continue 'retry;
                }
            }
        }
        return Ok(());
    }
}

// --- control interface --------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlVerb {
    SetWarehouse,
    SetLogFilter,
    SetCrypto,
    GetStatus,
}

impl ControlVerb {
    pub fn parse(s: &str) -> Option<ControlVerb> {
        match s {
            "SET_WAREHOUSE" => Some(ControlVerb::SetWarehouse),
            "SET_LOG_FILTER" => Some(ControlVerb::SetLogFilter),
            "SET_CRYPTO" => Some(ControlVerb::SetCrypto),
            "GET_STATUS" => Some(ControlVerb::GetStatus),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ControlVerb::SetWarehouse => "SET_WAREHOUSE",
            ControlVerb::SetLogFilter => "SET_LOG_FILTER",
            ControlVerb::SetCrypto => "SET_CRYPTO",
            ControlVerb::GetStatus => "GET_STATUS",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControlCommand {
    pub verb: ControlVerb,
    pub args: Vec<(String, String)>,
}

impl ControlCommand {
    pub fn arg(&self, key: &str) -> Option<&str> {
        self.args
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

/// Control payload text: first line `verb=<VERB>`, then `key=value` args.
pub fn encode_control_payload(verb: ControlVerb, args: &[(&str, &str)]) -> Vec<u8> {
    let mut text = format!("verb={}\n", verb.as_str());
    for (k, v) in args {
        text.push_str(k);
        text.push('=');
        text.push_str(v);
        text.push('\n');
    }
    text.into_bytes()
}

pub fn parse_control_payload(payload: &[u8]) -> Result<ControlCommand, String> {
    let text = std::str::from_utf8(payload).map_err(|_| "payload not UTF-8".to_string())?;
    let mut lines = text.lines();
    let first = lines.next().ok_or("empty command")?;
    let verb_name = first.strip_prefix("verb=").ok_or("first line must be verb=...")?;
    let verb = ControlVerb::parse(verb_name).ok_or_else(|| format!("unknown verb {verb_name:?}"))?;
    let mut args = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("bad arg line {line:?}"))?;
        args.push((k.to_string(), v.to_string()));
    }
    Ok(ControlCommand { verb, args })
}

/// Apply a parsed, already-authorized command to the runtime parameters.
fn apply_control(ctx: &AgentCtx, cmd: &ControlCommand) -> Result<String, String> {
    match cmd.verb {
        ControlVerb::SetWarehouse => {
            let endpoint: SocketAddr = cmd
                .arg("endpoint")
                .ok_or("missing endpoint")?
                .parse()
                .map_err(|e| format!("bad endpoint: {e}"))?;
            ctx.runtime.write().expect("runtime lock").warehouse = endpoint;
            Ok(format!("warehouse={endpoint}"))
        }
        ControlVerb::SetLogFilter => {
            let filter = LogFilter::parse(cmd.arg("filter").ok_or("missing filter")?)?;
            ctx.runtime.write().expect("runtime lock").filter = filter;
            Ok("filter updated".into())
        }
        ControlVerb::SetCrypto => {
            let mut rt = ctx.runtime.write().expect("runtime lock");
            let mut changed = Vec::new();
            if let Some(v) = cmd.arg("ttl_kilobits") {
                let ttl: u64 = v.parse().map_err(|e| format!("ttl_kilobits: {e}"))?;
                if ttl == 0 {
                    return Err("ttl_kilobits must be positive".into());
                }
                rt.link.ttl_kilobits = ttl;
                changed.push("ttl_kilobits");
            }
            if let Some(v) = cmd.arg("batch_size") {
                rt.batch_group = v.parse().map_err(|e| format!("batch_size: {e}"))?;
                changed.push("batch_size");
            }
            if let Some(v) = cmd.arg("sig_proto") {
                rt.sig_proto = v.parse().map_err(|e| format!("sig_proto: {e}"))?;
                changed.push("sig_proto");
            }
            if let Some(v) = cmd.arg("enc_proto") {
                rt.enc_proto = v.parse().map_err(|e| format!("enc_proto: {e}"))?;
                changed.push("enc_proto");
            }
            Ok(format!("applies to new sessions: {}", changed.join(",")))
        }
        ControlVerb::GetStatus => {
            let mut out = String::new();
            for (name, value) in ctx.counters.snapshot() {
                out.push_str(&format!("{name}={value}\n"));
            }
            Ok(out)
        }
    }
}

/// One-shot control connection: one signed CONTROL_COMMAND in, one signed
/// reply out. Unsigned or unauthorized commands are rejected before the
/// arguments are even parsed.
fn control_worker(stream: TcpStream, ctx: &AgentCtx) {
    let mut fs = FrameStream::new(stream);
    let _ = fs.set_read_timeout(Some(Duration::from_secs(5)));
    let Ok(message) = fs.read_message() else {
        return;
    };
    let reply = control_reply(ctx, &message);
    let mut out = WireMessage::new(
        if reply.is_ok() { wire::ACK } else { wire::ERROR },
        ctx.identity.id(),
        message.sender,
    );
    out.message_id = timeutil::now_millis();
    out.validity = timeutil::now_secs() + 30;
    out.payload = match reply {
        Ok(text) => {
            let mut p = message.message_id.to_be_bytes().to_vec();
            p.extend_from_slice(text.as_bytes());
            p
        }
        Err((code, detail)) => encode_error(code, &detail),
    };
    if let Ok(range) = out.signed_range() {
        out.signature = ctx.identity.sign(&range);
    }
    let _ = fs.write_message(&out);
    fs.shutdown();
}

fn control_reply(ctx: &AgentCtx, message: &WireMessage) -> Result<String, (u8, String)> {
    if message.msg_type != wire::CONTROL_COMMAND {
        return Err((err_code::PROTOCOL, "expected CONTROL_COMMAND".into()));
    }
    if message.receiver != ctx.identity.id() {
        return Err((err_code::PROTOCOL, "wrong receiver".into()));
    }
    if wire::is_expired(message, timeutil::now_secs()) {
        return Err((err_code::EXPIRED, "command expired".into()));
    }
    // authorization gate comes before any argument parsing
    if !ctx.controllers.contains(&message.sender) {
        return Err((err_code::AUTH_FAILED, "sender is not an authorized controller".into()));
    }
    let Some(key) = ctx.keyring.public_key_of(&message.sender) else {
        return Err((err_code::UNKNOWN_SENDER, "controller certificate unknown".into()));
    };
    let Ok(range) = message.signed_range() else {
        return Err((err_code::PROTOCOL, "unencodable message".into()));
    };
    if message.signature.is_empty()
        || !crate::channel::verify_message(&key, &range, &message.signature)
    {
        return Err((err_code::BAD_SIGNATURE, "command signature invalid".into()));
    }
    {
        let mut seen = ctx.control_seen.lock().expect("control seen lock");
        let last = seen.entry(message.sender).or_insert(0);
        if message.message_id <= *last {
            return Err((err_code::REPLAY, "stale control serial".into()));
        }
        *last = message.message_id;
    }
    let cmd = parse_control_payload(&message.payload).map_err(|e| (err_code::PROTOCOL, e))?;
    ctx.counters.control_commands.fetch_add(1, Ordering::Relaxed);
    apply_control(ctx, &cmd).map_err(|e| (err_code::PROTOCOL, e))
}

// Strictly increasing even when commands fire within one millisecond;
// the agent's per-controller replay gate requires it.
fn next_control_serial() -> u64 {
    static LAST: AtomicU64 = AtomicU64::new(0);
    let now = timeutil::now_millis();
    let mut prev = LAST.load(Ordering::Relaxed);
    loop {
        let next = now.max(prev + 1);
        match LAST.compare_exchange_weak(prev, next, Ordering::Relaxed, Ordering::Relaxed) {
            Ok(_) => return next,
            Err(actual) => prev = actual,
        }
    }
}

/// Send one control command to an agent and return its textual reply.
/// The reply signature is verified against the agent's keyring entry.
pub fn send_control(
    control_addr: SocketAddr,
    agent_id: EndpointId,
    me: &EndpointIdentity,
    keyring: &Keyring,
    verb: ControlVerb,
    args: &[(&str, &str)],
) -> Result<String, AgentError> {
    let stream = TcpStream::connect(control_addr).map_err(AgentError::Io)?;
    let mut fs = FrameStream::new(stream);
    fs.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut message = WireMessage::new(wire::CONTROL_COMMAND, me.id(), agent_id);
    message.message_id = next_control_serial();
    message.validity = timeutil::now_secs() + 30;
    message.payload = encode_control_payload(verb, args);
    message.signature = me.sign(
        &message
            .signed_range()
            .map_err(TransportError::Wire)?,
    );
    fs.write_message(&message)?;
    let reply = fs.read_message()?;
    if reply.sender != agent_id {
        return Err(AgentError::Control("reply from unexpected sender".into()));
    }
    let key = keyring
        .public_key_of(&agent_id)
        .ok_or_else(|| AgentError::Control("agent certificate not in keyring".into()))?;
    let range = reply.signed_range().map_err(TransportError::Wire)?;
    if !crate::channel::verify_message(&key, &range, &reply.signature) {
        return Err(AgentError::Control("reply signature invalid".into()));
    }
    match reply.msg_type {
        t if t == wire::ACK => {
            if reply.payload.len() < 8 {
                return Err(AgentError::Control("short control reply".into()));
            }
            let echoed = u64::from_be_bytes(reply.payload[..8].try_into().unwrap());
            if echoed != message.message_id {
                return Err(AgentError::Control("reply references another command".into()));
            }
            Ok(String::from_utf8_lossy(&reply.payload[8..]).into_owned())
        }
        t if t == wire::ERROR => {
            let (code, detail) = parse_error(&reply.payload)
                .map_err(|e| AgentError::Control(e.to_string()))?;
            Err(AgentError::Control(format!("agent rejected command ({code}): {detail}")))
        }
        _ => Err(AgentError::Control("unexpected reply type".into())),
    }
}
