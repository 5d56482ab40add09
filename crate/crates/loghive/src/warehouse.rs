//! Warehouse server: accepts agent sessions over the transport protocol,
//! verifies signatures and freshness, and persists batches in a
//! syslog-like append-only store, one file per originating device.
//!
//! Store layout, per device `<hexid>.log`:
//!
//! ```text
//! record := body_len u32 | body | sha256(body) 32B
//! body   := agent_id 20B | batch_serial u64 | received_at u64 |
//!           batch_len u32 | batch | cbe_len u32 | cbe
//! ```
//!
//! plus `<hexid>.idx` holding `(agent_id, batch_serial, offset)` entries
//! for duplicate suppression. The log file is authoritative: on open it
//! is scanned and a torn tail from a crashed write is truncated; the
//! index is rebuilt whenever it disagrees.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::channel::verify_batch;
use crate::identity::{load_identity, EndpointId, IdentityError, Keyring, Role};
use crate::pipeline::{CompressedBatch, PipelineError};
use crate::timeutil;
use crate::transport::{
    err_code, Event, LinkParams, SecureLink, TransportError,
};
use crate::wire;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corruption at offset {offset}: {detail}")]
    Corruption { offset: u64, detail: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, thiserror::Error)]
pub enum WarehouseError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error("startup: {0}")]
    Startup(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One persisted record, as read back from a device log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredRecord {
    pub agent_id: EndpointId,
    pub batch_serial: u64,
    pub received_at: u64,
    pub batch: Vec<u8>,
    pub cbe: Vec<u8>,
    pub offset: u64,
}

pub enum AppendOutcome {
    Stored { offset: u64 },
    Duplicate,
}

/// Parse one record from `bytes`, returning it (without offset) and the
/// bytes consumed. `Ok(None)` means the buffer ends in a torn tail.
pub fn parse_record(bytes: &[u8]) -> Result<Option<(StoredRecord, usize)>, StoreError> {
    if bytes.len() < 4 {
        return Ok(None);
    }
    let body_len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
    let total = 4usize
        .checked_add(body_len)
        .and_then(|n| n.checked_add(32))
        .ok_or(StoreError::Corruption {
            offset: 0,
            detail: "record length overflow".into(),
        })?;
    if bytes.len() < total {
        return Ok(None);
    }
    let body = &bytes[4..4 + body_len];
    let digest = &bytes[4 + body_len..total];
    if Sha256::digest(body).as_slice() != digest {
        return Err(StoreError::Corruption {
            offset: 0,
            detail: "record digest mismatch".into(),
        });
    }
    if body_len < 20 + 8 + 8 + 4 {
        return Err(StoreError::Corruption {
            offset: 0,
            detail: "record body too short".into(),
        });
    }
    let agent_id = EndpointId::new(body[..20].try_into().unwrap());
    let batch_serial = u64::from_be_bytes(body[20..28].try_into().unwrap());
    let received_at = u64::from_be_bytes(body[28..36].try_into().unwrap());
    let batch_len = u32::from_be_bytes(body[36..40].try_into().unwrap()) as usize;
    let rest = &body[40..];
    if rest.len() < batch_len + 4 {
        return Err(StoreError::Corruption {
            offset: 0,
            detail: "batch length exceeds record".into(),
        });
    }
    let batch = rest[..batch_len].to_vec();
    let cbe_len = u32::from_be_bytes(rest[batch_len..batch_len + 4].try_into().unwrap()) as usize;
    if rest.len() != batch_len + 4 + cbe_len {
        return Err(StoreError::Corruption {
            offset: 0,
            detail: "cbe length does not match record".into(),
        });
    }
    let cbe = rest[batch_len + 4..].to_vec();
    Ok(Some((
        StoredRecord {
            agent_id,
            batch_serial,
            received_at,
            batch,
            cbe,
            offset: 0,
        },
        total,
    )))
}

fn encode_record_body(
    agent_id: EndpointId,
    batch_serial: u64,
    received_at: u64,
    batch: &[u8],
    cbe: &[u8],
) -> Vec<u8> {
    let mut body = Vec::with_capacity(40 + batch.len() + 4 + cbe.len());
    body.extend_from_slice(agent_id.as_bytes());
    body.extend_from_slice(&batch_serial.to_be_bytes());
    body.extend_from_slice(&received_at.to_be_bytes());
    body.extend_from_slice(&(batch.len() as u32).to_be_bytes());
    body.extend_from_slice(batch);
    body.extend_from_slice(&(cbe.len() as u32).to_be_bytes());
    body.extend_from_slice(cbe);
    body
}

#[derive(Debug)]
struct DeviceFile {
    log: File,
    index: File,
    len: u64,
    seen: HashSet<(EndpointId, u64)>,
}

/// Append-only per-device record store.
#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    devices: HashMap<EndpointId, DeviceFile>,
}

impl Store {
    pub fn open(dir: &Path) -> Result<Store, StoreError> {
        std::fs::create_dir_all(dir)?;
        let mut store = Store {
            dir: dir.to_path_buf(),
            devices: HashMap::new(),
        };
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().map(|e| e == "log").unwrap_or(false) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    if let Ok(id) = EndpointId::from_hex(stem) {
                        ids.push(id);
                    }
                }
            }
        }
        for id in ids {
            store.open_device(id)?;
        }
        Ok(store)
    }

    fn log_path(&self, device: EndpointId) -> PathBuf {
        self.dir.join(format!("{}.log", device.to_hex()))
    }

    fn idx_path(&self, device: EndpointId) -> PathBuf {
        self.dir.join(format!("{}.idx", device.to_hex()))
    }

    /// Open (or create) a device file, scanning the log to rebuild the
    /// dedup set and truncating any torn tail left by a crash.
    fn open_device(&mut self, device: EndpointId) -> Result<&mut DeviceFile, StoreError> {
        if !self.devices.contains_key(&device) {
            let log_path = self.log_path(device);
            let mut log = OpenOptions::new()
                .read(true)
                .append(true)
                .create(true)
                .open(&log_path)?;
            let mut bytes = Vec::new();
            log.seek(SeekFrom::Start(0))?;
            log.read_to_end(&mut bytes)?;

            let mut seen = HashSet::new();
            let mut offset = 0u64;
            let mut entries = Vec::new();
            while (offset as usize) < bytes.len() {
                match parse_record(&bytes[offset as usize..]) {
                    Ok(Some((record, used))) => {
                        seen.insert((record.agent_id, record.batch_serial));
                        entries.push((record.agent_id, record.batch_serial, offset));
                        offset += used as u64;
                    }
                    Ok(None) => {
                        // torn tail from an interrupted write: drop it
                        log.set_len(offset)?;
                        break;
                    }
                    Err(StoreError::Corruption { detail, .. }) => {
                        return Err(StoreError::Corruption { offset, detail });
                    }
                    Err(e) => return Err(e),
                }
            }
            drop(log);
            let log = OpenOptions::new().read(true).append(true).open(&log_path)?;

            // the index is derived state; rewrite it from the scan
            let mut index = OpenOptions::new()
                .write(true)
                .create(true)
                .truncate(true)
                .open(self.idx_path(device))?;
            for (agent, serial, at) in &entries {
                index.write_all(agent.as_bytes())?;
                index.write_all(&serial.to_be_bytes())?;
                index.write_all(&at.to_be_bytes())?;
            }
            index.flush()?;

            self.devices.insert(
                device,
                DeviceFile {
                    log,
                    index,
                    len: offset,
                    seen,
                },
            );
        }
        Ok(self.devices.get_mut(&device).expect("inserted above"))
    }

    /// Append one batch record; duplicates by (agent, serial) are
    /// suppressed. The record is fsynced before returning so an ACK sent
    /// afterwards never refers to unsaved data.
    pub fn append(
        &mut self,
        device: EndpointId,
        agent: EndpointId,
        batch_serial: u64,
        received_at: u64,
        batch: &[u8],
        cbe: &[u8],
    ) -> Result<AppendOutcome, StoreError> {
        let file = self.open_device(device)?;
        if file.seen.contains(&(agent, batch_serial)) {
            return Ok(AppendOutcome::Duplicate);
        }
        let body = encode_record_body(agent, batch_serial, received_at, batch, cbe);
        let digest = Sha256::digest(&body);
        let offset = file.len;
        file.log.write_all(&(body.len() as u32).to_be_bytes())?;
        file.log.write_all(&body)?;
        file.log.write_all(&digest)?;
        file.log.sync_data()?;
        file.len += 4 + body.len() as u64 + 32;
        file.seen.insert((agent, batch_serial));
        file.index.write_all(agent.as_bytes())?;
        file.index.write_all(&batch_serial.to_be_bytes())?;
        file.index.write_all(&offset.to_be_bytes())?;
        file.index.flush()?;
        Ok(AppendOutcome::Stored { offset })
    }

    pub fn device_ids(&self) -> Vec<EndpointId> {
        let mut ids: Vec<EndpointId> = self.devices.keys().copied().collect();
        ids.sort();
        ids
    }

    /// All records for a device, in append order.
    pub fn records(&mut self, device: EndpointId) -> Result<Vec<StoredRecord>, StoreError> {
        let path = self.log_path(device);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let bytes = std::fs::read(&path)?;
        let mut records = Vec::new();
        let mut offset = 0u64;
        while (offset as usize) < bytes.len() {
            match parse_record(&bytes[offset as usize..]) {
                Ok(Some((mut record, used))) => {
                    record.offset = offset;
                    records.push(record);
                    offset += used as u64;
                }
                Ok(None) => break,
                Err(StoreError::Corruption { detail, .. }) => {
                    return Err(StoreError::Corruption { offset, detail });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(records)
    }

    pub fn record_count(&mut self, device: EndpointId) -> Result<usize, StoreError> {
        Ok(self.records(device)?.len())
    }

    /// Reconstruct the original lines for a device, optionally restricted
    /// to an inclusive 1-based line range. Unknown devices yield nothing.
    pub fn read_device_log(
        &mut self,
        device: EndpointId,
        range: Option<(u64, u64)>,
    ) -> Result<Vec<String>, StoreError> {
        let mut lines = Vec::new();
        for record in self.records(device)? {
            let batch = CompressedBatch::decode(&record.batch)?;
            lines.extend(batch.decompress()?);
        }
        if let Some((start, end)) = range {
            let start = start.max(1) as usize;
            let end = (end as usize).min(lines.len());
            if start > end {
                return Ok(Vec::new());
            }
            return Ok(lines[start - 1..end].to_vec());
        }
        Ok(lines)
    }
}

// --- forward envelope (agent → warehouse payload) ----------------------

/// Encode the forwarded-batch payload:
/// `device_id 20B | batch_serial u64 | batch_len u32 | batch | cbe_len u32 | cbe`.
pub fn encode_forward(device: EndpointId, batch_serial: u64, batch: &[u8], cbe: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + batch.len() + cbe.len() + 8);
    out.extend_from_slice(device.as_bytes());
    out.extend_from_slice(&batch_serial.to_be_bytes());
    out.extend_from_slice(&(batch.len() as u32).to_be_bytes());
    out.extend_from_slice(batch);
    out.extend_from_slice(&(cbe.len() as u32).to_be_bytes());
    out.extend_from_slice(cbe);
    out
}

pub fn parse_forward(payload: &[u8]) -> Option<(EndpointId, u64, Vec<u8>, Vec<u8>)> {
    if payload.len() < 32 {
        return None;
    }
    let device = EndpointId::new(payload[..20].try_into().unwrap());
    let serial = u64::from_be_bytes(payload[20..28].try_into().unwrap());
    let batch_len = u32::from_be_bytes(payload[28..32].try_into().unwrap()) as usize;
    let rest = &payload[32..];
    if rest.len() < batch_len + 4 {
        return None;
    }
    let batch = rest[..batch_len].to_vec();
    let cbe_len = u32::from_be_bytes(rest[batch_len..batch_len + 4].try_into().unwrap()) as usize;
    if rest.len() != batch_len + 4 + cbe_len {
        return None;
    }
    let cbe = rest[batch_len + 4..].to_vec();
    Some((device, serial, batch, cbe))
}

// --- server runtime -----------------------------------------------------

#[derive(Debug, Clone)]
pub struct WarehouseSettings {
    pub listen: SocketAddr,
    pub identity_dir: PathBuf,
    pub keyring_dir: PathBuf,
    pub store_dir: PathBuf,
    pub link: LinkParams,
}

#[derive(Debug, Default)]
pub struct WarehouseCounters {
    pub sessions: AtomicU64,
    pub batches_stored: AtomicU64,
    pub duplicates: AtomicU64,
    pub group_naks: AtomicU64,
    pub rejects: AtomicU64,
}

/// A running warehouse; dropping or stopping it shuts the listener down
/// and joins every session worker.
pub struct WarehouseHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<thread::JoinHandle<()>>,
    store: Arc<Mutex<Store>>,
    counters: Arc<WarehouseCounters>,
}

impl WarehouseHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn counters(&self) -> &Arc<WarehouseCounters> {
        &self.counters
    }

    pub fn store(&self) -> &Arc<Mutex<Store>> {
        &self.store
    }

    pub fn read_device_log(
        &self,
        device: EndpointId,
        range: Option<(u64, u64)>,
    ) -> Result<Vec<String>, StoreError> {
        self.store.lock().expect("store lock").read_device_log(device, range)
    }

    pub fn stop(mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

/// Start the warehouse service: bind, then accept one worker per agent
/// session. Identity and keyring failures are startup errors.
pub fn start_warehouse(settings: WarehouseSettings) -> Result<WarehouseHandle, WarehouseError> {
    let identity = Arc::new(load_identity(&settings.identity_dir, Role::Server)?);
    identity
        .certificate()
        .map_err(|_| WarehouseError::Startup("warehouse identity has no certificate".into()))?;
    let keyring = Arc::new(Keyring::open(&settings.keyring_dir)?);
    let store = Arc::new(Mutex::new(Store::open(&settings.store_dir)?));
    let counters = Arc::new(WarehouseCounters::default());

    let listener = TcpListener::bind(settings.listen)
        .map_err(|e| WarehouseError::Startup(format!("bind {}: {e}", settings.listen)))?;
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;

    let stop = Arc::new(AtomicBool::new(false));
    let accept_stop = stop.clone();
    let accept_store = store.clone();
    let accept_counters = counters.clone();
    let link = settings.link.clone();

    let accept_thread = thread::spawn(move || {
        let mut workers: Vec<thread::JoinHandle<()>> = Vec::new();
        while !accept_stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let _ = stream.set_nonblocking(false);
                    let identity = identity.clone();
                    let keyring = keyring.clone();
                    let store = accept_store.clone();
                    let counters = accept_counters.clone();
                    let stop = accept_stop.clone();
                    let link = link.clone();
                    workers.push(thread::spawn(move || {
                        session_worker(stream, identity, keyring, link, store, counters, stop);
                    }));
                }
                Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(20));
                }
                Err(_) => break,
            }
        }
        for worker in workers {
            let _ = worker.join();
        }
    });

    Ok(WarehouseHandle {
        addr,
        stop,
        accept_thread: Some(accept_thread),
        store,
        counters,
    })
}

struct PendingBatch {
    wire_id: u64,
    digest: [u8; 32],
    payload: Vec<u8>,
}

fn session_worker(
    stream: std::net::TcpStream,
    identity: Arc<crate::identity::EndpointIdentity>,
    keyring: Arc<Keyring>,
    link_params: LinkParams,
    store: Arc<Mutex<Store>>,
    counters: Arc<WarehouseCounters>,
    stop: Arc<AtomicBool>,
) {
    let mut link = match SecureLink::accept(stream, identity, &keyring, &link_params, &mut |_| Ok(())) {
        Ok(link) => link,
        Err(_) => {
            counters.rejects.fetch_add(1, Ordering::Relaxed);
            return;
        }
    };
    counters.sessions.fetch_add(1, Ordering::Relaxed);
    let agent_id = link.peer_id();
    let agent_key = keyring.public_key_of(&agent_id);
    let _ = link.set_read_timeout(Some(Duration::from_millis(200)));
    let mut pending: Vec<PendingBatch> = Vec::new();

    loop {
        if stop.load(Ordering::Relaxed) {
            break;
        }
        match link.recv_event() {
            Err(TransportError::Timeout) => continue,
            Err(_) => break,
            Ok(Event::Rekeyed) => continue,
            Ok(Event::Rejected { reason, message_id }) => {
                counters.rejects.fetch_add(1, Ordering::Relaxed);
                if matches!(reason, crate::transport::RejectReason::BadSignature) {
                    let _ = link.send_error(err_code::BAD_SIGNATURE, &message_id.to_string());
                }
            }
            Ok(Event::Message(inbound)) => match inbound.msg_type {
                t if t == wire::LOG_BATCH && inbound.signed => {
                    handle_batch(&mut link, &store, &counters, agent_id, inbound.message_id, &inbound.payload);
                }
                t if t == wire::LOG_BATCH => {
                    pending.push(PendingBatch {
                        wire_id: inbound.message_id,
                        digest: inbound.digest,
                        payload: inbound.payload,
                    });
                }
                t if t == wire::BATCH_SIGNATURE => {
                    let digests: Vec<[u8; 32]> = pending.iter().map(|p| p.digest).collect();
                    let verified = match &agent_key {
                        Some(key) => verify_batch(&inbound.payload, &digests, key).is_ok(),
                        None => false,
                    };
                    if verified {
                        let batches = std::mem::take(&mut pending);
                        for batch in batches {
                            handle_batch(&mut link, &store, &counters, agent_id, batch.wire_id, &batch.payload);
                        }
                    } else {
                        // the whole group must come again
                        counters.group_naks.fetch_add(1, Ordering::Relaxed);
                        pending.clear();
                        let _ = link.send_error(err_code::GROUP_RETRANSMIT, "group signature invalid");
                    }
                }
                _ => {
                    let _ = link.send_error(err_code::PROTOCOL, "unexpected message type");
                }
            },
        }
    }
    link.shutdown();
}

fn handle_batch(
    link: &mut SecureLink,
    store: &Arc<Mutex<Store>>,
    counters: &Arc<WarehouseCounters>,
    agent_id: EndpointId,
    wire_id: u64,
    payload: &[u8],
) {
    let Some((device, serial, batch_bytes, cbe)) = parse_forward(payload) else {
        let _ = link.send_error(err_code::PROTOCOL, "bad forward envelope");
        return;
    };
    // reject batches that cannot be decompressed rather than storing junk
    if CompressedBatch::decode(&batch_bytes).is_err() {
        let _ = link.send_error(err_code::PROTOCOL, "undecodable batch");
        return;
    }
    let outcome = store.lock().expect("store lock").append(
        device,
        agent_id,
        serial,
        timeutil::now_secs(),
        &batch_bytes,
        &cbe,
    );
    match outcome {
        Ok(AppendOutcome::Stored { .. }) => {
            counters.batches_stored.fetch_add(1, Ordering::Relaxed);
            let _ = link.send_ack(wire_id);
        }
        Ok(AppendOutcome::Duplicate) => {
            // the agent retransmitted something already safe: ack again
            counters.duplicates.fetch_add(1, Ordering::Relaxed);
            let _ = link.send_ack(wire_id);
        }
        Err(_) => {
            let _ = link.send_error(err_code::BUSY, "store append failed; retry later");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn id(b: u8) -> EndpointId {
        EndpointId::new([b; 20])
    }

    fn sample_batch(lines: &[&str]) -> Vec<u8> {
        let mut dict = crate::pipeline::TemplateDictionary::learn(lines, 0.5).unwrap();
        let records = crate::pipeline::compress(lines, &mut dict);
        CompressedBatch {
            dictionary: dict,
            records,
        }
        .encode()
    }

    #[test]
    fn append_read_back_round_trip() {
        let dir = tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        let batch1 = sample_batch(&["one a", "one b"]);
        let batch2 = sample_batch(&["two a", "two b"]);
        store.append(id(1), id(9), 1, 100, &batch1, b"<x/>").unwrap();
        store.append(id(1), id(9), 2, 101, &batch2, b"<x/>").unwrap();
        let lines = store.read_device_log(id(1), None).unwrap();
        assert_eq!(lines, vec!["one a", "one b", "two a", "two b"]);
        // ranges are 1-based inclusive
        assert_eq!(store.read_device_log(id(1), Some((2, 3))).unwrap(), vec!["one b", "two a"]);
        // unknown device reads back empty
        assert!(store.read_device_log(id(7), None).unwrap().is_empty());
    }

    #[test]
    fn duplicates_are_suppressed_across_reopen() {
        let dir = tempdir().unwrap();
        let batch = sample_batch(&["line x"]);
        {
            let mut store = Store::open(dir.path()).unwrap();
            assert!(matches!(
                store.append(id(1), id(9), 7, 100, &batch, b"").unwrap(),
                AppendOutcome::Stored { .. }
            ));
            assert!(matches!(
                store.append(id(1), id(9), 7, 100, &batch, b"").unwrap(),
                AppendOutcome::Duplicate
            ));
            // same serial from a different agent is a distinct record
            assert!(matches!(
                store.append(id(1), id(8), 7, 100, &batch, b"").unwrap(),
                AppendOutcome::Stored { .. }
            ));
        }
        let mut store = Store::open(dir.path()).unwrap();
        assert!(matches!(
            store.append(id(1), id(9), 7, 100, &batch, b"").unwrap(),
            AppendOutcome::Duplicate
        ));
        assert_eq!(store.record_count(id(1)).unwrap(), 2);
    }

    #[test]
    fn torn_tail_is_truncated_and_offsets_stable() {
        let dir = tempdir().unwrap();
        let batch = sample_batch(&["stable line"]);
        let offsets: Vec<u64> = {
            let mut store = Store::open(dir.path()).unwrap();
            (0..3)
                .map(|i| {
                    match store.append(id(1), id(9), i, 100, &batch, b"").unwrap() {
                        AppendOutcome::Stored { offset } => offset,
                        _ => panic!("dup"),
                    }
                })
                .collect()
        };
        // interrupted write: half a record at the tail
        let log_path = dir.path().join(format!("{}.log", id(1).to_hex()));
        let mut f = OpenOptions::new().append(true).open(&log_path).unwrap();
        f.write_all(&[0, 0, 1, 0, 0xde, 0xad]).unwrap();
        drop(f);

        let mut store = Store::open(dir.path()).unwrap();
        let records = store.records(id(1)).unwrap();
        assert_eq!(records.len(), 3);
        let reread: Vec<u64> = records.iter().map(|r| r.offset).collect();
        assert_eq!(reread, offsets);
        // and appending continues from the recovered tail
        store.append(id(1), id(9), 99, 100, &batch, b"").unwrap();
        assert_eq!(store.record_count(id(1)).unwrap(), 4);
    }

    #[test]
    fn flipped_byte_is_reported_with_offset() {
        let dir = tempdir().unwrap();
        let batch = sample_batch(&["some payload line"]);
        let second_offset = {
            let mut store = Store::open(dir.path()).unwrap();
            store.append(id(1), id(9), 1, 100, &batch, b"").unwrap();
            match store.append(id(1), id(9), 2, 100, &batch, b"").unwrap() {
                AppendOutcome::Stored { offset } => offset,
                _ => panic!("dup"),
            }
        };
        let log_path = dir.path().join(format!("{}.log", id(1).to_hex()));
        let mut bytes = std::fs::read(&log_path).unwrap();
        let at = second_offset as usize + 10; // inside the second record body
        bytes[at] ^= 0xff;
        std::fs::write(&log_path, &bytes).unwrap();

        let err = Store::open(dir.path()).unwrap_err();
        match err {
            StoreError::Corruption { offset, .. } => assert_eq!(offset, second_offset),
            other => panic!("expected corruption, got {other:?}"),
        }
    }

    #[test]
    fn forward_envelope_round_trip() {
        let payload = encode_forward(id(3), 42, b"batchbytes", b"<cbe/>");
        let (device, serial, batch, cbe) = parse_forward(&payload).unwrap();
        assert_eq!(device, id(3));
        assert_eq!(serial, 42);
        assert_eq!(batch, b"batchbytes");
        assert_eq!(cbe, b"<cbe/>");
        // truncations never parse
        for cut in 0..payload.len() {
            assert!(parse_forward(&payload[..cut]).is_none(), "cut {cut}");
        }
        let mut padded = payload.clone();
        padded.push(0);
        assert!(parse_forward(&padded).is_none());
    }
}
