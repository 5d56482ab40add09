//! Simulated network device: streams a log corpus to an agent at a
//! configurable rate and budget, or misbehaves on purpose — replaying
//! captured frames verbatim like an on-path attacker, or presenting
//! credentials from outside the trusted CA.

use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::discovery::{
    collect_offers, select_agent, DiscoveryError, NetworkPrefix, SelectionMemory, ADM_ATTEMPTS,
    OFFER_WINDOW,
};
use crate::identity::{load_identity, EndpointId, IdentityError, Keyring, Role};
use crate::timeutil;
use crate::transport::{Event, LinkParams, SecureLink, TransportError};
use crate::wire;

pub const DEFAULT_BATCH_BYTES: usize = 64 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum DeviceError {
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Discovery(#[from] DiscoveryError),
    #[error("startup: {0}")]
    Startup(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// How the simulated device behaves.
#[derive(Debug, Clone)]
pub enum DeviceMode {
    Honest,
    /// Streams honestly, and additionally re-injects captured frames:
    /// `duplicates` copies within the current epoch (replay-window food)
    /// and `cross_epoch` copies of frames from before a rekey.
    Replayer { duplicates: u64, cross_epoch: u64 },
    /// Presents a certificate chain from outside the trusted CA and
    /// records the rejection.
    Impostor,
}

#[derive(Debug, Clone)]
pub struct DeviceProfile {
    pub identity_dir: PathBuf,
    pub keyring_dir: PathBuf,
    pub corpus_path: PathBuf,
    /// Lines per second; 0 streams unthrottled.
    pub rate: u64,
    /// Raw-byte send budget (line bytes plus newline each).
    pub total_bytes: u64,
    pub mode: DeviceMode,
    /// Manual agent endpoint; when absent, discovery is attempted.
    pub agent_endpoint: Option<SocketAddr>,
    pub agent_id: Option<EndpointId>,
    /// Discover over IPv6 instead of IPv4 when no endpoint is given.
    pub discover_ipv6: bool,
    pub selection_memory: Option<PathBuf>,
    pub local_networks: Vec<NetworkPrefix>,
    pub link: LinkParams,
    pub batch_max_bytes: usize,
}

impl DeviceProfile {
    pub fn new(identity_dir: PathBuf, keyring_dir: PathBuf, corpus_path: PathBuf) -> DeviceProfile {
        DeviceProfile {
            identity_dir,
            keyring_dir,
            corpus_path,
            rate: 0,
            total_bytes: 1024 * 1024,
            mode: DeviceMode::Honest,
            agent_endpoint: None,
            agent_id: None,
            discover_ipv6: false,
            selection_memory: None,
            local_networks: Vec::new(),
            link: LinkParams::default(),
            batch_max_bytes: DEFAULT_BATCH_BYTES,
        }
    }
}

/// Transmission report, also emitted as `key=value` text by the CLI.
#[derive(Debug, Default, Clone)]
pub struct DeviceReport {
    pub device: Option<EndpointId>,
    pub bytes_sent: u64,
    pub lines_sent: u64,
    pub batches: u64,
    pub acks_received: u64,
    /// Same-epoch duplicate frames injected (each one a replay reject at
    /// the agent).
    pub replays_injected: u64,
    /// Pre-rekey frames injected after the epoch moved on.
    pub cross_epoch_injected: u64,
    /// Extra acks that arrived for already-acked serials (should be 0).
    pub unexpected_acks: u64,
    pub rekeys: u64,
    pub handshake_rejected: bool,
    pub elapsed_secs: f64,
}

impl DeviceReport {
    /// Line-oriented `key=value` form for harness parsing.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        if let Some(id) = self.device {
            out.push_str(&format!("device={}\n", id.to_hex()));
        }
        out.push_str(&format!("bytes={}\n", self.bytes_sent));
        out.push_str(&format!("lines={}\n", self.lines_sent));
        out.push_str(&format!("batches={}\n", self.batches));
        out.push_str(&format!("acks={}\n", self.acks_received));
        out.push_str(&format!("replays_injected={}\n", self.replays_injected));
        out.push_str(&format!("cross_epoch_injected={}\n", self.cross_epoch_injected));
        out.push_str(&format!("rekeys={}\n", self.rekeys));
        out.push_str(&format!("handshake_rejected={}\n", self.handshake_rejected));
        out.push_str(&format!("secs={:.3}\n", self.elapsed_secs));
        out
    }
}

struct CapturedFrame {
    bytes: Vec<u8>,
    epoch: u32,
}

/// Run one simulated device to completion and report what happened.
pub fn run_device(profile: &DeviceProfile) -> Result<DeviceReport, DeviceError> {
    let identity = std::sync::Arc::new(load_identity(&profile.identity_dir, Role::Device)?);
    let keyring = Keyring::open(&profile.keyring_dir)?;
    let mut report = DeviceReport {
        device: Some(identity.id()),
        ..DeviceReport::default()
    };

    let (endpoint, agent_hint) = resolve_agent(profile, &identity, &keyring)?;

    let started = Instant::now();
    let stream = TcpStream::connect(endpoint).map_err(DeviceError::Io)?;
    let link = SecureLink::connect(stream, identity.clone(), &keyring, &profile.link, agent_hint);
    let mut link = match link {
        Ok(link) => link,
        Err(TransportError::PeerError { .. })
        | Err(TransportError::Refused(_))
        | Err(TransportError::Closed) => {
            // the agent turned us away; for an impostor this is the
            // expected outcome, not a failure
            report.handshake_rejected = true;
            report.elapsed_secs = started.elapsed().as_secs_f64();
            return Ok(report);
        }
        Err(e) => return Err(e.into()),
    };
    if matches!(profile.mode, DeviceMode::Impostor) {
        // an impostor that got this far means the trust gate failed
        report.elapsed_secs = started.elapsed().as_secs_f64();
        link.shutdown();
        return Ok(report);
    }

    let corpus = read_corpus(&profile.corpus_path)?;
    if corpus.is_empty() {
        return Err(DeviceError::Startup("corpus is empty".into()));
    }

    // device-assigned batch serials stay unique across reconnects
    let serial_base = timeutil::now_millis() << 16;
    let mut serial = 0u64;
    let mut corpus_at = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(serial_base);
    let mut captured: Vec<CapturedFrame> = Vec::new();
    let (mut replay_budget, mut cross_budget) = match profile.mode {
        DeviceMode::Replayer { duplicates, cross_epoch } => (duplicates, cross_epoch),
        _ => (0, 0),
    };

    link.set_read_timeout(Some(Duration::from_secs(10)))?;
    while report.bytes_sent < profile.total_bytes {
        // assemble one batch within the size cap
        let mut lines: Vec<String> = Vec::new();
        let mut batch_bytes = 0usize;
        while batch_bytes < profile.batch_max_bytes && report.bytes_sent + (batch_bytes as u64) < profile.total_bytes
        {
            let line = &corpus[corpus_at % corpus.len()];
            corpus_at += 1;
            batch_bytes += line.len() + 1;
            lines.push(line.clone());
        }
        if lines.is_empty() {
            break;
        }
        serial += 1;
        let payload = crate::agent::encode_device_batch(serial_base + serial, &lines);
        let (wire_id, _, frame) = link.send(wire::LOG_BATCH, payload, true)?;
        captured.push(CapturedFrame {
            bytes: frame,
            epoch: link.epoch(),
        });
        report.batches += 1;
        report.lines_sent += lines.len() as u64;
        report.bytes_sent += batch_bytes as u64;

        // lockstep: wait for this batch's ack
        wait_for_ack(&mut link, wire_id, &mut report)?;

        if replay_budget > 0 || cross_budget > 0 {
            inject_replays(&mut link, &captured, &mut replay_budget, &mut cross_budget, &mut rng, &mut report)?;
        }

        if profile.rate > 0 {
            let secs = lines.len() as f64 / profile.rate as f64;
            std::thread::sleep(Duration::from_secs_f64(secs));
        }
    }

    // drain any injection budget left (same-epoch frames always exist)
    while replay_budget > 0 || cross_budget > 0 {
        let before = (replay_budget, cross_budget);
        inject_replays(&mut link, &captured, &mut replay_budget, &mut cross_budget, &mut rng, &mut report)?;
        if (replay_budget, cross_budget) == before {
            break; // no eligible frames (e.g. no pre-rekey captures)
        }
    }

    report.rekeys = link.epoch().saturating_sub(1) as u64;
    report.elapsed_secs = started.elapsed().as_secs_f64();
    link.shutdown();
    Ok(report)
}

fn resolve_agent(
    profile: &DeviceProfile,
    identity: &crate::identity::EndpointIdentity,
    keyring: &Keyring,
) -> Result<(SocketAddr, Option<EndpointId>), DeviceError> {
    if let Some(endpoint) = profile.agent_endpoint {
        return Ok((endpoint, profile.agent_id));
    }
    // discovery path, then selection by the precedence rules
    let offers = collect_offers(identity, keyring, profile.discover_ipv6, OFFER_WINDOW, ADM_ATTEMPTS)?;
    let memory_path = profile
        .selection_memory
        .clone()
        .unwrap_or_else(|| profile.identity_dir.join("agent.memory"));
    let mut memory = SelectionMemory::load(&memory_path);
    let offer = select_agent(&offers, &mut memory, &profile.local_networks, &mut rand::thread_rng())?;
    let endpoint: SocketAddr = offer
        .endpoint
        .parse()
        .map_err(|e| DeviceError::Startup(format!("offer endpoint {:?}: {e}", offer.endpoint)))?;
    Ok((endpoint, Some(offer.agent_id)))
}

fn wait_for_ack(
    link: &mut SecureLink,
    wire_id: u64,
    report: &mut DeviceReport,
) -> Result<(), DeviceError> {
    loop {
        match link.recv_event()? {
            Event::Message(m) if m.msg_type == wire::ACK => {
                match crate::transport::parse_ack(&m.payload) {
                    Ok(ref_id) if ref_id == wire_id => {
                        report.acks_received += 1;
                        return Ok(());
                    }
                    Ok(_) => {
                        report.unexpected_acks += 1;
                    }
                    Err(_) => {}
                }
            }
            Event::Message(m) if m.msg_type == wire::ERROR => {
                let (code, detail) = crate::transport::parse_error(&m.payload)
                    .unwrap_or((0, String::new()));
                return Err(DeviceError::Startup(format!(
                    "agent rejected batch ({code}): {detail}"
                )));
            }
            Event::Message(_) | Event::Rejected { .. } | Event::Rekeyed => continue,
        }
    }
}

fn inject_replays(
    link: &mut SecureLink,
    captured: &[CapturedFrame],
    replay_budget: &mut u64,
    cross_budget: &mut u64,
    rng: &mut ChaCha8Rng,
    report: &mut DeviceReport,
) -> Result<(), DeviceError> {
    let epoch = link.epoch();
    // a handful per batch keeps the attack spread over the stream
    for _ in 0..25 {
        if *replay_budget == 0 {
            break;
        }
        let same_epoch: Vec<&CapturedFrame> =
            captured.iter().filter(|f| f.epoch == epoch).collect();
        let Some(frame) = same_epoch.choose(rng) else { break };
        link.inject_raw(&frame.bytes)?;
        *replay_budget -= 1;
        report.replays_injected += 1;
    }
    for _ in 0..10 {
        if *cross_budget == 0 {
            break;
        }
        let stale: Vec<&CapturedFrame> = captured.iter().filter(|f| f.epoch < epoch).collect();
        let Some(frame) = stale.choose(rng) else { break };
        link.inject_raw(&frame.bytes)?;
        *cross_budget -= 1;
        report.cross_epoch_injected += 1;
    }
    Ok(())
}

fn read_corpus(path: &Path) -> Result<Vec<String>, DeviceError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines: Vec<String> = text.split('\n').map(str::to_string).collect();
    if lines.last().map(|l| l.is_empty()).unwrap_or(false) {
        lines.pop(); // trailing newline
    }
    Ok(lines)
}

// --- synthetic corpus generation ----------------------------------------

/// The stock template set used by benchmarks: realistic shapes with
/// placeholder slots.
pub fn default_templates() -> Vec<String> {
    vec![
        "Server ::: is down".to_string(),
        "User ::: is connected in terminal :::".to_string(),
        "::: interface is link down".to_string(),
        "Connection from ::: port ::: closed by authenticating user :::".to_string(),
        "Failed password for invalid user ::: from ::: port ::: ssh2".to_string(),
    ]
}

const HOSTS: [&str; 26] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet",
    "kilo", "lima", "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango",
    "uniform", "victor", "whiskey", "xray", "yankee", "zulu",
];

fn fill_slot(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..4u8) {
        0 => HOSTS[rng.gen_range(0..HOSTS.len())].to_string(),
        1 => format!("usr{:02}", rng.gen_range(0..40)),
        2 => format!("tty{}", rng.gen_range(0..8)),
        _ => format!("{}", rng.gen_range(1024..65535)),
    }
}

/// Render one line from a template, filling each `:::` slot from the
/// seeded generator.
pub fn fill_template(template: &str, rng: &mut ChaCha8Rng) -> String {
    let parts: Vec<String> = template
        .split_whitespace()
        .map(|tok| {
            if tok == ":::" {
                fill_slot(rng)
            } else {
                tok.to_string()
            }
        })
        .collect();
    parts.join(" ")
}

/// Deterministic synthetic corpus: templates dealt round-robin, slots
/// filled from a seeded generator, byte-identical across runs.
pub fn generate_corpus(templates: &[String], lines: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..lines)
        .map(|i| fill_template(&templates[i % templates.len()], &mut rng))
        .collect()
}

/// Write `corpus` to `path` plus the generating template set alongside,
/// as `<path>.templates`, for oracle comparison.
pub fn write_corpus(path: &Path, templates: &[String], lines: usize, seed: u64) -> Result<Vec<String>, std::io::Error> {
    let corpus = generate_corpus(templates, lines, seed);
    let mut text = corpus.join("\n");
    text.push('\n');
    std::fs::write(path, text)?;
    let sidecar = format!("{}.templates", path.display());
    std::fs::write(sidecar, format!("{}\n", templates.join("\n")))?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{TemplateDictionary, DEFAULT_THETA};

    #[test]
    fn corpus_is_deterministic_for_a_seed() {
        let templates = default_templates();
        let a = generate_corpus(&templates, 10_000, 42);
        let b = generate_corpus(&templates, 10_000, 42);
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, b);
        let c = generate_corpus(&templates, 10_000, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn every_line_matches_its_template_shape() {
        let template = "Server ::: is down".to_string();
        let corpus = generate_corpus(&[template], 200, 7);
        for line in &corpus {
            let tokens: Vec<&str> = line.split(' ').collect();
            assert_eq!(tokens.len(), 4);
            assert_eq!(tokens[0], "Server");
            assert_eq!(tokens[2], "is");
            assert_eq!(tokens[3], "down");
        }
    }

    #[test]
    fn learned_dictionary_equals_generating_set() {
        let templates = default_templates();
        let corpus = generate_corpus(&templates, 10_000, 42);
        let dict = TemplateDictionary::learn(&corpus, DEFAULT_THETA).unwrap();
        let mut learned = dict.patterns();
        learned.sort();
        let mut expected = templates.clone();
        expected.sort();
        assert_eq!(learned, expected);
    }

    #[test]
    fn corpus_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.log");
        let written = write_corpus(&path, &default_templates(), 500, 11).unwrap();
        let read = read_corpus(&path).unwrap();
        assert_eq!(read, written);
        let sidecar = std::fs::read_to_string(dir.path().join("corpus.log.templates")).unwrap();
        assert_eq!(sidecar.lines().count(), 5);
    }
}
