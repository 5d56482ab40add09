//! Agent discovery and selection.
//!
//! Devices multicast a signed Agent-Discovery Message (ADM) carrying
//! their 20-byte ID; agents answer known devices with a signed unicast
//! offer (AOM) naming their ID and transport endpoint. Selection applies
//! three rules in order: the agent used before, then an agent on a local
//! network (random tie-break), otherwise manual configuration is needed.

use std::fs;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr, UdpSocket};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::channel::verify_message;
use crate::identity::{EndpointId, EndpointIdentity, Keyring};
use crate::timeutil;
use crate::wire::{self, WireMessage};

/// Multicast group and port for ADM traffic.
pub const GROUP_V4: Ipv4Addr = Ipv4Addr::new(239, 77, 76, 80);
pub const GROUP_V6: Ipv6Addr = Ipv6Addr::new(0xff02, 0, 0, 0, 0, 0, 0x4c48, 0x5031);
pub const DISCOVERY_PORT: u16 = 7780;

/// How long a device collects offers after one ADM.
pub const OFFER_WINDOW: Duration = Duration::from_secs(2);
/// ADM attempts before giving up on discovery.
pub const ADM_ATTEMPTS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum DiscoveryError {
    #[error("transport: {0}")]
    Transport(#[from] std::io::Error),
    #[error("no eligible agent; configure agent_endpoint manually")]
    NeedsManualConfiguration,
    #[error("validation: {0}")]
    Validation(String),
}

type Result<T> = std::result::Result<T, DiscoveryError>;

/// A verified agent offer.
#[derive(Debug, Clone)]
pub struct AgentOffer {
    pub agent_id: EndpointId,
    /// Address the offer arrived from.
    pub source: SocketAddr,
    /// Endpoint to connect to, as advertised in the offer.
    pub endpoint: String,
    pub received_at: u64,
}

/// An address prefix counting as "the same network".
#[derive(Debug, Clone, Copy)]
pub struct NetworkPrefix {
    pub addr: IpAddr,
    pub prefix_len: u8,
}

impl NetworkPrefix {
    pub fn new(addr: IpAddr, prefix_len: u8) -> NetworkPrefix {
        NetworkPrefix { addr, prefix_len }
    }

    pub fn contains(&self, ip: IpAddr) -> bool {
        match (self.addr, ip) {
            (IpAddr::V4(net), IpAddr::V4(ip)) => {
                let bits = u32::from(self.prefix_len.min(32));
                if bits == 0 {
                    return true;
                }
                let mask = u32::MAX << (32 - bits);
                u32::from_be_bytes(net.octets()) & mask == u32::from_be_bytes(ip.octets()) & mask
            }
            (IpAddr::V6(net), IpAddr::V6(ip)) => {
                let bits = u32::from(self.prefix_len.min(128));
                if bits == 0 {
                    return true;
                }
                let net = u128::from_be_bytes(net.octets());
                let ip = u128::from_be_bytes(ip.octets());
                let mask = u128::MAX << (128 - bits);
                net & mask == ip & mask
            }
            _ => false,
        }
    }
}

/// Which agent this device used before; survives restarts.
#[derive(Debug)]
pub struct SelectionMemory {
    path: PathBuf,
    last_agent: Option<EndpointId>,
}

impl SelectionMemory {
    pub fn load(path: &Path) -> SelectionMemory {
        let last_agent = fs::read_to_string(path)
            .ok()
            .and_then(|text| EndpointId::from_hex(text.trim()).ok());
        SelectionMemory {
            path: path.to_path_buf(),
            last_agent,
        }
    }

    pub fn last_agent(&self) -> Option<EndpointId> {
        self.last_agent
    }

    pub fn remember(&mut self, agent: EndpointId) -> std::io::Result<()> {
        self.last_agent = Some(agent);
        if let Some(parent) = self.path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&self.path, agent.to_hex())
    }
}

/// Pick the agent to use, in strict precedence order:
///
/// 1. the agent used before, when it is among the offers;
/// 2. an offer from a local network — exactly one wins outright, several
///    are tie-broken uniformly at random;
/// 3. otherwise manual configuration is required.
///
/// The choice is recorded in `memory`.
pub fn select_agent<R: Rng>(
    offers: &[AgentOffer],
    memory: &mut SelectionMemory,
    local_networks: &[NetworkPrefix],
    rng: &mut R,
) -> Result<AgentOffer> {
    if let Some(last) = memory.last_agent() {
        if let Some(offer) = offers.iter().find(|o| o.agent_id == last) {
            let chosen = offer.clone();
            let _ = memory.remember(chosen.agent_id);
            return Ok(chosen);
        }
    }
    let local: Vec<&AgentOffer> = offers
        .iter()
        .filter(|o| local_networks.iter().any(|n| n.contains(o.source.ip())))
        .collect();
    let chosen = match local.len() {
        0 => return Err(DiscoveryError::NeedsManualConfiguration),
        1 => local[0].clone(),
        n => local[rng.gen_range(0..n)].clone(),
    };
    memory
        .remember(chosen.agent_id)
        .map_err(DiscoveryError::Transport)?;
    Ok(chosen)
}

/// Build a signed ADM for this device. Payload is exactly the 20-byte ID.
pub fn build_adm(me: &EndpointIdentity, validity_secs: u64) -> Result<WireMessage> {
    let mut message = WireMessage::new(wire::ADM, me.id(), EndpointId::ZERO);
    message.message_id = timeutil::now_millis();
    message.validity = timeutil::now_secs() + validity_secs;
    message.payload = me.id().as_bytes().to_vec();
    message.signature = me.sign(
        &message
            .signed_range()
            .map_err(|e| DiscoveryError::Validation(e.to_string()))?,
    );
    Ok(message)
}

/// Parse and verify an ADM against the keyring. Returns the device ID, or
/// None when the message is not a trustworthy ADM (which is ignored
/// silently by agents).
pub fn check_adm(keyring: &Keyring, message: &WireMessage) -> Option<EndpointId> {
    if message.msg_type != wire::ADM {
        return None;
    }
    if wire::is_expired(message, timeutil::now_secs()) {
        return None;
    }
    let claimed = parse_adm_payload(&message.payload)?;
    if claimed != message.sender {
        return None;
    }
    let key = keyring.public_key_of(&claimed)?;
    let range = message.signed_range().ok()?;
    if !verify_message(&key, &range, &message.signature) {
        return None;
    }
    Some(claimed)
}

/// ADM payload: the 20-byte device ID.
pub fn parse_adm_payload(payload: &[u8]) -> Option<EndpointId> {
    EndpointId::from_slice(payload).ok()
}

/// Answer a verified ADM with a signed unicast offer, or None when the
/// device is unknown (silence is deliberate).
pub fn answer_adm(
    me: &EndpointIdentity,
    keyring: &Keyring,
    adm: &WireMessage,
    advertised_endpoint: &str,
    validity_secs: u64,
) -> Option<WireMessage> {
    let device = check_adm(keyring, adm)?;
    let mut reply = WireMessage::new(wire::AOM, me.id(), device);
    reply.message_id = timeutil::now_millis();
    reply.validity = timeutil::now_secs() + validity_secs;
    reply.payload = encode_aom_payload(me.id(), advertised_endpoint);
    reply.signature = me.sign(&reply.signed_range().ok()?);
    Some(reply)
}

/// AOM payload: agent ID followed by the UTF-8 endpoint text.
pub fn encode_aom_payload(agent: EndpointId, endpoint: &str) -> Vec<u8> {
    let mut out = agent.as_bytes().to_vec();
    out.extend_from_slice(endpoint.as_bytes());
    out
}

pub fn parse_aom_payload(payload: &[u8]) -> Option<(EndpointId, String)> {
    if payload.len() < EndpointId::LEN {
        return None;
    }
    let id = EndpointId::from_slice(&payload[..EndpointId::LEN]).ok()?;
    let endpoint = std::str::from_utf8(&payload[EndpointId::LEN..]).ok()?;
    Some((id, endpoint.to_string()))
}

/// Verify an AOM against the keyring and produce an offer.
pub fn check_aom(keyring: &Keyring, message: &WireMessage, source: SocketAddr) -> Option<AgentOffer> {
    if message.msg_type != wire::AOM {
        return None;
    }
    if wire::is_expired(message, timeutil::now_secs()) {
        return None;
    }
    let (agent_id, endpoint) = parse_aom_payload(&message.payload)?;
    if agent_id != message.sender {
        return None;
    }
    let key = keyring.public_key_of(&agent_id)?;
    let range = message.signed_range().ok()?;
    if !verify_message(&key, &range, &message.signature) {
        return None;
    }
    Some(AgentOffer {
        agent_id,
        source,
        endpoint,
        received_at: timeutil::now_secs(),
    })
}

fn group_addr(ipv6: bool) -> SocketAddr {
    if ipv6 {
        SocketAddr::new(IpAddr::V6(GROUP_V6), DISCOVERY_PORT)
    } else {
        SocketAddr::new(IpAddr::V4(GROUP_V4), DISCOVERY_PORT)
    }
}

fn join_group(socket: &UdpSocket, ipv6: bool) -> std::io::Result<()> {
    if ipv6 {
        // try the default interface first, then loopback
        socket
            .join_multicast_v6(&GROUP_V6, 0)
            .or_else(|_| socket.join_multicast_v6(&GROUP_V6, 1))?;
        socket.set_multicast_loop_v6(true)?;
    } else {
        socket.join_multicast_v4(&GROUP_V4, &Ipv4Addr::UNSPECIFIED)?;
        socket.set_multicast_loop_v4(true)?;
    }
    Ok(())
}

/// Send one ADM and collect verified offers for `window`. Retries the
/// ADM up to `attempts` times when nothing answers.
pub fn collect_offers(
    me: &EndpointIdentity,
    keyring: &Keyring,
    ipv6: bool,
    window: Duration,
    attempts: usize,
) -> Result<Vec<AgentOffer>> {
    let bind: SocketAddr = if ipv6 {
        "[::]:0".parse().unwrap()
    } else {
        "0.0.0.0:0".parse().unwrap()
    };
    let socket = UdpSocket::bind(bind)?;
    if ipv6 {
        socket.set_multicast_loop_v6(true)?;
    } else {
        socket.set_multicast_loop_v4(true)?;
    }
    socket.set_read_timeout(Some(Duration::from_millis(100)))?;

    let adm = build_adm(me, window.as_secs().max(2) * attempts.max(1) as u64)?;
    let bytes = wire::encode_message(&adm).map_err(|e| DiscoveryError::Validation(e.to_string()))?;

    for _ in 0..attempts.max(1) {
        socket.send_to(&bytes, group_addr(ipv6))?;
        let deadline = Instant::now() + window;
        let mut offers: Vec<AgentOffer> = Vec::new();
        let mut buf = [0u8; 65536];
        while Instant::now() < deadline {
            match socket.recv_from(&mut buf) {
                Ok((n, source)) => {
                    if let Ok((message, _)) = wire::decode_message(&buf[..n]) {
                        if let Some(offer) = check_aom(keyring, &message, source) {
                            if !offers.iter().any(|o| o.agent_id == offer.agent_id) {
                                offers.push(offer);
                            }
                        }
                    }
                }
                Err(ref e)
                    if e.kind() == std::io::ErrorKind::WouldBlock
                        || e.kind() == std::io::ErrorKind::TimedOut => {}
                Err(e) => return Err(e.into()),
            }
        }
        if !offers.is_empty() {
            return Ok(offers);
        }
    }
    Ok(Vec::new())
}

/// Background ADM responder run by agents. Answers every verified ADM
/// from a keyring-known device with a signed AOM.
pub struct AdmResponder {
    stop: Arc<AtomicBool>,
    handle: Option<thread::JoinHandle<()>>,
}

impl AdmResponder {
    pub fn start(
        me: Arc<EndpointIdentity>,
        keyring: Arc<Keyring>,
        ipv6: bool,
        advertised_endpoint: String,
    ) -> Result<AdmResponder> {
        let bind: SocketAddr = if ipv6 {
            SocketAddr::new(IpAddr::V6(Ipv6Addr::UNSPECIFIED), DISCOVERY_PORT)
        } else {
            SocketAddr::new(IpAddr::V4(Ipv4Addr::UNSPECIFIED), DISCOVERY_PORT)
        };
        let socket = UdpSocket::bind(bind)?;
        join_group(&socket, ipv6)?;
        socket.set_read_timeout(Some(Duration::from_millis(200)))?;

        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = stop.clone();
        let handle = thread::spawn(move || {
            let mut buf = [0u8; 65536];
            while !stop_flag.load(Ordering::Relaxed) {
                match socket.recv_from(&mut buf) {
                    Ok((n, source)) => {
                        let Ok((message, _)) = wire::decode_message(&buf[..n]) else {
                            continue;
                        };
                        if let Some(reply) =
                            answer_adm(&me, &keyring, &message, &advertised_endpoint, 30)
                        {
                            if let Ok(bytes) = wire::encode_message(&reply) {
                                let _ = socket.send_to(&bytes, source);
                            }
                        }
                    }
                    Err(ref e)
                        if e.kind() == std::io::ErrorKind::WouldBlock
                            || e.kind() == std::io::ErrorKind::TimedOut => {}
                    Err(_) => break,
                }
            }
        });
        Ok(AdmResponder {
            stop,
            handle: Some(handle),
        })
    }

    pub fn stop(mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for AdmResponder {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}
