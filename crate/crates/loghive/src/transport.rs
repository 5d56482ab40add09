//! Stream transport: wire-message framing over TCP and the secure link
//! driver. The same handshake and verification pipeline runs on every
//! connection, device to agent and agent to warehouse alike.
//!
//! Handshake sequence, initiator first: CLOCK_SYNC (three messages,
//! measuring the offset both ways) → CHALLENGE / CHALLENGE_RESPONSE in
//! both directions → DH_OFFER / DH_ACCEPT → data. A REKEY_REQUEST
//! restarts at DH_OFFER; every data message carries the session epoch in
//! an extension header and is rejected on mismatch.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::time::Duration;

use rsa::RsaPublicKey;

use crate::channel::{
    self, message_digest, respond_to_challenge, start_authentication, sync_clock, verify_challenge,
    ChannelError, DhKeyPair, SessionState,
};
use crate::identity::{EndpointId, EndpointIdentity, IdentityError, Keyring};
use crate::timeutil;
use crate::wire::{self, Extension, MessageType, WireError, WireMessage};

pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
pub const DEFAULT_VALIDITY_SECS: u64 = 60;

/// ERROR payload reason codes.
pub mod err_code {
    pub const UNKNOWN_SENDER: u8 = 1;
    pub const AUTH_FAILED: u8 = 2;
    pub const EXPIRED: u8 = 3;
    pub const REPLAY: u8 = 4;
    pub const EPOCH: u8 = 5;
    pub const BAD_SIGNATURE: u8 = 6;
    pub const GROUP_RETRANSMIT: u8 = 7;
    pub const BUSY: u8 = 8;
    pub const PROTOCOL: u8 = 9;
    pub const FILTERED: u8 = 10;
}

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("peer closed the connection")]
    Closed,
    #[error("read timed out")]
    Timeout,
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("peer sent ERROR {code}: {detail}")]
    PeerError { code: u8, detail: String },
    #[error("refused: {0}")]
    Refused(String),
}

type Result<T> = std::result::Result<T, TransportError>;

/// Wire-message framing over a byte stream.
pub struct FrameStream {
    stream: TcpStream,
    buf: Vec<u8>,
}

impl FrameStream {
    pub fn new(stream: TcpStream) -> FrameStream {
        FrameStream {
            stream,
            buf: Vec::new(),
        }
    }

    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> Result<()> {
        self.stream.set_read_timeout(timeout)?;
        Ok(())
    }

    pub fn peer_addr(&self) -> Result<std::net::SocketAddr> {
        Ok(self.stream.peer_addr()?)
    }

    /// Read one complete frame, buffering partial input across calls.
    pub fn read_message(&mut self) -> Result<WireMessage> {
        loop {
            if !self.buf.is_empty() {
                match wire::decode_message(&self.buf) {
                    Ok((message, used)) => {
                        self.buf.drain(..used);
                        return Ok(message);
                    }
                    Err(WireError::Incomplete { .. }) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            let mut chunk = [0u8; 16384];
            let n = match self.stream.read(&mut chunk) {
                Ok(n) => n,
                Err(e)
                    if e.kind() == std::io::ErrorKind::WouldBlock
                        || e.kind() == std::io::ErrorKind::TimedOut =>
                {
                    return Err(TransportError::Timeout)
                }
                Err(e) => return Err(e.into()),
            };
            if n == 0 {
                return Err(TransportError::Closed);
            }
            self.buf.extend_from_slice(&chunk[..n]);
        }
    }

    pub fn write_message(&mut self, message: &WireMessage) -> Result<()> {
        let bytes = wire::encode_message(message)?;
        self.write_raw(&bytes)
    }

    /// Write pre-encoded frame bytes verbatim (used by the replay
    /// attacker simulation).
    pub fn write_raw(&mut self, bytes: &[u8]) -> Result<()> {
        self.stream.write_all(bytes)?;
        self.stream.flush()?;
        Ok(())
    }

    pub fn shutdown(&self) {
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
    }
}

/// Link tuning knobs shared by both ends.
#[derive(Debug, Clone)]
pub struct LinkParams {
    pub ttl_kilobits: u64,
    pub replay_width: u64,
    pub validity_secs: u64,
}

impl Default for LinkParams {
    fn default() -> LinkParams {
        LinkParams {
            ttl_kilobits: channel::DEFAULT_TTL_KILOBITS,
            replay_width: channel::ReplayWindow::DEFAULT_WIDTH,
            validity_secs: DEFAULT_VALIDITY_SECS,
        }
    }
}

/// Why an inbound frame was rejected rather than delivered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    Expired,
    Replay,
    EpochMismatch,
    BadSignature,
    Unsigned,
    WrongPeer,
    DecryptFailed,
}

/// A verified inbound message.
#[derive(Debug)]
pub struct Inbound {
    pub msg_type: MessageType,
    pub message_id: u64,
    /// Plaintext payload (decrypted when the frame was encrypted).
    pub payload: Vec<u8>,
    /// True when the frame carried its own valid signature; false for
    /// group-mode frames awaiting a BATCH_SIGNATURE.
    pub signed: bool,
    /// Digest of the signed range, for group signature verification.
    pub digest: [u8; 32],
    pub received_ms: u64,
}

/// What a receive produced.
#[derive(Debug)]
pub enum Event {
    Message(Inbound),
    Rejected {
        reason: RejectReason,
        message_id: u64,
    },
    /// The peer drove a rekey; the session key and epoch changed.
    Rekeyed,
}

/// An authenticated, replay-protected, optionally encrypted connection to
/// one peer.
pub struct SecureLink {
    stream: FrameStream,
    me: Arc<EndpointIdentity>,
    peer_id: EndpointId,
    peer_key: RsaPublicKey,
    session: SessionState,
    validity_secs: u64,
    group_signing: bool,
}

impl SecureLink {
    /// Run the initiator side of the handshake over a connected stream.
    /// The responder's identity is learned from its first reply and must
    /// be present in the keyring.
    pub fn connect(
        stream: TcpStream,
        me: Arc<EndpointIdentity>,
        keyring: &Keyring,
        params: &LinkParams,
        peer_hint: Option<EndpointId>,
    ) -> Result<SecureLink> {
        let mut stream = FrameStream::new(stream);
        stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
        let mut serial = 1u64;
        let validity_secs = params.validity_secs;

        // clock sync: measure our offset, then help the peer measure its
        let t1 = timeutil::now_millis();
        let req = build_signed(
            &me,
            peer_hint.unwrap_or(EndpointId::ZERO),
            wire::CLOCK_SYNC,
            clock_req(t1),
            &mut serial,
            validity_secs,
        )?;
        stream.write_message(&req)?;

        let reply = read_checked(&mut stream, &me)?;
        let t4 = timeutil::now_millis();
        let peer_id = reply.sender;
        let peer_key = keyring
            .public_key_of(&peer_id)
            .ok_or_else(|| TransportError::Refused(format!("peer {peer_id} not in keyring")))?;
        verify_signed(&reply, &peer_key)?;
        expect_type(&reply, wire::CLOCK_SYNC)?;
        let (t1_echo, t2, t3) = parse_clock_resp(&reply.payload)?;
        if t1_echo != t1 {
            return Err(TransportError::Protocol("clock sync echo mismatch".into()));
        }
        let offset = sync_clock(t1, t2, t3, t4)?;

        let fin = build_signed(
            &me,
            peer_id,
            wire::CLOCK_SYNC,
            clock_fin(t3, t4, timeutil::now_millis()),
            &mut serial,
            validity_secs,
        )?;
        stream.write_message(&fin)?;

        // mutual authentication: we challenge, then answer theirs
        let peer_cert = keyring
            .lookup(&peer_id)
            .ok_or_else(|| TransportError::Refused(format!("peer {peer_id} not in keyring")))?;
        let (challenge, outbound) = start_authentication(
            &me,
            peer_id,
            peer_cert,
            keyring.trusted_ca(),
            timeutil::now_secs(),
        )?;
        let msg = build_signed(&me, peer_id, wire::CHALLENGE, outbound, &mut serial, validity_secs)?;
        stream.write_message(&msg)?;

        let reply = read_from_peer(&mut stream, &me, peer_id, &peer_key)?;
        expect_type(&reply, wire::CHALLENGE_RESPONSE)?;
        if !verify_challenge(&challenge, &reply.payload, &peer_key) {
            return Err(ChannelError::Auth("peer failed our challenge".into()).into());
        }

        let their_challenge = read_from_peer(&mut stream, &me, peer_id, &peer_key)?;
        expect_type(&their_challenge, wire::CHALLENGE)?;
        let response = respond_to_challenge(&me, &their_challenge.payload, &peer_key)?;
        let msg = build_signed(
            &me,
            peer_id,
            wire::CHALLENGE_RESPONSE,
            response,
            &mut serial,
            validity_secs,
        )?;
        stream.write_message(&msg)?;

        // session key agreement, initiator offers
        let dh = DhKeyPair::generate(&mut rand::thread_rng());
        let msg = build_signed(
            &me,
            peer_id,
            wire::DH_OFFER,
            dh.public_bytes().to_vec(),
            &mut serial,
            validity_secs,
        )?;
        stream.write_message(&msg)?;
        let accept = read_from_peer(&mut stream, &me, peer_id, &peer_key)?;
        expect_type(&accept, wire::DH_ACCEPT)?;
        let key = dh.derive_session_key(&accept.payload)?;

        let mut session = SessionState::new(peer_id, params.ttl_kilobits, params.replay_width);
        session.set_clock_offset(offset);
        session.install_session_key(key);
        for _ in 0..serial {
            session.next_message_id(); // continue past handshake serials
        }

        stream.set_read_timeout(None)?;
        Ok(SecureLink {
            stream,
            me,
            peer_id,
            peer_key,
            session,
            validity_secs,
            group_signing: false,
        })
    }

    /// Run the responder side of the handshake on an accepted stream.
    /// `policy` may refuse a peer after identification (connection
    /// filtering); unknown and untrusted peers are always refused.
    pub fn accept(
        stream: TcpStream,
        me: Arc<EndpointIdentity>,
        keyring: &Keyring,
        params: &LinkParams,
        policy: &mut dyn FnMut(EndpointId) -> std::result::Result<(), String>,
    ) -> Result<SecureLink> {
        let mut stream = FrameStream::new(stream);
        stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT))?;
        let mut serial = 1u64;
        let validity_secs = params.validity_secs;

        // the first frame identifies the peer; unknown senders are
        // apocryphal and refused before anything else
        let req = read_checked(&mut stream, &me)?;
        let t2 = timeutil::now_millis();
        let peer_id = req.sender;
        let Some(peer_key) = keyring.public_key_of(&peer_id) else {
            let deny = build_signed(
                &me,
                peer_id,
                wire::ERROR,
                encode_error(err_code::UNKNOWN_SENDER, "unknown sender"),
                &mut serial,
                validity_secs,
            )?;
            let _ = stream.write_message(&deny);
            stream.shutdown();
            return Err(TransportError::Refused(format!("unknown sender {peer_id}")));
        };
        verify_signed(&req, &peer_key)?;
        expect_type(&req, wire::CLOCK_SYNC)?;
        let t1 = parse_clock_req(&req.payload)?;
        if let Err(reason) = policy(peer_id) {
            let deny = build_signed(
                &me,
                peer_id,
                wire::ERROR,
                encode_error(err_code::FILTERED, &reason),
                &mut serial,
                validity_secs,
            )?;
            let _ = stream.write_message(&deny);
            stream.shutdown();
            return Err(TransportError::Refused(reason));
        }

        let t3 = timeutil::now_millis();
        let resp = build_signed(
            &me,
            peer_id,
            wire::CLOCK_SYNC,
            clock_resp(t1, t2, t3),
            &mut serial,
            validity_secs,
        )?;
        stream.write_message(&resp)?;

        let fin = read_from_peer(&mut stream, &me, peer_id, &peer_key)?;
        let u4 = timeutil::now_millis();
        expect_type(&fin, wire::CLOCK_SYNC)?;
        let (u1, u2, u3) = parse_clock_fin(&fin.payload)?;
        if u1 != t3 {
            return Err(TransportError::Protocol("clock sync echo mismatch".into()));
        }
        let offset = sync_clock(u1, u2, u3, u4)?;

        // answer the initiator's challenge, then issue ours
        let inbound = read_from_peer(&mut stream, &me, peer_id, &peer_key)?;
        expect_type(&inbound, wire::CHALLENGE)?;
        let response = respond_to_challenge(&me, &inbound.payload, &peer_key)?;
        let msg = build_signed(
            &me,
            peer_id,
            wire::CHALLENGE_RESPONSE,
            response,
            &mut serial,
            validity_secs,
        )?;
        stream.write_message(&msg)?;

        let peer_cert = keyring
            .lookup(&peer_id)
            .ok_or_else(|| TransportError::Refused(format!("peer {peer_id} not in keyring")))?;
        let (challenge, outbound) = start_authentication(
            &me,
            peer_id,
            peer_cert,
            keyring.trusted_ca(),
            timeutil::now_secs(),
        )?;
        let msg = build_signed(&me, peer_id, wire::CHALLENGE, outbound, &mut serial, validity_secs)?;
        stream.write_message(&msg)?;
        let reply = read_from_peer(&mut stream, &me, peer_id, &peer_key)?;
        expect_type(&reply, wire::CHALLENGE_RESPONSE)?;
        if !verify_challenge(&challenge, &reply.payload, &peer_key) {
            let deny = build_signed(
                &me,
                peer_id,
                wire::ERROR,
                encode_error(err_code::AUTH_FAILED, "challenge failed"),
                &mut serial,
                validity_secs,
            )?;
            let _ = stream.write_message(&deny);
            stream.shutdown();
            return Err(ChannelError::Auth("peer failed our challenge".into()).into());
        }

        // session key agreement, initiator offers
        let offer = read_from_peer(&mut stream, &me, peer_id, &peer_key)?;
        expect_type(&offer, wire::DH_OFFER)?;
        let dh = DhKeyPair::generate(&mut rand::thread_rng());
        let key = dh.derive_session_key(&offer.payload)?;
        let msg = build_signed(
            &me,
            peer_id,
            wire::DH_ACCEPT,
            dh.public_bytes().to_vec(),
            &mut serial,
            validity_secs,
        )?;
        stream.write_message(&msg)?;

        let mut session = SessionState::new(peer_id, params.ttl_kilobits, params.replay_width);
        session.set_clock_offset(offset);
        session.install_session_key(key);
        for _ in 0..serial {
            session.next_message_id();
        }

        stream.set_read_timeout(None)?;
        Ok(SecureLink {
            stream,
            me,
            peer_id,
            peer_key,
            session,
            validity_secs,
            group_signing: false,
        })
    }

    pub fn peer_id(&self) -> EndpointId {
        self.peer_id
    }

    pub fn epoch(&self) -> u32 {
        self.session.epoch()
    }

    pub fn clock_offset_ms(&self) -> i64 {
        self.session.clock_offset_ms()
    }

    pub fn rekey_required(&self) -> bool {
        self.session.rekey_required()
    }

    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> Result<()> {
        self.stream.set_read_timeout(timeout)
    }

    pub fn peer_addr(&self) -> Result<std::net::SocketAddr> {
        self.stream.peer_addr()
    }

    pub fn shutdown(&self) {
        self.stream.shutdown();
    }

    /// When enabled, LOG_BATCH frames go out unsigned and the caller is
    /// expected to follow up with BATCH_SIGNATURE messages.
    pub fn set_group_signing(&mut self, on: bool) {
        self.group_signing = on;
    }

    fn build(
        &mut self,
        msg_type: MessageType,
        payload: Vec<u8>,
        encrypt: bool,
        sign: bool,
    ) -> Result<(u64, [u8; 32], Vec<u8>)> {
        let mut message = WireMessage::new(msg_type, self.me.id(), self.peer_id);
        message.message_id = self.session.next_message_id();
        message.validity = timeutil::now_secs() + self.validity_secs;
        message.extensions.push(Extension::epoch(self.session.epoch()));
        if encrypt {
            let (ciphertext, _) = self.session.encrypt_payload(&payload)?;
            message.enc_proto = wire::ENC_AES128;
            message.payload = ciphertext;
        } else {
            message.payload = payload;
        }
        let range = message.signed_range()?;
        let digest = message_digest(&range);
        if sign {
            message.signature = self.me.sign(&range);
        }
        let bytes = wire::encode_message(&message)?;
        Ok((message.message_id, digest, bytes))
    }

    /// Seal and send one message. Encrypting past the key TTL triggers a
    /// rekey first. Returns (message id, signed-range digest, frame bytes
    /// as written).
    pub fn send(
        &mut self,
        msg_type: MessageType,
        payload: Vec<u8>,
        encrypt: bool,
    ) -> Result<(u64, [u8; 32], Vec<u8>)> {
        if encrypt && self.session.rekey_required() {
            self.rekey()?;
        }
        let sign = !(self.group_signing && msg_type == wire::LOG_BATCH);
        let (message_id, digest, bytes) = self.build(msg_type, payload, encrypt, sign)?;
        self.stream.write_raw(&bytes)?;
        Ok((message_id, digest, bytes))
    }

    /// Re-inject previously sent frame bytes verbatim (replay attacker
    /// simulation; bypasses sealing entirely).
    pub fn inject_raw(&mut self, bytes: &[u8]) -> Result<()> {
        self.stream.write_raw(bytes)
    }

    /// Drive a rekey as the requesting side: REKEY_REQUEST, then a fresh
    /// DH exchange. The new epoch applies once DH_ACCEPT arrives.
    pub fn rekey(&mut self) -> Result<()> {
        let (_, _, bytes) = self.build(wire::REKEY_REQUEST, Vec::new(), false, true)?;
        self.stream.write_raw(&bytes)?;
        let dh = DhKeyPair::generate(&mut rand::thread_rng());
        let (_, _, bytes) = self.build(wire::DH_OFFER, dh.public_bytes().to_vec(), false, true)?;
        self.stream.write_raw(&bytes)?;
        loop {
            match self.recv_event()? {
                Event::Message(inbound) if inbound.msg_type == wire::DH_ACCEPT => {
                    let key = dh.derive_session_key(&inbound.payload)?;
                    self.session.install_session_key(key);
                    return Ok(());
                }
                Event::Message(other) => {
                    return Err(TransportError::Protocol(format!(
                        "expected DH_ACCEPT, got type {}",
                        other.msg_type.code()
                    )));
                }
                Event::Rejected { .. } => continue,
                Event::Rekeyed => continue,
            }
        }
    }

    /// Receive one frame through the verification pipeline: framing,
    /// expiry, peer pinning, signature, epoch, replay window, then
    /// decryption. Peer-driven rekeys are handled transparently and
    /// surface as [`Event::Rekeyed`].
    pub fn recv_event(&mut self) -> Result<Event> {
        let message = self.stream.read_message()?;
        let received_ms = timeutil::now_millis();
        let message_id = message.message_id;

        if message.sender != self.peer_id || message.receiver != self.me.id() {
            return Ok(Event::Rejected {
                reason: RejectReason::WrongPeer,
                message_id,
            });
        }
        if wire::is_expired(&message, timeutil::now_secs()) {
            return Ok(Event::Rejected {
                reason: RejectReason::Expired,
                message_id,
            });
        }
        let range = message.signed_range()?;
        let signed = if message.signature.is_empty() {
            // only data frames may arrive unsigned, pending group
            // signature verification by the caller
            if message.msg_type != wire::LOG_BATCH {
                return Ok(Event::Rejected {
                    reason: RejectReason::Unsigned,
                    message_id,
                });
            }
            false
        } else {
            if !channel::verify_message(&self.peer_key, &range, &message.signature) {
                return Ok(Event::Rejected {
                    reason: RejectReason::BadSignature,
                    message_id,
                });
            }
            true
        };
        // epoch precedes the replay window so stale frames cannot seed a
        // freshly cleared window
        match message.epoch_extension() {
            Some(epoch) if epoch == self.session.epoch() => {}
            _ => {
                return Ok(Event::Rejected {
                    reason: RejectReason::EpochMismatch,
                    message_id,
                });
            }
        }
        if !self.session.check_replay(message_id) {
            return Ok(Event::Rejected {
                reason: RejectReason::Replay,
                message_id,
            });
        }
        if message.msg_type == wire::REKEY_REQUEST {
            self.answer_rekey()?;
            return Ok(Event::Rekeyed);
        }
        let payload = if message.enc_proto == wire::ENC_AES128 {
            match self.session.decrypt_payload(&message.payload) {
                Ok(plaintext) => plaintext,
                Err(_) => {
                    return Ok(Event::Rejected {
                        reason: RejectReason::DecryptFailed,
                        message_id,
                    });
                }
            }
        } else {
            message.payload
        };
        Ok(Event::Message(Inbound {
            msg_type: message.msg_type,
            message_id,
            payload,
            signed,
            digest: message_digest(&range),
            received_ms,
        }))
    }

    /// Responder side of a rekey: read the DH_OFFER that follows a
    /// REKEY_REQUEST and install the new key.
    fn answer_rekey(&mut self) -> Result<()> {
        loop {
            match self.recv_event()? {
                Event::Message(inbound) if inbound.msg_type == wire::DH_OFFER => {
                    let dh = DhKeyPair::generate(&mut rand::thread_rng());
                    let key = dh.derive_session_key(&inbound.payload)?;
                    let (_, _, bytes) =
                        self.build(wire::DH_ACCEPT, dh.public_bytes().to_vec(), false, true)?;
                    self.stream.write_raw(&bytes)?;
                    self.session.install_session_key(key);
                    return Ok(());
                }
                Event::Message(other) => {
                    return Err(TransportError::Protocol(format!(
                        "expected DH_OFFER after rekey request, got type {}",
                        other.msg_type.code()
                    )));
                }
                Event::Rejected { .. } => continue,
                Event::Rekeyed => {
                    return Err(TransportError::Protocol("nested rekey".into()));
                }
            }
        }
    }

    /// Receive, skipping rejected frames and rekeys, until a message
    /// arrives.
    pub fn recv_message(&mut self) -> Result<Inbound> {
        loop {
            match self.recv_event()? {
                Event::Message(inbound) => return Ok(inbound),
                Event::Rejected { .. } | Event::Rekeyed => continue,
            }
        }
    }

    /// Send an ACK referencing an inbound message id.
    pub fn send_ack(&mut self, ref_id: u64) -> Result<()> {
        self.send(wire::ACK, encode_ack(ref_id), false)?;
        Ok(())
    }

    /// Send an ERROR with a reason code and detail text.
    pub fn send_error(&mut self, code: u8, detail: &str) -> Result<()> {
        self.send(wire::ERROR, encode_error(code, detail), false)?;
        Ok(())
    }
}

fn build_signed(
    me: &EndpointIdentity,
    receiver: EndpointId,
    msg_type: MessageType,
    payload: Vec<u8>,
    serial: &mut u64,
    validity_secs: u64,
) -> Result<WireMessage> {
    let mut message = WireMessage::new(msg_type, me.id(), receiver);
    message.message_id = *serial;
    *serial += 1;
    message.validity = timeutil::now_secs() + validity_secs;
    message.payload = payload;
    message.signature = me.sign(&message.signed_range()?);
    Ok(message)
}

fn read_checked(stream: &mut FrameStream, me: &EndpointIdentity) -> Result<WireMessage> {
    let message = stream.read_message()?;
    if message.msg_type == wire::ERROR {
        let (code, detail) = parse_error(&message.payload).unwrap_or((0, String::new()));
        return Err(TransportError::PeerError { code, detail });
    }
    if wire::is_expired(&message, timeutil::now_secs()) {
        return Err(TransportError::Protocol("handshake message expired".into()));
    }
    if !message.receiver.is_zero() && message.receiver != me.id() {
        return Err(TransportError::Protocol(
            "message addressed to another endpoint".into(),
        ));
    }
    Ok(message)
}

fn verify_signed(message: &WireMessage, key: &RsaPublicKey) -> Result<()> {
    let range = message.signed_range()?;
    if message.signature.is_empty() || !channel::verify_message(key, &range, &message.signature) {
        return Err(ChannelError::Auth("handshake signature invalid".into()).into());
    }
    Ok(())
}

fn read_from_peer(
    stream: &mut FrameStream,
    me: &EndpointIdentity,
    peer_id: EndpointId,
    peer_key: &RsaPublicKey,
) -> Result<WireMessage> {
    let message = read_checked(stream, me)?;
    if message.sender != peer_id {
        return Err(TransportError::Protocol("unexpected sender mid-handshake".into()));
    }
    verify_signed(&message, peer_key)?;
    Ok(message)
}

fn expect_type(message: &WireMessage, expected: MessageType) -> Result<()> {
    if message.msg_type != expected {
        return Err(TransportError::Protocol(format!(
            "expected message type {}, got {}",
            expected.code(),
            message.msg_type.code()
        )));
    }
    Ok(())
}

// --- payload codecs ---------------------------------------------------

const CLOCK_REQ: u8 = 0;
const CLOCK_RESP: u8 = 1;
const CLOCK_FIN: u8 = 2;

fn clock_req(t1: u64) -> Vec<u8> {
    let mut out = vec![CLOCK_REQ];
    out.extend_from_slice(&t1.to_be_bytes());
    out
}

fn clock_resp(t1: u64, t2: u64, t3: u64) -> Vec<u8> {
    let mut out = vec![CLOCK_RESP];
    for t in [t1, t2, t3] {
        out.extend_from_slice(&t.to_be_bytes());
    }
    out
}

fn clock_fin(u1: u64, u2: u64, u3: u64) -> Vec<u8> {
    let mut out = vec![CLOCK_FIN];
    for t in [u1, u2, u3] {
        out.extend_from_slice(&t.to_be_bytes());
    }
    out
}

fn take_u64(payload: &[u8], at: usize) -> Result<u64> {
    payload
        .get(at..at + 8)
        .map(|s| u64::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| TransportError::Protocol("payload truncated".into()))
}

/// Parse a CLOCK_SYNC request payload (kind byte + t1).
pub fn parse_clock_req(payload: &[u8]) -> Result<u64> {
    if payload.len() != 9 || payload[0] != CLOCK_REQ {
        return Err(TransportError::Protocol("bad clock sync request".into()));
    }
    take_u64(payload, 1)
}

/// Parse a CLOCK_SYNC response payload (kind byte + t1, t2, t3).
pub fn parse_clock_resp(payload: &[u8]) -> Result<(u64, u64, u64)> {
    if payload.len() != 25 || payload[0] != CLOCK_RESP {
        return Err(TransportError::Protocol("bad clock sync response".into()));
    }
    Ok((take_u64(payload, 1)?, take_u64(payload, 9)?, take_u64(payload, 17)?))
}

/// Parse a CLOCK_SYNC finish payload (kind byte + u1, u2, u3).
pub fn parse_clock_fin(payload: &[u8]) -> Result<(u64, u64, u64)> {
    if payload.len() != 25 || payload[0] != CLOCK_FIN {
        return Err(TransportError::Protocol("bad clock sync finish".into()));
    }
    Ok((take_u64(payload, 1)?, take_u64(payload, 9)?, take_u64(payload, 17)?))
}

/// ACK payload: the message id being acknowledged.
pub fn encode_ack(ref_id: u64) -> Vec<u8> {
    ref_id.to_be_bytes().to_vec()
}

pub fn parse_ack(payload: &[u8]) -> Result<u64> {
    if payload.len() != 8 {
        return Err(TransportError::Protocol("bad ack payload".into()));
    }
    take_u64(payload, 0)
}

/// ERROR payload: reason code byte plus UTF-8 detail.
pub fn encode_error(code: u8, detail: &str) -> Vec<u8> {
    let mut out = vec![code];
    out.extend_from_slice(detail.as_bytes());
    out
}

pub fn parse_error(payload: &[u8]) -> Result<(u8, String)> {
    if payload.is_empty() {
        return Err(TransportError::Protocol("empty error payload".into()));
    }
    Ok((
        payload[0],
        String::from_utf8_lossy(&payload[1..]).into_owned(),
    ))
}
