//! Wire format of protocol messages: a fixed header carrying identities,
//! serial, validity, and algorithm selectors, followed by TLV extension
//! headers, the payload, and a trailing signature.
//!
//! Layout (all integers big-endian):
//!
//! ```text
//! magic "LHP1" | version u8 | msg_type u8 | sender 20B | receiver 20B |
//! message_id u64 | validity u64 | sig_proto u8 | enc_proto u8 |
//! ext_count u8 | (ext_type u8, len u16, value)* |
//! payload_len u32 | payload | sig_len u16 | signature
//! ```
//!
//! The signature covers everything up to (and excluding) `sig_len`. A
//! message with no extensions, empty payload, and empty signature is
//! exactly [`MIN_MESSAGE_LEN`] bytes.

use crate::identity::EndpointId;

pub const MAGIC: [u8; 4] = *b"LHP1";
pub const VERSION: u8 = 1;

/// Fixed overhead: magic(4) + version(1) + type(1) + sender(20) +
/// receiver(20) + message_id(8) + validity(8) + sig_proto(1) +
/// enc_proto(1) + ext_count(1) + payload_len(4) + sig_len(2).
pub const MIN_MESSAGE_LEN: usize = 71;

/// Upper bound on payload size accepted by the decoder; frames claiming
/// more are treated as corrupt rather than waited for.
pub const MAX_PAYLOAD_LEN: usize = 16 * 1024 * 1024;

pub const MAX_EXT_VALUE_LEN: usize = 65535;
pub const MAX_EXTENSIONS: usize = 255;

/// Signature protocol selectors.
pub const SIG_SHA256_RSA: u8 = 0;
/// Encryption protocol selectors.
pub const ENC_NONE: u8 = 0;
pub const ENC_AES128: u8 = 1;

/// Extension header types.
pub mod ext {
    /// u32 session epoch; lets receivers reject cross-epoch frames
    /// deterministically.
    pub const EPOCH: u8 = 1;
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum WireError {
    #[error("validation: {0}")]
    Validation(String),
    #[error("framing: {0}")]
    Framing(String),
    /// The buffer ends before the frame does; callers reading from a
    /// stream should fetch more bytes and retry.
    #[error("incomplete frame: need at least {needed} more bytes")]
    Incomplete { needed: usize },
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
}

type Result<T> = std::result::Result<T, WireError>;

/// One of the 128 message types: a 4-bit priority band and a 3-bit class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MessageType(u8);

impl MessageType {
    pub fn new(code: u8) -> Result<MessageType> {
        if code >= 128 {
            return Err(WireError::Validation(format!(
                "message type {code} out of range (128 types)"
            )));
        }
        Ok(MessageType(code))
    }

    pub fn from_parts(priority_band: u8, class_index: u8) -> Result<MessageType> {
        if priority_band >= 16 {
            return Err(WireError::Validation(format!("priority band {priority_band} out of range")));
        }
        if class_index >= 8 {
            return Err(WireError::Validation(format!("class index {class_index} out of range")));
        }
        Ok(MessageType(priority_band * 8 + class_index))
    }

    pub fn code(self) -> u8 {
        self.0
    }

    pub fn priority_band(self) -> u8 {
        self.0 / 8
    }

    pub fn class_index(self) -> u8 {
        self.0 % 8
    }
}

// Assigned type codes. Band 0 is control, band 1 discovery, band 2 data,
// band 3 orchestration; the rest are reserved.
pub const CHALLENGE: MessageType = MessageType(0);
pub const CHALLENGE_RESPONSE: MessageType = MessageType(1);
pub const DH_OFFER: MessageType = MessageType(2);
pub const DH_ACCEPT: MessageType = MessageType(3);
pub const CLOCK_SYNC: MessageType = MessageType(4);
pub const REKEY_REQUEST: MessageType = MessageType(5);
pub const ACK: MessageType = MessageType(6);
pub const ERROR: MessageType = MessageType(7);
pub const ADM: MessageType = MessageType(8);
pub const AOM: MessageType = MessageType(9);
pub const LOG_BATCH: MessageType = MessageType(16);
pub const BATCH_SIGNATURE: MessageType = MessageType(17);
pub const CONTROL_COMMAND: MessageType = MessageType(24);

/// A TLV extension header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extension {
    pub ext_type: u8,
    pub value: Vec<u8>,
}

impl Extension {
    pub fn new(ext_type: u8, value: Vec<u8>) -> Result<Extension> {
        if value.len() > MAX_EXT_VALUE_LEN {
            return Err(WireError::Validation(format!(
                "extension value {} bytes exceeds {MAX_EXT_VALUE_LEN}",
                value.len()
            )));
        }
        Ok(Extension { ext_type, value })
    }

    /// Epoch extension carrying the session key generation.
    pub fn epoch(epoch: u32) -> Extension {
        Extension {
            ext_type: ext::EPOCH,
            value: epoch.to_be_bytes().to_vec(),
        }
    }
}

/// One protocol message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub sender: EndpointId,
    pub receiver: EndpointId,
    pub message_id: u64,
    /// Absolute UTC expiry, seconds since the epoch. Acceptance is
    /// inclusive at the boundary.
    pub validity: u64,
    pub sig_proto: u8,
    pub enc_proto: u8,
    pub msg_type: MessageType,
    pub extensions: Vec<Extension>,
    pub payload: Vec<u8>,
    pub signature: Vec<u8>,
}

impl WireMessage {
    pub fn new(msg_type: MessageType, sender: EndpointId, receiver: EndpointId) -> WireMessage {
        WireMessage {
            sender,
            receiver,
            message_id: 0,
            validity: u64::MAX,
            sig_proto: SIG_SHA256_RSA,
            enc_proto: ENC_NONE,
            msg_type,
            extensions: Vec::new(),
            payload: Vec::new(),
            signature: Vec::new(),
        }
    }

    /// Epoch carried in the extension headers, if any.
    pub fn epoch_extension(&self) -> Option<u32> {
        self.extensions.iter().find(|e| e.ext_type == ext::EPOCH).and_then(|e| {
            let arr: [u8; 4] = e.value.as_slice().try_into().ok()?;
            Some(u32::from_be_bytes(arr))
        })
    }

    /// Total serialized size: `71 + Σ(3 + ext len) + payload + signature`.
    pub fn serialized_len(&self) -> usize {
        MIN_MESSAGE_LEN
            + self.extensions.iter().map(|e| 3 + e.value.len()).sum::<usize>()
            + self.payload.len()
            + self.signature.len()
    }

    /// The bytes a signature covers: the serialized header, extensions,
    /// and payload, exactly as transmitted. The trailing signature field
    /// is excluded.
    pub fn signed_range(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.serialized_len() - 2 - self.signature.len());
        self.encode_body(&mut out)?;
        Ok(out)
    }

    fn encode_body(&self, out: &mut Vec<u8>) -> Result<()> {
        if self.extensions.len() > MAX_EXTENSIONS {
            return Err(WireError::Validation(format!(
                "{} extensions exceeds {MAX_EXTENSIONS}",
                self.extensions.len()
            )));
        }
        if self.payload.len() > MAX_PAYLOAD_LEN {
            return Err(WireError::Validation(format!(
                "payload {} bytes exceeds {MAX_PAYLOAD_LEN}",
                self.payload.len()
            )));
        }
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.msg_type.code());
        out.extend_from_slice(self.sender.as_bytes());
        out.extend_from_slice(self.receiver.as_bytes());
        out.extend_from_slice(&self.message_id.to_be_bytes());
        out.extend_from_slice(&self.validity.to_be_bytes());
        out.push(self.sig_proto);
        out.push(self.enc_proto);
        out.push(self.extensions.len() as u8);
        for ext in &self.extensions {
            if ext.value.len() > MAX_EXT_VALUE_LEN {
                return Err(WireError::Validation(format!(
                    "extension value {} bytes exceeds {MAX_EXT_VALUE_LEN}",
                    ext.value.len()
                )));
            }
            out.push(ext.ext_type);
            out.extend_from_slice(&(ext.value.len() as u16).to_be_bytes());
            out.extend_from_slice(&ext.value);
        }
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        Ok(())
    }
}

/// Serialize a message. Fails on oversized extensions or payload; message
/// type range is enforced by construction.
pub fn encode_message(m: &WireMessage) -> Result<Vec<u8>> {
    if m.signature.len() > u16::MAX as usize {
        return Err(WireError::Validation(format!(
            "signature {} bytes exceeds {}",
            m.signature.len(),
            u16::MAX
        )));
    }
    let mut out = Vec::with_capacity(m.serialized_len());
    m.encode_body(&mut out)?;
    out.extend_from_slice(&(m.signature.len() as u16).to_be_bytes());
    out.extend_from_slice(&m.signature);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::Incomplete {
                needed: n - (self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse one message from the front of `buf`.
///
/// Returns the message and the number of bytes consumed; trailing bytes
/// beyond the frame are left untouched for the caller. A buffer that ends
/// mid-frame yields [`WireError::Incomplete`] so stream readers can fetch
/// more and retry.
pub fn decode_message(buf: &[u8]) -> Result<(WireMessage, usize)> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(WireError::Framing(format!("bad magic {magic:02x?}")));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(WireError::UnsupportedVersion(version));
    }
    let type_code = r.u8()?;
    let msg_type = MessageType::new(type_code)
        .map_err(|_| WireError::Framing(format!("message type {type_code} out of range")))?;
    let sender = EndpointId::new(r.take(20)?.try_into().unwrap());
    let receiver = EndpointId::new(r.take(20)?.try_into().unwrap());
    let message_id = r.u64()?;
    let validity = r.u64()?;
    let sig_proto = r.u8()?;
    let enc_proto = r.u8()?;
    let ext_count = r.u8()?;
    let mut extensions = Vec::with_capacity(ext_count as usize);
    for _ in 0..ext_count {
        let ext_type = r.u8()?;
        let len = r.u16()? as usize;
        let value = r.take(len)?.to_vec();
        extensions.push(Extension { ext_type, value });
    }
    let payload_len = r.u32()? as usize;
    if payload_len > MAX_PAYLOAD_LEN {
        return Err(WireError::Framing(format!(
            "payload length {payload_len} exceeds {MAX_PAYLOAD_LEN}"
        )));
    }
    let payload = r.take(payload_len)?.to_vec();
    let sig_len = r.u16()? as usize;
    let signature = r.take(sig_len)?.to_vec();

    Ok((
        WireMessage {
            sender,
            receiver,
            message_id,
            validity,
            sig_proto,
            enc_proto,
            msg_type,
            extensions,
            payload,
            signature,
        },
        r.pos,
    ))
}

/// True iff the message's validity window has passed. Acceptance is
/// inclusive: a message expiring exactly now is still valid.
pub fn is_expired(m: &WireMessage, now_secs: u64) -> bool {
    now_secs > m.validity
}
