//! Message and group signatures (SHA-256 digests under RSA).
//!
//! Individual messages are signed over their serialized range. Group
//! signing amortizes the cost: the sender accumulates the 32-byte digest
//! of each message and signs the concatenation; a receiver that fails to
//! verify the group asks for all of its messages again.

use rsa::RsaPublicKey;
use sha2::{Digest, Sha256};

use crate::identity::{verify_signature, EndpointIdentity};

use super::ChannelError;

pub const DIGEST_LEN: usize = 32;

/// SHA-256 digest of a message's signed range, as used in group
/// signatures.
pub fn message_digest(serialized_range: &[u8]) -> [u8; DIGEST_LEN] {
    Sha256::digest(serialized_range).into()
}

/// Sign a serialized message range. The signature goes into the trailing
/// signature field of the wire message.
pub fn sign_message(me: &EndpointIdentity, serialized_range: &[u8]) -> Vec<u8> {
    me.sign(serialized_range)
}

/// Verify a per-message signature under the sender's public key.
pub fn verify_message(key: &RsaPublicKey, serialized_range: &[u8], signature: &[u8]) -> bool {
    verify_signature(key, serialized_range, signature)
}

/// Build a BATCH_SIGNATURE payload: the digests of the covered messages
/// in transmission order, then one signature over their concatenation.
///
/// Payload layout: `count u32 | count x 32-byte digest | sig_len u16 | sig`.
pub fn sign_batch(
    me: &EndpointIdentity,
    digests: &[[u8; DIGEST_LEN]],
) -> Result<Vec<u8>, ChannelError> {
    if digests.is_empty() {
        return Err(ChannelError::Validation("empty batch".into()));
    }
    let mut joined = Vec::with_capacity(digests.len() * DIGEST_LEN);
    for d in digests {
        joined.extend_from_slice(d);
    }
    let sig = me.sign(&joined);
    let mut payload = Vec::with_capacity(4 + joined.len() + 2 + sig.len());
    payload.extend_from_slice(&(digests.len() as u32).to_be_bytes());
    payload.extend_from_slice(&joined);
    payload.extend_from_slice(&(sig.len() as u16).to_be_bytes());
    payload.extend_from_slice(&sig);
    Ok(payload)
}

/// Parse a BATCH_SIGNATURE payload into (digests, signature). Input is
/// untrusted.
pub fn parse_batch_signature(
    payload: &[u8],
) -> Result<(Vec<[u8; DIGEST_LEN]>, Vec<u8>), ChannelError> {
    if payload.len() < 4 {
        return Err(ChannelError::Validation("batch signature too short".into()));
    }
    let count = u32::from_be_bytes(payload[..4].try_into().unwrap()) as usize;
    let digests_end = 4usize
        .checked_add(count.checked_mul(DIGEST_LEN).ok_or_else(|| {
            ChannelError::Validation("batch signature count overflow".into())
        })?)
        .ok_or_else(|| ChannelError::Validation("batch signature count overflow".into()))?;
    if count == 0 || payload.len() < digests_end + 2 {
        return Err(ChannelError::Validation("batch signature truncated".into()));
    }
    let mut digests = Vec::with_capacity(count);
    for i in 0..count {
        let at = 4 + i * DIGEST_LEN;
        digests.push(payload[at..at + DIGEST_LEN].try_into().unwrap());
    }
    let sig_len = u16::from_be_bytes(payload[digests_end..digests_end + 2].try_into().unwrap()) as usize;
    let sig_end = digests_end + 2 + sig_len;
    if payload.len() != sig_end {
        return Err(ChannelError::Validation("batch signature length mismatch".into()));
    }
    Ok((digests, payload[digests_end + 2..sig_end].to_vec()))
}

/// Verify a BATCH_SIGNATURE payload against the digests the receiver
/// computed itself, in receive order. Any mismatch or bad signature means
/// every covered message must be retransmitted.
pub fn verify_batch(
    payload: &[u8],
    computed_digests: &[[u8; DIGEST_LEN]],
    key: &RsaPublicKey,
) -> Result<(), ChannelError> {
    let (carried, sig) = parse_batch_signature(payload)?;
    if carried.len() != computed_digests.len() {
        return Err(ChannelError::Auth(format!(
            "batch covers {} messages, received {}",
            carried.len(),
            computed_digests.len()
        )));
    }
    if carried != computed_digests {
        return Err(ChannelError::Auth("batch digest mismatch".into()));
    }
    let mut joined = Vec::with_capacity(carried.len() * DIGEST_LEN);
    for d in &carried {
        joined.extend_from_slice(d);
    }
    if !verify_signature(key, &joined, &sig) {
        return Err(ChannelError::Auth("batch signature invalid".into()));
    }
    Ok(())
}
