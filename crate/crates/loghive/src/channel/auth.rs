//! Mutual challenge-response authentication.
//!
//! The challenger draws a 4096-bit random nonce and sends it through its
//! own private-key transform; the peer inverts the transform with the
//! challenger's public key, re-transforms the nonce under its own private
//! key, and sends it back. The exchange succeeds iff the challenger
//! recovers its original nonce — both sides have then proven possession
//! of the private keys matching their certificates.
//!
//! The transform is a deterministic signature-style private-key operation
//! applied per chunk: `SHA-256(nonce) || nonce` is split to fit the
//! modulus, each chunk gets PKCS#1-style `00 01 FF.. 00` padding and is
//! raised to the private exponent. Inversion checks the padding and the
//! digest, so any tamper or wrong-key input is rejected rather than
//! yielding garbage.

use rand::RngCore;
use rsa::traits::{PrivateKeyParts, PublicKeyParts};
use rsa::{BigUint, RsaPrivateKey, RsaPublicKey};
use sha2::{Digest, Sha256};
use x509_cert::Certificate;

use crate::identity::{verify_certificate, EndpointId, EndpointIdentity};

use super::ChannelError;

/// Challenge nonce width: 4096 bits.
pub const NONCE_LEN: usize = 512;

const DIGEST_LEN: usize = 32;
/// `00 01 <at least 8 x FF> 00` framing overhead per chunk.
const PAD_OVERHEAD: usize = 11;

/// An outstanding challenge awaiting the peer's response.
#[derive(Debug)]
pub struct Challenge {
    nonce: Vec<u8>,
    issuer: EndpointId,
    target: EndpointId,
    issued_at: u64,
}

impl Challenge {
    pub fn nonce(&self) -> &[u8] {
        &self.nonce
    }
    pub fn issuer(&self) -> EndpointId {
        self.issuer
    }
    pub fn target(&self) -> EndpointId {
        self.target
    }
    pub fn issued_at(&self) -> u64 {
        self.issued_at
    }
}

/// Begin authenticating against a peer: validate its certificate against
/// the trusted CA, draw a fresh nonce, and produce the outbound transform
/// to send as a CHALLENGE payload.
pub fn start_authentication(
    me: &EndpointIdentity,
    peer_id: EndpointId,
    peer_cert: &Certificate,
    trusted_ca: &Certificate,
    now_secs: u64,
) -> Result<(Challenge, Vec<u8>), ChannelError> {
    verify_certificate(peer_cert, trusted_ca)
        .map_err(|e| ChannelError::Trust(format!("peer certificate rejected: {e}")))?;
    let mut nonce = vec![0u8; NONCE_LEN];
    rand::rngs::OsRng.fill_bytes(&mut nonce);
    let outbound = private_transform(me.private_key(), &nonce)?;
    Ok((
        Challenge {
            nonce,
            issuer: me.id(),
            target: peer_id,
            issued_at: now_secs,
        },
        outbound,
    ))
}

/// Answer a CHALLENGE: recover the nonce with the challenger's public key
/// and re-transform it under our own private key.
pub fn respond_to_challenge(
    me: &EndpointIdentity,
    inbound: &[u8],
    peer_public: &RsaPublicKey,
) -> Result<Vec<u8>, ChannelError> {
    let nonce = public_recover(peer_public, inbound)?;
    private_transform(me.private_key(), &nonce)
}

/// Check a CHALLENGE_RESPONSE: the peer is authentic iff the recovered
/// value equals the nonce we issued.
pub fn verify_challenge(original: &Challenge, response: &[u8], peer_public: &RsaPublicKey) -> bool {
    match public_recover(peer_public, response) {
        Ok(nonce) => nonce == original.nonce,
        Err(_) => false,
    }
}

/// Private-key transform of a nonce: deterministic padded chunks of
/// `SHA-256(nonce) || nonce`, each raised to the private exponent.
fn private_transform(key: &RsaPrivateKey, nonce: &[u8]) -> Result<Vec<u8>, ChannelError> {
    let k = key.size();
    let chunk_len = k - PAD_OVERHEAD;
    let mut message = Vec::with_capacity(DIGEST_LEN + nonce.len());
    message.extend_from_slice(&Sha256::digest(nonce));
    message.extend_from_slice(nonce);

    let n = key.n();
    let d = key.d();
    let mut out = Vec::with_capacity(message.len().div_ceil(chunk_len) * k);
    for chunk in message.chunks(chunk_len) {
        let mut em = Vec::with_capacity(k);
        em.push(0x00);
        em.push(0x01);
        em.resize(k - chunk.len() - 1, 0xff);
        em.push(0x00);
        em.extend_from_slice(chunk);
        let c = BigUint::from_bytes_be(&em).modpow(d, n);
        out.extend_from_slice(&to_fixed(&c, k));
    }
    Ok(out)
}

/// Invert a private-key transform with the presumed owner's public key,
/// checking padding and the embedded digest.
fn public_recover(key: &RsaPublicKey, transformed: &[u8]) -> Result<Vec<u8>, ChannelError> {
    let k = key.size();
    if transformed.is_empty() || transformed.len() % k != 0 {
        return Err(ChannelError::Auth("transform length mismatch".into()));
    }
    let n = key.n();
    let e = key.e();
    let mut message = Vec::new();
    for block in transformed.chunks(k) {
        let m = BigUint::from_bytes_be(block).modpow(e, n);
        let em = to_fixed(&m, k);
        if em[0] != 0x00 || em[1] != 0x01 {
            return Err(ChannelError::Auth("padding check failed".into()));
        }
        let mut i = 2;
        while i < em.len() && em[i] == 0xff {
            i += 1;
        }
        if i < 2 + 8 || i >= em.len() || em[i] != 0x00 {
            return Err(ChannelError::Auth("padding check failed".into()));
        }
        message.extend_from_slice(&em[i + 1..]);
    }
    if message.len() < DIGEST_LEN {
        return Err(ChannelError::Auth("recovered message too short".into()));
    }
    let (digest, nonce) = message.split_at(DIGEST_LEN);
    if Sha256::digest(nonce).as_slice() != digest {
        return Err(ChannelError::Auth("nonce digest mismatch".into()));
    }
    Ok(nonce.to_vec())
}

fn to_fixed(value: &BigUint, width: usize) -> Vec<u8> {
    let bytes = value.to_bytes_be();
    let mut out = vec![0u8; width];
    out[width - bytes.len()..].copy_from_slice(&bytes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{create_identity, DevCa, EndpointId, Role};
    use tempfile::tempdir;

    struct Fixture {
        ca: DevCa,
        device: EndpointIdentity,
        device_cert: Certificate,
        agent: EndpointIdentity,
        agent_cert: Certificate,
        _dir: tempfile::TempDir,
    }

    fn fixture() -> Fixture {
        let dir = tempdir().unwrap();
        let ca = DevCa::create(&dir.path().join("ca"), "test ca").unwrap();
        let device =
            create_identity(&dir.path().join("dev"), EndpointId::new([1; 20]), Role::Device).unwrap();
        let agent =
            create_identity(&dir.path().join("agt"), EndpointId::new([2; 20]), Role::Agent).unwrap();
        let device_cert = ca.issue_certificate(device.id(), device.public_key()).unwrap();
        let agent_cert = ca.issue_certificate(agent.id(), agent.public_key()).unwrap();
        Fixture {
            ca,
            device,
            device_cert,
            agent,
            agent_cert,
            _dir: dir,
        }
    }

    #[test]
    fn nonce_is_4096_bits_and_fresh() {
        let f = fixture();
        let (c1, t1) = start_authentication(
            &f.device,
            f.agent.id(),
            &f.agent_cert,
            f.ca.certificate(),
            0,
        )
        .unwrap();
        let (c2, t2) = start_authentication(
            &f.device,
            f.agent.id(),
            &f.agent_cert,
            f.ca.certificate(),
            0,
        )
        .unwrap();
        assert_eq!(c1.nonce().len(), NONCE_LEN);
        assert_ne!(c1.nonce(), c2.nonce());
        assert_ne!(t1, t2);
    }

    #[test]
    fn honest_exchange_succeeds() {
        let f = fixture();
        let (challenge, outbound) = start_authentication(
            &f.device,
            f.agent.id(),
            &f.agent_cert,
            f.ca.certificate(),
            0,
        )
        .unwrap();
        let response =
            respond_to_challenge(&f.agent, &outbound, f.device.public_key()).unwrap();
        assert!(verify_challenge(&challenge, &response, f.agent.public_key()));
    }

    #[test]
    fn untrusted_peer_certificate_rejected() {
        let f = fixture();
        let dir = tempdir().unwrap();
        let rogue_ca = DevCa::create(dir.path(), "rogue").unwrap();
        let rogue_cert = rogue_ca
            .issue_certificate(f.agent.id(), f.agent.public_key())
            .unwrap();
        let err = start_authentication(
            &f.device,
            f.agent.id(),
            &rogue_cert,
            f.ca.certificate(),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, ChannelError::Trust(_)), "got {err:?}");
    }

    #[test]
    fn flipped_bit_in_challenge_is_auth_error() {
        let f = fixture();
        let (_, mut outbound) = start_authentication(
            &f.device,
            f.agent.id(),
            &f.agent_cert,
            f.ca.certificate(),
            0,
        )
        .unwrap();
        outbound[40] ^= 0x01;
        let err = respond_to_challenge(&f.agent, &outbound, f.device.public_key()).unwrap_err();
        assert!(matches!(err, ChannelError::Auth(_)), "got {err:?}");
    }

    #[test]
    fn challenge_from_unrelated_key_is_auth_error() {
        let f = fixture();
        let dir = tempdir().unwrap();
        let impostor =
            create_identity(dir.path(), EndpointId::new([9; 20]), Role::Device).unwrap();
        let (_, outbound) = start_authentication(
            &impostor,
            f.agent.id(),
            &f.agent_cert,
            f.ca.certificate(),
            0,
        )
        .unwrap();
        // agent inverts with the *claimed* device's public key
        let err = respond_to_challenge(&f.agent, &outbound, f.device.public_key()).unwrap_err();
        assert!(matches!(err, ChannelError::Auth(_)), "got {err:?}");
    }

    #[test]
    fn impostor_response_fails_verification() {
        let f = fixture();
        let dir = tempdir().unwrap();
        let impostor =
            create_identity(dir.path(), EndpointId::new([9; 20]), Role::Agent).unwrap();
        let (challenge, outbound) = start_authentication(
            &f.device,
            f.agent.id(),
            &f.agent_cert,
            f.ca.certificate(),
            0,
        )
        .unwrap();
        // impostor can recover the nonce (public operation) but cannot
        // produce the agent's transform of it
        let nonce = public_recover(f.device.public_key(), &outbound).unwrap();
        let forged = private_transform(impostor.private_key(), &nonce).unwrap();
        assert!(!verify_challenge(&challenge, &forged, f.agent.public_key()));
    }

    #[test]
    fn replaying_the_original_transform_fails() {
        let f = fixture();
        let (challenge, outbound) = start_authentication(
            &f.device,
            f.agent.id(),
            &f.agent_cert,
            f.ca.certificate(),
            0,
        )
        .unwrap();
        // echoing the issuer's own transform back is not a valid response:
        // it inverts under the issuer's key, not the peer's
        assert!(!verify_challenge(&challenge, &outbound, f.agent.public_key()));
    }
}
