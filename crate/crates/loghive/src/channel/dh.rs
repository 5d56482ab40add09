//! Diffie-Hellman session-key agreement over the 2048-bit MODP group
//! (RFC 3526 group 14). The 128-bit session key is the truncated SHA-256
//! of the shared secret.

use std::sync::OnceLock;

use num_bigint::BigUint;
use rand::RngCore;
use sha2::{Digest, Sha256};

use super::ChannelError;

/// Serialized public-value width: the modulus size in bytes.
pub const PUBLIC_LEN: usize = 256;
/// Session key width (AES-128).
pub const SESSION_KEY_LEN: usize = 16;
/// Private exponent width in bytes.
const EXPONENT_LEN: usize = 32;

// RFC 3526, section 3: 2048-bit MODP group, generator 2.
const GROUP14_PRIME_HEX: &str = "\
FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74\
020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437\
4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED\
EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05\
98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB\
9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B\
E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718\
3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF";

fn prime() -> &'static BigUint {
    static P: OnceLock<BigUint> = OnceLock::new();
    P.get_or_init(|| BigUint::parse_bytes(GROUP14_PRIME_HEX.as_bytes(), 16).expect("valid prime hex"))
}

/// One side's ephemeral DH keypair.
pub struct DhKeyPair {
    private: BigUint,
    public: BigUint,
}

impl DhKeyPair {
    /// Generate a fresh keypair with a 256-bit private exponent.
    pub fn generate<R: RngCore>(rng: &mut R) -> DhKeyPair {
        let p = prime();
        let g = BigUint::from(2u32);
        loop {
            let mut bytes = [0u8; EXPONENT_LEN];
            rng.fill_bytes(&mut bytes);
            let private = BigUint::from_bytes_be(&bytes);
            if private < BigUint::from(2u32) {
                continue;
            }
            let public = g.modpow(&private, p);
            return DhKeyPair { private, public };
        }
    }

    /// Public value, left-padded big-endian to the modulus width.
    pub fn public_bytes(&self) -> [u8; PUBLIC_LEN] {
        to_fixed(&self.public)
    }

    /// Derive the shared 128-bit session key from the peer's public value.
    ///
    /// Degenerate peer values (`<= 1` or `>= p - 1`) are rejected; they
    /// would pin the shared secret regardless of our exponent.
    pub fn derive_session_key(&self, peer_public: &[u8]) -> Result<[u8; SESSION_KEY_LEN], ChannelError> {
        let p = prime();
        let peer = BigUint::from_bytes_be(peer_public);
        let one = BigUint::from(1u32);
        if peer <= one || peer >= p - &one {
            return Err(ChannelError::KeyAgreement(
                "peer public value out of range".into(),
            ));
        }
        let shared = peer.modpow(&self.private, p);
        let digest = Sha256::digest(to_fixed(&shared));
        let mut key = [0u8; SESSION_KEY_LEN];
        key.copy_from_slice(&digest[..SESSION_KEY_LEN]);
        Ok(key)
    }
}

fn to_fixed(value: &BigUint) -> [u8; PUBLIC_LEN] {
    let bytes = value.to_bytes_be();
    let mut out = [0u8; PUBLIC_LEN];
    out[PUBLIC_LEN - bytes.len()..].copy_from_slice(&bytes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_sides_derive_equal_keys() {
        let mut rng = rand::thread_rng();
        for _ in 0..10 {
            let a = DhKeyPair::generate(&mut rng);
            let b = DhKeyPair::generate(&mut rng);
            let ka = a.derive_session_key(&b.public_bytes()).unwrap();
            let kb = b.derive_session_key(&a.public_bytes()).unwrap();
            assert_eq!(ka, kb);
            assert_eq!(ka.len(), 16);
        }
    }

    #[test]
    fn degenerate_peer_values_rejected() {
        let mut rng = rand::thread_rng();
        let a = DhKeyPair::generate(&mut rng);
        assert!(a.derive_session_key(&[0u8]).is_err());
        assert!(a.derive_session_key(&[1u8]).is_err());
        let p_minus_1 = prime() - BigUint::from(1u32);
        assert!(a.derive_session_key(&p_minus_1.to_bytes_be()).is_err());
        let p_plus_1 = prime() + BigUint::from(1u32);
        assert!(a.derive_session_key(&p_plus_1.to_bytes_be()).is_err());
    }

    #[test]
    fn distinct_exponents_distinct_keys() {
        let mut rng = rand::thread_rng();
        let a = DhKeyPair::generate(&mut rng);
        let b = DhKeyPair::generate(&mut rng);
        let c = DhKeyPair::generate(&mut rng);
        let kab = a.derive_session_key(&b.public_bytes()).unwrap();
        let kac = a.derive_session_key(&c.public_bytes()).unwrap();
        assert_ne!(kab, kac);
    }
}
