//! Payload encryption: AES-128-CBC with PKCS#7 padding and a fresh random
//! IV prepended to every ciphertext.

use aes::cipher::{block_padding::Pkcs7, BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use rand::RngCore;

use super::ChannelError;

type Aes128CbcEnc = cbc::Encryptor<aes::Aes128>;
type Aes128CbcDec = cbc::Decryptor<aes::Aes128>;

pub const IV_LEN: usize = 16;

/// Encrypt `plaintext`; output is `IV || ciphertext`.
pub fn encrypt_aes128(key: &[u8; 16], plaintext: &[u8]) -> Vec<u8> {
    let mut iv = [0u8; IV_LEN];
    rand::rngs::OsRng.fill_bytes(&mut iv);
    let ct = Aes128CbcEnc::new(key.into(), &iv.into()).encrypt_padded_vec_mut::<Pkcs7>(plaintext);
    let mut out = Vec::with_capacity(IV_LEN + ct.len());
    out.extend_from_slice(&iv);
    out.extend_from_slice(&ct);
    out
}

/// Decrypt `IV || ciphertext`; fails on truncated input, misaligned
/// ciphertext, or bad padding (wrong key, tamper, cross-epoch frame).
pub fn decrypt_aes128(key: &[u8; 16], data: &[u8]) -> Result<Vec<u8>, ChannelError> {
    if data.len() < IV_LEN || (data.len() - IV_LEN) % 16 != 0 || data.len() == IV_LEN {
        return Err(ChannelError::Crypto("ciphertext malformed".into()));
    }
    let (iv, ct) = data.split_at(IV_LEN);
    let iv: [u8; IV_LEN] = iv.try_into().unwrap();
    Aes128CbcDec::new(key.into(), &iv.into())
        .decrypt_padded_vec_mut::<Pkcs7>(ct)
        .map_err(|_| ChannelError::Crypto("decryption failed".into()))
}
