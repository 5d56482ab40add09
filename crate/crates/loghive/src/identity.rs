//! Endpoint identities and credential storage.
//!
//! Every endpoint (device, agent, or server) is identified by a stable
//! 160-bit ID derived once from its MAC and IP address and persisted
//! afterwards, so the ID survives later address changes. Credentials are
//! an RSA keypair and an X.509 v3 certificate binding the hex ID as the
//! subject common name. Certificates of trusted peers live in a keyring
//! directory, each validated against the trusted CA when loaded.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use der::{Decode, DecodePem, Encode, EncodePem};
use rsa::pkcs1v15::{Signature, SigningKey, VerifyingKey};
use rsa::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey};
use rsa::signature::{SignatureEncoding, Signer, Verifier};
use rsa::{RsaPrivateKey, RsaPublicKey};
use sha1::{Digest, Sha1};
use sha2::Sha256;
use x509_cert::builder::{Builder, CertificateBuilder, Profile};
use x509_cert::name::Name;
use x509_cert::serial_number::SerialNumber;
use x509_cert::spki::SubjectPublicKeyInfoOwned;
use x509_cert::time::Validity;
use x509_cert::Certificate;

/// RSA modulus size for generated keys.
pub const RSA_KEY_BITS: usize = 2048;

/// Certificate lifetime for the development CA and the certs it issues.
const CERT_LIFETIME: Duration = Duration::from_secs(365 * 24 * 3600);

#[derive(Debug, thiserror::Error)]
pub enum IdentityError {
    #[error("validation: {0}")]
    Validation(String),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("trust: {0}")]
    Trust(String),
    #[error("crypto: {0}")]
    Crypto(String),
    #[error("identity has no certificate attached")]
    MissingCertificate,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, IdentityError>;

/// Stable 160-bit endpoint identifier.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EndpointId([u8; 20]);

impl EndpointId {
    pub const LEN: usize = 20;

    /// All-zero ID, used as the receiver before the peer has identified
    /// itself.
    pub const ZERO: EndpointId = EndpointId([0u8; 20]);

    pub fn new(bytes: [u8; 20]) -> Self {
        EndpointId(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let arr: [u8; 20] = bytes
            .try_into()
            .map_err(|_| IdentityError::Validation(format!("id must be 20 bytes, got {}", bytes.len())))?;
        Ok(EndpointId(arr))
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s.trim())
            .map_err(|e| IdentityError::Validation(format!("bad hex id: {e}")))?;
        Self::from_slice(&bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 20] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0u8; 20]
    }
}

impl fmt::Display for EndpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for EndpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EndpointId({})", self.to_hex())
    }
}

/// What kind of endpoint an identity belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Device,
    Agent,
    Server,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Device => f.write_str("device"),
            Role::Agent => f.write_str("agent"),
            Role::Server => f.write_str("server"),
        }
    }
}

/// Canonicalize a MAC address: exactly six colon-separated two-digit hex
/// octets, lowercased.
fn canonical_mac(mac: &str) -> Result<String> {
    let groups: Vec<&str> = mac.trim().split(':').collect();
    if groups.len() != 6 {
        return Err(IdentityError::Validation(format!(
            "MAC must have 6 colon-separated octets, got {}",
            groups.len()
        )));
    }
    for g in &groups {
        if g.len() != 2 || !g.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(IdentityError::Validation(format!("bad MAC octet {g:?}")));
        }
    }
    Ok(mac.trim().to_ascii_lowercase())
}

/// Canonical text form of an IP address (RFC 5952 for IPv6, via the
/// standard library's display).
fn canonical_ip(ip: &str) -> Result<String> {
    let addr: IpAddr = ip
        .trim()
        .parse()
        .map_err(|e| IdentityError::Validation(format!("bad IP address {ip:?}: {e}")))?;
    Ok(addr.to_string())
}

/// Derive the 160-bit endpoint ID from a MAC and IP address.
///
/// The digest input is `lowercase(mac) + "|" + canonical(ip)`; the same
/// pair always yields the same ID.
pub fn derive_endpoint_id(mac: &str, ip: &str) -> Result<EndpointId> {
    let input = format!("{}|{}", canonical_mac(mac)?, canonical_ip(ip)?);
    let digest = Sha1::digest(input.as_bytes());
    Ok(EndpointId(digest.into()))
}

/// An endpoint's identity: stable ID, RSA keypair, and (once issued) its
/// X.509 certificate.
pub struct EndpointIdentity {
    id: EndpointId,
    role: Role,
    private_key: RsaPrivateKey,
    public_key: RsaPublicKey,
    certificate: Option<Certificate>,
}

impl fmt::Debug for EndpointIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EndpointIdentity")
            .field("id", &self.id)
            .field("role", &self.role)
            .field("certificate", &self.certificate.is_some())
            .finish_non_exhaustive()
    }
}

impl EndpointIdentity {
    pub fn id(&self) -> EndpointId {
        self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn public_key(&self) -> &RsaPublicKey {
        &self.public_key
    }

    pub(crate) fn private_key(&self) -> &RsaPrivateKey {
        &self.private_key
    }

    pub fn certificate(&self) -> Result<&Certificate> {
        self.certificate.as_ref().ok_or(IdentityError::MissingCertificate)
    }

    pub fn certificate_der(&self) -> Result<Vec<u8>> {
        self.certificate()?
            .to_der()
            .map_err(|e| IdentityError::Crypto(format!("cert encode: {e}")))
    }

    /// RSA-PKCS#1v1.5 signature over the SHA-256 digest of `data`.
    pub fn sign(&self, data: &[u8]) -> Vec<u8> {
        let signer = SigningKey::<Sha256>::new(self.private_key.clone());
        signer.sign(data).to_vec()
    }
}

/// Verify an RSA-PKCS#1v1.5/SHA-256 signature under `key`.
pub fn verify_signature(key: &RsaPublicKey, data: &[u8], signature: &[u8]) -> bool {
    let Ok(sig) = Signature::try_from(signature) else {
        return false;
    };
    VerifyingKey::<Sha256>::new(key.clone())
        .verify(data, &sig)
        .is_ok()
}

fn id_path(store: &Path) -> PathBuf {
    store.join("identity.id")
}
fn cert_path(store: &Path) -> PathBuf {
    store.join("cert.pem")
}
fn key_path(store: &Path) -> PathBuf {
    store.join("key.pem")
}

/// Load the identity at `store`, or derive and create one if the store is
/// empty. Once created, the ID is immutable: later calls return the
/// persisted identity no matter what `mac`/`ip` are passed.
pub fn load_or_create_identity(
    store: &Path,
    mac: &str,
    ip: &str,
    role: Role,
) -> Result<EndpointIdentity> {
    if id_path(store).exists() {
        return load_identity(store, role);
    }
    let id = derive_endpoint_id(mac, ip)?;
    create_identity(store, id, role)
}

/// Create a fresh identity with the given ID at `store`.
pub fn create_identity(store: &Path, id: EndpointId, role: Role) -> Result<EndpointIdentity> {
    fs::create_dir_all(store)?;
    let mut rng = rand::thread_rng();
    let private_key = RsaPrivateKey::new(&mut rng, RSA_KEY_BITS)
        .map_err(|e| IdentityError::Crypto(format!("keygen: {e}")))?;
    let public_key = private_key.to_public_key();

    let key_pem = private_key
        .to_pkcs8_pem(der::pem::LineEnding::LF)
        .map_err(|e| IdentityError::Crypto(format!("key encode: {e}")))?;
    write_private(&key_path(store), key_pem.as_bytes())?;
    fs::write(id_path(store), id.as_bytes())?;

    Ok(EndpointIdentity {
        id,
        role,
        private_key,
        public_key,
        certificate: None,
    })
}

/// Load an existing identity from `store`.
pub fn load_identity(store: &Path, role: Role) -> Result<EndpointIdentity> {
    let id_bytes = fs::read(id_path(store))?;
    if id_bytes.len() != EndpointId::LEN {
        return Err(IdentityError::Integrity(format!(
            "identity.id must be {} bytes, found {}",
            EndpointId::LEN,
            id_bytes.len()
        )));
    }
    let id = EndpointId::from_slice(&id_bytes)?;

    let key_pem = fs::read_to_string(key_path(store))?;
    let private_key = RsaPrivateKey::from_pkcs8_pem(&key_pem)
        .map_err(|e| IdentityError::Integrity(format!("key.pem unreadable: {e}")))?;
    let public_key = private_key.to_public_key();

    let certificate = match fs::read_to_string(cert_path(store)) {
        Ok(pem) => {
            let cert = Certificate::from_pem(pem.as_bytes())
                .map_err(|e| IdentityError::Integrity(format!("cert.pem unreadable: {e}")))?;
            let cert_key = certificate_public_key(&cert)?;
            if cert_key != public_key {
                return Err(IdentityError::Integrity(
                    "cert.pem public key does not match key.pem".into(),
                ));
            }
            Some(cert)
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };

    Ok(EndpointIdentity {
        id,
        role,
        private_key,
        public_key,
        certificate,
    })
}

/// Attach an issued certificate to the identity and persist it at `store`.
pub fn attach_certificate(
    identity: &mut EndpointIdentity,
    store: &Path,
    cert: Certificate,
) -> Result<()> {
    let cert_key = certificate_public_key(&cert)?;
    if cert_key != identity.public_key {
        return Err(IdentityError::Validation(
            "certificate public key does not match identity".into(),
        ));
    }
    let subject = certificate_subject_id(&cert)?;
    if subject != identity.id {
        return Err(IdentityError::Validation(
            "certificate subject does not match identity id".into(),
        ));
    }
    let pem = cert
        .to_pem(der::pem::LineEnding::LF)
        .map_err(|e| IdentityError::Crypto(format!("cert encode: {e}")))?;
    fs::write(cert_path(store), pem)?;
    identity.certificate = Some(cert);
    Ok(())
}

fn write_private(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut opts = fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Extract the RSA public key from a certificate.
pub fn certificate_public_key(cert: &Certificate) -> Result<RsaPublicKey> {
    let spki = cert
        .tbs_certificate
        .subject_public_key_info
        .to_der()
        .map_err(|e| IdentityError::Crypto(format!("spki encode: {e}")))?;
    RsaPublicKey::from_public_key_der(&spki)
        .map_err(|e| IdentityError::Crypto(format!("unsupported subject key: {e}")))
}

/// Parse the endpoint ID out of a certificate's subject common name.
pub fn certificate_subject_id(cert: &Certificate) -> Result<EndpointId> {
    let subject = cert.tbs_certificate.subject.to_string();
    let cn = subject
        .split(',')
        .map(str::trim)
        .find_map(|part| part.strip_prefix("CN="))
        .ok_or_else(|| IdentityError::Validation(format!("no CN in subject {subject:?}")))?;
    EndpointId::from_hex(cn)
}

/// Verify that `cert` was signed by the holder of `ca_cert`.
pub fn verify_certificate(cert: &Certificate, ca_cert: &Certificate) -> Result<()> {
    let ca_key = certificate_public_key(ca_cert)?;
    let tbs = cert
        .tbs_certificate
        .to_der()
        .map_err(|e| IdentityError::Crypto(format!("tbs encode: {e}")))?;
    let sig = Signature::try_from(cert.signature.raw_bytes())
        .map_err(|e| IdentityError::Trust(format!("bad signature encoding: {e}")))?;
    VerifyingKey::<Sha256>::new(ca_key)
        .verify(&tbs, &sig)
        .map_err(|_| IdentityError::Trust("certificate not signed by trusted CA".into()))
}

/// Development-only certificate authority. Issuance is deliberately out of
/// band; this exists so deployments can be provisioned without external
/// tooling.
pub struct DevCa {
    name: String,
    private_key: RsaPrivateKey,
    certificate: Certificate,
}

impl DevCa {
    /// Create a fresh self-signed CA and persist it under `store` as
    /// `ca_cert.pem` / `ca_key.pem`.
    pub fn create(store: &Path, name: &str) -> Result<DevCa> {
        fs::create_dir_all(store)?;
        let mut rng = rand::thread_rng();
        let private_key = RsaPrivateKey::new(&mut rng, RSA_KEY_BITS)
            .map_err(|e| IdentityError::Crypto(format!("keygen: {e}")))?;
        let subject = Name::from_str(&format!("CN={name}"))
            .map_err(|e| IdentityError::Validation(format!("bad CA name: {e}")))?;
        let spki = rsa_spki(&private_key.to_public_key())?;
        let signer = SigningKey::<Sha256>::new(private_key.clone());
        let builder = CertificateBuilder::new(
            Profile::Root,
            random_serial(),
            Validity::from_now(CERT_LIFETIME)
                .map_err(|e| IdentityError::Crypto(format!("validity: {e}")))?,
            subject,
            spki,
            &signer,
        )
        .map_err(|e| IdentityError::Crypto(format!("ca builder: {e}")))?;
        let certificate = builder
            .build::<Signature>()
            .map_err(|e| IdentityError::Crypto(format!("ca build: {e}")))?;

        let key_pem = private_key
            .to_pkcs8_pem(der::pem::LineEnding::LF)
            .map_err(|e| IdentityError::Crypto(format!("key encode: {e}")))?;
        write_private(&store.join("ca_key.pem"), key_pem.as_bytes())?;
        let cert_pem = certificate
            .to_pem(der::pem::LineEnding::LF)
            .map_err(|e| IdentityError::Crypto(format!("cert encode: {e}")))?;
        fs::write(store.join("ca_cert.pem"), cert_pem)?;

        Ok(DevCa {
            name: name.to_string(),
            private_key,
            certificate,
        })
    }

    /// Load a previously created CA from `store`.
    pub fn load(store: &Path) -> Result<DevCa> {
        let key_pem = fs::read_to_string(store.join("ca_key.pem"))?;
        let private_key = RsaPrivateKey::from_pkcs8_pem(&key_pem)
            .map_err(|e| IdentityError::Integrity(format!("ca_key.pem unreadable: {e}")))?;
        let cert_pem = fs::read_to_string(store.join("ca_cert.pem"))?;
        let certificate = Certificate::from_pem(cert_pem.as_bytes())
            .map_err(|e| IdentityError::Integrity(format!("ca_cert.pem unreadable: {e}")))?;
        let name = certificate.tbs_certificate.subject.to_string();
        Ok(DevCa {
            name: name.strip_prefix("CN=").unwrap_or(&name).to_string(),
            private_key,
            certificate,
        })
    }

    pub fn certificate(&self) -> &Certificate {
        &self.certificate
    }

    /// Issue an X.509 v3 certificate binding `subject_id` (hex-encoded as
    /// the subject CN) to `subject_key`, signed by this CA.
    pub fn issue_certificate(
        &self,
        subject_id: EndpointId,
        subject_key: &RsaPublicKey,
    ) -> Result<Certificate> {
        let issuer = Name::from_str(&format!("CN={}", self.name))
            .map_err(|e| IdentityError::Validation(format!("bad issuer name: {e}")))?;
        let subject = Name::from_str(&format!("CN={}", subject_id.to_hex()))
            .map_err(|e| IdentityError::Validation(format!("bad subject name: {e}")))?;
        let spki = rsa_spki(subject_key)?;
        let signer = SigningKey::<Sha256>::new(self.private_key.clone());
        let builder = CertificateBuilder::new(
            Profile::Leaf {
                issuer,
                enable_key_agreement: false,
                enable_key_encipherment: false,
            },
            random_serial(),
            Validity::from_now(CERT_LIFETIME)
                .map_err(|e| IdentityError::Crypto(format!("validity: {e}")))?,
            subject,
            spki,
            &signer,
        )
        .map_err(|e| IdentityError::Crypto(format!("cert builder: {e}")))?;
        builder
            .build::<Signature>()
            .map_err(|e| IdentityError::Crypto(format!("cert build: {e}")))
    }
}

fn rsa_spki(key: &RsaPublicKey) -> Result<SubjectPublicKeyInfoOwned> {
    let der = key
        .to_public_key_der()
        .map_err(|e| IdentityError::Crypto(format!("spki encode: {e}")))?;
    SubjectPublicKeyInfoOwned::try_from(der.as_bytes())
        .map_err(|e| IdentityError::Crypto(format!("spki decode: {e}")))
}

fn random_serial() -> SerialNumber {
    let mut bytes = [0u8; 16];
    rand::Rng::fill(&mut rand::thread_rng(), &mut bytes[..]);
    bytes[0] &= 0x7f; // keep the INTEGER positive
    SerialNumber::new(&bytes).expect("16-byte serial is valid")
}

/// Directory of trusted peer certificates, each validated against the
/// trusted CA when loaded. The CA certificate itself lives in the same
/// directory as `ca.pem`; lookup is by endpoint ID (the subject CN).
pub struct Keyring {
    dir: PathBuf,
    trusted_ca: Certificate,
    entries: HashMap<EndpointId, Certificate>,
}

const CA_FILE: &str = "ca.pem";

impl Keyring {
    /// Create a keyring directory anchored to the given trusted CA,
    /// persisting it as `ca.pem`.
    pub fn create(dir: &Path, trusted_ca: Certificate) -> Result<Keyring> {
        fs::create_dir_all(dir)?;
        let pem = trusted_ca
            .to_pem(der::pem::LineEnding::LF)
            .map_err(|e| IdentityError::Crypto(format!("cert encode: {e}")))?;
        fs::write(dir.join(CA_FILE), pem)?;
        Keyring::open(dir)
    }

    /// Open a keyring directory: load the trusted CA from `ca.pem`, then
    /// every other `*.pem` certificate in it. Certificates that fail CA
    /// validation or whose subject does not parse are rejected with an
    /// error.
    pub fn open(dir: &Path) -> Result<Keyring> {
        let ca_pem = fs::read_to_string(dir.join(CA_FILE))?;
        let trusted_ca = Certificate::from_pem(ca_pem.as_bytes())
            .map_err(|e| IdentityError::Integrity(format!("ca.pem unreadable: {e}")))?;
        let mut entries = HashMap::new();
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let path = entry.path();
            if path.file_name().map(|n| n == CA_FILE).unwrap_or(false) {
                continue;
            }
            if path.extension().map(|e| e == "pem").unwrap_or(false) {
                let pem = fs::read_to_string(&path)?;
                let cert = Certificate::from_pem(pem.as_bytes()).map_err(|e| {
                    IdentityError::Integrity(format!("{}: unreadable certificate: {e}", path.display()))
                })?;
                verify_certificate(&cert, &trusted_ca).map_err(|e| {
                    IdentityError::Trust(format!("{}: {e}", path.display()))
                })?;
                let id = certificate_subject_id(&cert)?;
                entries.insert(id, cert);
            }
        }
        Ok(Keyring {
            dir: dir.to_path_buf(),
            trusted_ca,
            entries,
        })
    }

    pub fn trusted_ca(&self) -> &Certificate {
        &self.trusted_ca
    }

    /// Validate `cert` against the CA and persist it as `<hexid>.pem`.
    pub fn add(&mut self, cert: Certificate) -> Result<EndpointId> {
        verify_certificate(&cert, &self.trusted_ca)?;
        let id = certificate_subject_id(&cert)?;
        let pem = cert
            .to_pem(der::pem::LineEnding::LF)
            .map_err(|e| IdentityError::Crypto(format!("cert encode: {e}")))?;
        fs::write(self.dir.join(format!("{}.pem", id.to_hex())), pem)?;
        self.entries.insert(id, cert);
        Ok(id)
    }

    pub fn lookup(&self, id: &EndpointId) -> Option<&Certificate> {
        self.entries.get(id)
    }

    /// Public key of a trusted peer, if present.
    pub fn public_key_of(&self, id: &EndpointId) -> Option<RsaPublicKey> {
        self.entries.get(id).and_then(|c| certificate_public_key(c).ok())
    }

    pub fn ids(&self) -> impl Iterator<Item = &EndpointId> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Parse a certificate from DER bytes (as carried in wire payloads).
pub fn certificate_from_der(der_bytes: &[u8]) -> Result<Certificate> {
    Certificate::from_der(der_bytes)
        .map_err(|e| IdentityError::Validation(format!("bad certificate DER: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    // Digest of "aa:bb:cc:dd:ee:ff|192.0.2.1", computed with sha1sum.
    const ID_MAC_FF: &str = "4ac2b9df3be0d82bda4abfb1604be77660021bfd";
    // Digest of "aa:bb:cc:dd:ee:00|192.0.2.1", computed with sha1sum.
    const ID_MAC_00: &str = "309ed7944f0f5ece7a10cb65af6b170345899be8";
    // Digest of "aa:bb:cc:dd:ee:ff|2001:db8::1", computed with sha1sum.
    const ID_V6: &str = "78b352587f6bc487e1fb80178a1ae2c7288a202d";

    #[test]
    fn derive_id_matches_external_digest() {
        let id = derive_endpoint_id("aa:bb:cc:dd:ee:ff", "192.0.2.1").unwrap();
        assert_eq!(id.to_hex(), ID_MAC_FF);
        assert_eq!(id.as_bytes().len(), 20);
    }

    #[test]
    fn derive_id_is_deterministic() {
        let a = derive_endpoint_id("aa:bb:cc:dd:ee:ff", "192.0.2.1").unwrap();
        let b = derive_endpoint_id("aa:bb:cc:dd:ee:ff", "192.0.2.1").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn derive_id_distinguishes_macs() {
        let a = derive_endpoint_id("aa:bb:cc:dd:ee:ff", "192.0.2.1").unwrap();
        let b = derive_endpoint_id("aa:bb:cc:dd:ee:00", "192.0.2.1").unwrap();
        assert_ne!(a, b);
        assert_eq!(b.to_hex(), ID_MAC_00);
    }

    #[test]
    fn derive_id_canonicalizes_case_and_v6() {
        let lower = derive_endpoint_id("aa:bb:cc:dd:ee:ff", "2001:db8::1").unwrap();
        let upper = derive_endpoint_id("AA:BB:CC:DD:EE:FF", "2001:0db8:0000:0000:0000:0000:0000:0001").unwrap();
        assert_eq!(lower, upper);
        assert_eq!(lower.to_hex(), ID_V6);
    }

    #[test]
    fn derive_id_rejects_malformed_input() {
        assert!(derive_endpoint_id("aa:bb:cc:dd:ee", "192.0.2.1").is_err());
        assert!(derive_endpoint_id("aa:bb:cc:dd:ee:f", "192.0.2.1").is_err());
        assert!(derive_endpoint_id("aa:bb:cc:dd:ee:zz", "192.0.2.1").is_err());
        assert!(derive_endpoint_id("aa:bb:cc:dd:ee:ff", "not-an-ip").is_err());
        assert!(derive_endpoint_id("aa:bb:cc:dd:ee:ff", "300.0.2.1").is_err());
    }

    #[test]
    fn identity_persists_across_address_changes() {
        let dir = tempdir().unwrap();
        let first = load_or_create_identity(dir.path(), "aa:bb:cc:dd:ee:ff", "192.0.2.1", Role::Device).unwrap();
        let second = load_or_create_identity(dir.path(), "aa:bb:cc:dd:ee:ff", "198.51.100.7", Role::Device).unwrap();
        let third = load_or_create_identity(dir.path(), "00:11:22:33:44:55", "2001:db8::1", Role::Device).unwrap();
        assert_eq!(first.id(), second.id());
        assert_eq!(first.id(), third.id());
    }

    #[test]
    fn truncated_id_file_is_integrity_error() {
        let dir = tempdir().unwrap();
        load_or_create_identity(dir.path(), "aa:bb:cc:dd:ee:ff", "192.0.2.1", Role::Device).unwrap();
        fs::write(dir.path().join("identity.id"), b"short").unwrap();
        let err = load_identity(dir.path(), Role::Device).unwrap_err();
        assert!(matches!(err, IdentityError::Integrity(_)), "got {err:?}");
    }

    #[test]
    fn issued_certificate_verifies_and_binds_subject() {
        let dir = tempdir().unwrap();
        let ca = DevCa::create(&dir.path().join("ca"), "loghive dev ca").unwrap();
        let store = dir.path().join("dev");
        let mut ident =
            load_or_create_identity(&store, "aa:bb:cc:dd:ee:ff", "192.0.2.1", Role::Device).unwrap();
        let cert = ca.issue_certificate(ident.id(), ident.public_key()).unwrap();

        verify_certificate(&cert, ca.certificate()).unwrap();
        assert_eq!(certificate_subject_id(&cert).unwrap(), ident.id());

        // wrong CA → verification failure
        let other_ca = DevCa::create(&dir.path().join("ca2"), "other ca").unwrap();
        assert!(verify_certificate(&cert, other_ca.certificate()).is_err());

        attach_certificate(&mut ident, &store, cert).unwrap();
        let reloaded = load_identity(&store, Role::Device).unwrap();
        assert_eq!(
            reloaded.certificate_der().unwrap(),
            ident.certificate_der().unwrap()
        );
    }

    #[test]
    fn keyring_round_trips_certificates() {
        let dir = tempdir().unwrap();
        let ca = DevCa::create(&dir.path().join("ca"), "loghive dev ca").unwrap();
        let store = dir.path().join("dev");
        let ident =
            load_or_create_identity(&store, "aa:bb:cc:dd:ee:ff", "192.0.2.1", Role::Device).unwrap();
        let cert = ca.issue_certificate(ident.id(), ident.public_key()).unwrap();

        let ring_dir = dir.path().join("ring");
        let mut ring = Keyring::create(&ring_dir, ca.certificate().clone()).unwrap();
        ring.add(cert.clone()).unwrap();

        let reloaded = Keyring::open(&ring_dir).unwrap();
        let got = reloaded.lookup(&ident.id()).unwrap();
        assert_eq!(got.to_der().unwrap(), cert.to_der().unwrap());
    }

    #[test]
    fn keyring_rejects_untrusted_certificates() {
        let dir = tempdir().unwrap();
        let ca = DevCa::create(&dir.path().join("ca"), "loghive dev ca").unwrap();
        let rogue_ca = DevCa::create(&dir.path().join("rogue"), "rogue ca").unwrap();
        let store = dir.path().join("dev");
        let ident =
            load_or_create_identity(&store, "aa:bb:cc:dd:ee:ff", "192.0.2.1", Role::Device).unwrap();
        let rogue_cert = rogue_ca.issue_certificate(ident.id(), ident.public_key()).unwrap();

        let mut ring = Keyring::create(&dir.path().join("ring"), ca.certificate().clone()).unwrap();
        let err = ring.add(rogue_cert).unwrap_err();
        assert!(matches!(err, IdentityError::Trust(_)), "got {err:?}");
    }

    #[test]
    fn signature_round_trip_and_tamper() {
        let dir = tempdir().unwrap();
        let ident = load_or_create_identity(dir.path(), "aa:bb:cc:dd:ee:ff", "192.0.2.1", Role::Agent).unwrap();
        let sig = ident.sign(b"hello logs");
        assert!(verify_signature(ident.public_key(), b"hello logs", &sig));
        assert!(!verify_signature(ident.public_key(), b"hello log!", &sig));
    }
}
