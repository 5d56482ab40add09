//! Secure log harvesting: agents that authenticate devices, compress and
//! normalize their log lines, and forward them over an authenticated,
//! encrypted wire protocol to a warehouse server.
//!
//! The crate is organized around the moving parts of that system:
//!
//! - [`identity`] — stable 160-bit endpoint identities, RSA keypairs,
//!   X.509 certificates, and the keyring of trusted peers.
//! - [`wire`] — bit-exact encoding and parsing of protocol messages
//!   (fixed header plus TLV extension headers).
//! - [`channel`] — the session security stack: challenge-response
//!   authentication, Diffie-Hellman key agreement, AES payload encryption
//!   with kilobit-TTL rekeying, replay windows, signatures, clock sync.
//! - [`pipeline`] — frequency-based log template learning, lossless
//!   compression, and CBE-style XML normalization with two metadata levels.
//! - [`discovery`] — multicast agent discovery (ADM/AOM) and the
//!   deterministic agent-selection rules.
//! - [`agent`], [`warehouse`], [`device`] — the three runnable roles.
//! - [`harness`] — in-process orchestration of full deployments for
//!   benchmarks and tests.

pub mod agent;
pub mod channel;
pub mod config;
pub mod device;
pub mod discovery;
pub mod harness;
pub mod identity;
pub mod pipeline;
pub mod transport;
pub mod warehouse;
pub mod wire;

pub(crate) mod timeutil {
    use std::time::{SystemTime, UNIX_EPOCH};

    /// Seconds since the Unix epoch.
    pub fn now_secs() -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }

    /// Milliseconds since the Unix epoch.
    pub fn now_millis() -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}
