//! Key material, certificates, and the per-packet security envelope.
//!
//! Payloads are encrypted with AES-256-CTR, the header, nonce and ciphertext
//! are hashed with SHA-256, and the digest is signed with RSASSA-PSS. A
//! receiver checks the digest and the signature before it decrypts anything.

mod cert;
mod envelope;
mod keys;

pub use cert::{Certificate, TrustAnchor};
pub use envelope::{fresh_nonce, open, seal, seal_with_nonce, Envelope, NONCE_LEN};
pub use keys::{KeyPair, SymmetricKey, SYMMETRIC_KEY_LEN};

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    /// The digest does not match the covered bytes.
    #[error("integrity check failed: digest mismatch")]
    Integrity,
    /// The signature does not verify under the sender's key.
    #[error("authenticity check failed: bad signature")]
    Authenticity,
    #[error("malformed envelope: {0}")]
    Malformed(&'static str),
    #[error("invalid key material: {0}")]
    Key(String),
    #[error("certificate rejected: {0}")]
    Certificate(String),
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Verifies an RSASSA-PSS (SHA-256) signature against a PKCS#1 DER public key.
pub fn verify_pss(public_key_der: &[u8], message: &[u8], signature: &[u8]) -> bool {
    ring::signature::UnparsedPublicKey::new(&ring::signature::RSA_PSS_2048_8192_SHA256, public_key_der)
        .verify(message, signature)
        .is_ok()
}
