use aes::cipher::{KeyIvInit, StreamCipher};
use bytes::{BufMut, Bytes, BytesMut};
use rand::RngCore;
use sha2::{Digest, Sha256};

use super::{Certificate, CryptoError, KeyPair, SymmetricKey};

pub const NONCE_LEN: usize = 12;
const DIGEST_LEN: usize = 32;
const FIXED_LEN: usize = NONCE_LEN + DIGEST_LEN + 2;

type Aes256Ctr = ctr::Ctr32BE<aes::Aes256>;

/// A sealed payload, held in its wire layout:
///
/// ```text
/// nonce (12) | digest (32) | sig_len (u16 BE) | signature | ciphertext
/// ```
///
/// Accessors are views into one shared buffer.
#[derive(Clone, PartialEq, Eq)]
pub struct Envelope {
    wire: Bytes,
    sig_len: usize,
}

impl std::fmt::Debug for Envelope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Envelope")
            .field("nonce", &hex::encode(self.nonce()))
            .field("ciphertext_len", &self.ciphertext().len())
            .finish_non_exhaustive()
    }
}

impl Envelope {
    pub fn nonce(&self) -> &[u8] {
        &self.wire[..NONCE_LEN]
    }

    pub fn digest(&self) -> &[u8] {
        &self.wire[NONCE_LEN..NONCE_LEN + DIGEST_LEN]
    }

    pub fn signature(&self) -> &[u8] {
        &self.wire[FIXED_LEN..FIXED_LEN + self.sig_len]
    }

    pub fn ciphertext(&self) -> &[u8] {
        &self.wire[FIXED_LEN + self.sig_len..]
    }

    /// The encoded form; cheap to clone.
    pub fn as_bytes(&self) -> &Bytes {
        &self.wire
    }

    pub fn into_bytes(self) -> Bytes {
        self.wire
    }

    /// Wraps encoded bytes without copying them.
    pub fn parse(wire: Bytes) -> Result<Envelope, CryptoError> {
        if wire.len() < FIXED_LEN {
            return Err(CryptoError::Malformed("shorter than fixed envelope fields"));
        }
        let sig_len = u16::from_be_bytes([wire[NONCE_LEN + DIGEST_LEN], wire[NONCE_LEN + DIGEST_LEN + 1]]) as usize;
        if wire.len() < FIXED_LEN + sig_len {
            return Err(CryptoError::Malformed("signature runs past end of envelope"));
        }
        Ok(Envelope { wire, sig_len })
    }
}

/// A random 96-bit nonce.
pub fn fresh_nonce() -> [u8; NONCE_LEN] {
    let mut nonce = [0u8; NONCE_LEN];
    rand::rngs::OsRng.fill_bytes(&mut nonce);
    nonce
}

fn apply_keystream(key: &SymmetricKey, nonce: &[u8], data: &mut [u8]) {
    let mut iv = [0u8; 16];
    iv[..NONCE_LEN].copy_from_slice(nonce);
    let mut cipher = Aes256Ctr::new(key.bytes().into(), &iv.into());
    cipher.apply_keystream(data);
}

fn envelope_digest(covered_header: &[u8], nonce: &[u8], ciphertext: &[u8]) -> [u8; DIGEST_LEN] {
    let mut h = Sha256::new();
    h.update(covered_header);
    h.update(nonce);
    h.update(ciphertext);
    h.finalize().into()
}

/// Encrypts, hashes, and signs `plaintext` under a fresh nonce.
pub fn seal(plaintext: &[u8], key: &SymmetricKey, signer: &KeyPair, covered_header: &[u8]) -> Envelope {
    seal_with_nonce(plaintext, key, signer, covered_header, fresh_nonce())
}

/// [`seal`] with a caller-chosen nonce. Only for known-answer tests: reusing
/// a nonce under one key leaks plaintext.
#[doc(hidden)]
pub fn seal_with_nonce(
    plaintext: &[u8],
    key: &SymmetricKey,
    signer: &KeyPair,
    covered_header: &[u8],
    nonce: [u8; NONCE_LEN],
) -> Envelope {
    let sig_len = signer.sign_len();
    let mut wire = BytesMut::with_capacity(FIXED_LEN + sig_len + plaintext.len());
    wire.put_slice(&nonce);
    wire.put_bytes(0, DIGEST_LEN);
    wire.put_u16(sig_len as u16);
    wire.put_bytes(0, sig_len);
    let body = wire.len();
    wire.put_slice(plaintext);
    apply_keystream(key, &nonce, &mut wire[body..]);

    let digest = envelope_digest(covered_header, &nonce, &wire[body..]);
    let signature = signer.sign(&digest);
    debug_assert_eq!(signature.len(), sig_len);
    wire[NONCE_LEN..NONCE_LEN + DIGEST_LEN].copy_from_slice(&digest);
    wire[FIXED_LEN..FIXED_LEN + sig_len].copy_from_slice(&signature);
    Envelope { wire: wire.freeze(), sig_len }
}

/// Verifies digest and signature, then decrypts.
///
/// Nothing is decrypted unless both checks pass.
pub fn open(
    env: &Envelope,
    key: &SymmetricKey,
    sender_cert: &Certificate,
    covered_header: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let digest = envelope_digest(covered_header, env.nonce(), env.ciphertext());
    if digest.as_slice() != env.digest() {
        return Err(CryptoError::Integrity);
    }
    if !sender_cert.verify_signature(&digest, env.signature()) {
        return Err(CryptoError::Authenticity);
    }
    let mut plaintext = env.ciphertext().to_vec();
    apply_keystream(key, env.nonce(), &mut plaintext);
    Ok(plaintext)
}
