use std::fmt;
use std::sync::Arc;

use rsa::pkcs8::{DecodePrivateKey, EncodePrivateKey, LineEnding};
use rsa::RsaPrivateKey;

use super::CryptoError;

pub const SYMMETRIC_KEY_LEN: usize = 32;
const RSA_BITS: usize = 2048;
const SYMMETRIC_PEM_TAG: &str = "SGC SYMMETRIC KEY";

/// An RSA-2048 signing key pair.
#[derive(Clone)]
pub struct KeyPair {
    signer: Arc<ring::signature::RsaKeyPair>,
    pkcs8_der: Arc<Vec<u8>>,
}

impl KeyPair {
    pub fn generate() -> Result<Self, CryptoError> {
        let mut rng = rand::thread_rng();
        let key = RsaPrivateKey::new(&mut rng, RSA_BITS).map_err(|e| CryptoError::Key(e.to_string()))?;
        let der = key.to_pkcs8_der().map_err(|e| CryptoError::Key(e.to_string()))?;
        Self::from_pkcs8_der(der.as_bytes())
    }

    pub fn from_pkcs8_der(der: &[u8]) -> Result<Self, CryptoError> {
        let signer = ring::signature::RsaKeyPair::from_pkcs8(der)
            .map_err(|e| CryptoError::Key(format!("pkcs8: {e}")))?;
        if signer.public().modulus_len() * 8 < RSA_BITS {
            return Err(CryptoError::Key("modulus shorter than 2048 bits".into()));
        }
        Ok(KeyPair { signer: Arc::new(signer), pkcs8_der: Arc::new(der.to_vec()) })
    }

    /// Reads a `PRIVATE KEY` PEM block (PKCS#8).
    pub fn from_pem(text: &str) -> Result<Self, CryptoError> {
        let key = RsaPrivateKey::from_pkcs8_pem(text).map_err(|e| CryptoError::Key(e.to_string()))?;
        let der = key.to_pkcs8_der().map_err(|e| CryptoError::Key(e.to_string()))?;
        Self::from_pkcs8_der(der.as_bytes())
    }

    pub fn to_pem(&self) -> String {
        let key = RsaPrivateKey::from_pkcs8_der(&self.pkcs8_der).expect("stored pkcs8 is valid");
        key.to_pkcs8_pem(LineEnding::LF).expect("pkcs8 encoding").to_string()
    }

    /// PKCS#1 `RSAPublicKey` DER.
    pub fn public_key_der(&self) -> &[u8] {
        self.signer.public().as_ref()
    }

    /// Length of a signature made by this key, in bytes.
    pub fn sign_len(&self) -> usize {
        self.signer.public().modulus_len()
    }

    /// RSASSA-PSS with SHA-256.
    pub fn sign(&self, message: &[u8]) -> Vec<u8> {
        let rng = ring::rand::SystemRandom::new();
        let mut sig = vec![0u8; self.signer.public().modulus_len()];
        self.signer
            .sign(&ring::signature::RSA_PSS_SHA256, &rng, message, &mut sig)
            .expect("system RNG failure while signing");
        sig
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public_key_len", &self.public_key_der().len())
            .finish_non_exhaustive()
    }
}

/// A pre-shared AES-256 key and the topic or tunnel it protects.
#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey {
    key: [u8; SYMMETRIC_KEY_LEN],
    scope: String,
}

impl SymmetricKey {
    pub fn new(key: [u8; SYMMETRIC_KEY_LEN], scope: impl Into<String>) -> Self {
        SymmetricKey { key, scope: scope.into() }
    }

    pub fn generate(scope: impl Into<String>) -> Self {
        use rand::RngCore;
        let mut key = [0u8; SYMMETRIC_KEY_LEN];
        rand::rngs::OsRng.fill_bytes(&mut key);
        SymmetricKey::new(key, scope)
    }

    pub fn from_slice(bytes: &[u8], scope: impl Into<String>) -> Result<Self, CryptoError> {
        let key: [u8; SYMMETRIC_KEY_LEN] = bytes
            .try_into()
            .map_err(|_| CryptoError::Key(format!("symmetric key must be 32 bytes, got {}", bytes.len())))?;
        Ok(SymmetricKey::new(key, scope))
    }

    pub fn bytes(&self) -> &[u8; SYMMETRIC_KEY_LEN] {
        &self.key
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    /// `-----BEGIN SGC SYMMETRIC KEY-----` block with a `Scope:` header.
    pub fn to_pem(&self) -> String {
        let mut block = pem::Pem::new(SYMMETRIC_PEM_TAG, self.key.to_vec());
        block
            .headers_mut()
            .add("Scope", &self.scope)
            .expect("scope header");
        pem::encode_config(&block, pem::EncodeConfig::new().set_line_ending(pem::LineEnding::LF))
    }

    pub fn from_pem(text: &str) -> Result<Self, CryptoError> {
        let block = pem::parse(text).map_err(|e| CryptoError::Key(e.to_string()))?;
        if block.tag() != SYMMETRIC_PEM_TAG {
            return Err(CryptoError::Key(format!("unexpected PEM tag `{}`", block.tag())));
        }
        let scope = block.headers().get("Scope").unwrap_or_default().to_string();
        SymmetricKey::from_slice(block.contents(), scope)
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SymmetricKey").field("scope", &self.scope).finish_non_exhaustive()
    }
}
