//! On-disk key directory.
//!
//! A key directory holds, for an identifier `id`:
//! `id.key.pem` (PKCS#8 RSA private key), `id.cert.json` (certificate), and
//! `id.psk` (pre-shared symmetric key).

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use thiserror::Error;

use crate::crypto::{Certificate, CryptoError, KeyPair, SymmetricKey, TrustAnchor};

#[derive(Debug, Error)]
pub enum KeyStoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Crypto {
        path: PathBuf,
        #[source]
        source: CryptoError,
    },
    #[error("{0} already exists (use --force to overwrite)")]
    Exists(PathBuf),
}

pub fn key_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.key.pem"))
}

pub fn cert_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.cert.json"))
}

pub fn psk_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.psk"))
}

fn read(path: &Path) -> Result<String, KeyStoreError> {
    std::fs::read_to_string(path).map_err(|source| KeyStoreError::Io { path: path.to_path_buf(), source })
}

fn crypto_err(path: &Path) -> impl FnOnce(CryptoError) -> KeyStoreError + '_ {
    move |source| KeyStoreError::Crypto { path: path.to_path_buf(), source }
}

pub fn load_certificate(path: &Path) -> Result<Certificate, KeyStoreError> {
    Certificate::from_json(&read(path)?).map_err(crypto_err(path))
}

pub fn load_anchor(path: &Path) -> Result<TrustAnchor, KeyStoreError> {
    TrustAnchor::new(load_certificate(path)?).map_err(crypto_err(path))
}

pub fn load_keypair(path: &Path) -> Result<KeyPair, KeyStoreError> {
    KeyPair::from_pem(&read(path)?).map_err(crypto_err(path))
}

pub fn load_symmetric(path: &Path) -> Result<SymmetricKey, KeyStoreError> {
    SymmetricKey::from_pem(&read(path)?).map_err(crypto_err(path))
}

/// Writes `contents` to `path`, refusing to clobber unless `force`.
pub fn write_new(path: &Path, contents: &str, force: bool) -> Result<(), KeyStoreError> {
    if path.exists() && !force {
        return Err(KeyStoreError::Exists(path.to_path_buf()));
    }
    std::fs::write(path, contents).map_err(|source| KeyStoreError::Io { path: path.to_path_buf(), source })
}

/// Lazily loaded, cached view of a key directory. Entries can also be
/// inserted directly, which is how the in-process testbed hands out keys.
#[derive(Debug, Default)]
pub struct KeyStore {
    dir: Option<PathBuf>,
    keypairs: RwLock<HashMap<String, KeyPair>>,
    certs: RwLock<HashMap<String, Arc<Certificate>>>,
    psks: RwLock<HashMap<String, SymmetricKey>>,
}

impl KeyStore {
    pub fn in_memory() -> Self {
        KeyStore::default()
    }

    pub fn open(dir: impl Into<PathBuf>) -> Self {
        KeyStore { dir: Some(dir.into()), ..Default::default() }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn insert_keypair(&self, id: &str, kp: KeyPair) {
        self.keypairs.write().insert(id.to_string(), kp);
    }

    pub fn insert_certificate(&self, id: &str, cert: Certificate) {
        self.certs.write().insert(id.to_string(), Arc::new(cert));
    }

    pub fn insert_symmetric(&self, id: &str, key: SymmetricKey) {
        self.psks.write().insert(id.to_string(), key);
    }

    fn missing(&self, path: PathBuf) -> KeyStoreError {
        KeyStoreError::Io { path, source: std::io::ErrorKind::NotFound.into() }
    }

    pub fn keypair(&self, id: &str) -> Result<KeyPair, KeyStoreError> {
        if let Some(k) = self.keypairs.read().get(id) {
            return Ok(k.clone());
        }
        let dir = self.dir.as_deref().ok_or_else(|| self.missing(PathBuf::from(format!("{id}.key.pem"))))?;
        let kp = load_keypair(&key_path(dir, id))?;
        self.keypairs.write().insert(id.to_string(), kp.clone());
        Ok(kp)
    }

    pub fn certificate(&self, id: &str) -> Result<Arc<Certificate>, KeyStoreError> {
        if let Some(c) = self.certs.read().get(id) {
            return Ok(c.clone());
        }
        let dir = self.dir.as_deref().ok_or_else(|| self.missing(PathBuf::from(format!("{id}.cert.json"))))?;
        let cert = Arc::new(load_certificate(&cert_path(dir, id))?);
        self.certs.write().insert(id.to_string(), cert.clone());
        Ok(cert)
    }

    pub fn symmetric(&self, id: &str) -> Result<SymmetricKey, KeyStoreError> {
        if let Some(k) = self.psks.read().get(id) {
            return Ok(k.clone());
        }
        let dir = self.dir.as_deref().ok_or_else(|| self.missing(PathBuf::from(format!("{id}.psk"))))?;
        let key = load_symmetric(&psk_path(dir, id))?;
        self.psks.write().insert(id.to_string(), key.clone());
        Ok(key)
    }

    /// True if a pre-shared key named `id` is known or present on disk.
    pub fn has_symmetric(&self, id: &str) -> bool {
        self.psks.read().contains_key(id)
            || self.dir.as_deref().is_some_and(|d| psk_path(d, id).is_file())
    }
}
