use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{sha256, verify_pss, CryptoError, KeyPair};

/// A signed binding of a subject to an RSA public key.
///
/// The issuer signature covers the `u32` big-endian subject length, the
/// subject bytes, and the PKCS#1 DER public key.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Certificate {
    pub subject: String,
    pub public_key: Vec<u8>,
    pub issuer_signature: Vec<u8>,
}

// Fields are declared in sorted order so serde_json emits sorted keys.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CertificateJson {
    issuer_signature_b64: String,
    public_key_b64: String,
    subject: String,
}

fn signed_bytes(subject: &str, public_key: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + subject.len() + public_key.len());
    out.extend_from_slice(&(subject.len() as u32).to_be_bytes());
    out.extend_from_slice(subject.as_bytes());
    out.extend_from_slice(public_key);
    out
}

impl Certificate {
    /// Issues a certificate for `key` signed by `anchor`.
    pub fn issue(subject: impl Into<String>, key: &KeyPair, anchor: &KeyPair) -> Certificate {
        let subject = subject.into();
        let public_key = key.public_key_der().to_vec();
        let issuer_signature = anchor.sign(&signed_bytes(&subject, &public_key));
        Certificate { subject, public_key, issuer_signature }
    }

    /// A trust anchor signs its own certificate.
    pub fn self_signed(subject: impl Into<String>, key: &KeyPair) -> Certificate {
        Certificate::issue(subject, key, key)
    }

    pub fn verify_issuer(&self, issuer_public_key: &[u8]) -> Result<(), CryptoError> {
        let msg = signed_bytes(&self.subject, &self.public_key);
        if verify_pss(issuer_public_key, &msg, &self.issuer_signature) {
            Ok(())
        } else {
            Err(CryptoError::Certificate(format!(
                "`{}` is not signed by the trust anchor",
                self.subject
            )))
        }
    }

    /// Checks an RSASSA-PSS signature made by this certificate's key.
    pub fn verify_signature(&self, message: &[u8], signature: &[u8]) -> bool {
        verify_pss(&self.public_key, message, signature)
    }

    /// Sorted keys, no whitespace.
    pub fn to_canonical_json(&self) -> String {
        let doc = CertificateJson {
            issuer_signature_b64: B64.encode(&self.issuer_signature),
            public_key_b64: B64.encode(&self.public_key),
            subject: self.subject.clone(),
        };
        serde_json::to_string(&doc).expect("certificate json")
    }

    pub fn from_json(text: &str) -> Result<Certificate, CryptoError> {
        let doc: CertificateJson =
            serde_json::from_str(text).map_err(|e| CryptoError::Certificate(e.to_string()))?;
        let decode = |field: &str, v: &str| {
            B64.decode(v)
                .map_err(|e| CryptoError::Certificate(format!("{field}: {e}")))
        };
        Ok(Certificate {
            subject: doc.subject,
            public_key: decode("public_key_b64", &doc.public_key_b64)?,
            issuer_signature: decode("issuer_signature_b64", &doc.issuer_signature_b64)?,
        })
    }

    /// SHA-256 of the canonical JSON bytes.
    pub fn fingerprint(&self) -> [u8; 32] {
        sha256(self.to_canonical_json().as_bytes())
    }
}

/// The certificate every other certificate must be issued by.
#[derive(Debug, Clone)]
pub struct TrustAnchor {
    cert: Certificate,
}

impl TrustAnchor {
    /// Accepts only a certificate that verifies under its own key.
    pub fn new(cert: Certificate) -> Result<Self, CryptoError> {
        cert.verify_issuer(&cert.public_key)?;
        Ok(TrustAnchor { cert })
    }

    pub fn certificate(&self) -> &Certificate {
        &self.cert
    }

    pub fn verify(&self, cert: &Certificate) -> Result<(), CryptoError> {
        cert.verify_issuer(&self.cert.public_key)
    }
}
