//! Shared fixtures for unit tests.

use std::path::PathBuf;
use std::sync::OnceLock;

use crate::crypto::{Certificate, KeyPair, SymmetricKey, TrustAnchor};

/// AES-256-CTR("hello"), key 00..1f, nonce 0x0b * 12, computed with an
/// independent AES implementation.
pub const KAT_HELLO_CIPHERTEXT: &str = "c7c2b26706";

pub struct Fixtures {
    pub anchor_key: KeyPair,
    pub anchor: TrustAnchor,
    pub rogue_anchor: TrustAnchor,
    pub alice: KeyPair,
    pub alice_cert: Certificate,
    pub bob: KeyPair,
    pub bob_cert: Certificate,
    pub mallory: KeyPair,
    pub mallory_cert: Certificate,
    pub camera_key: SymmetricKey,
}

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/keys")
}

pub fn fixture_text(file: &str) -> String {
    std::fs::read_to_string(fixture_dir().join(file)).unwrap()
}

pub fn fixtures() -> &'static Fixtures {
    static F: OnceLock<Fixtures> = OnceLock::new();
    F.get_or_init(|| {
        let key = |n: &str| KeyPair::from_pem(&fixture_text(&format!("{n}.key.pem"))).unwrap();
        let cert = |n: &str| Certificate::from_json(&fixture_text(&format!("{n}.cert.json"))).unwrap();
        Fixtures {
            anchor_key: key("anchor"),
            anchor: TrustAnchor::new(cert("anchor")).unwrap(),
            rogue_anchor: TrustAnchor::new(cert("rogue-anchor")).unwrap(),
            alice: key("alice"),
            alice_cert: cert("alice"),
            bob: key("bob"),
            bob_cert: cert("bob"),
            mallory: key("mallory"),
            mallory_cert: cert("mallory"),
            camera_key: SymmetricKey::from_pem(&fixture_text("camera.psk")).unwrap(),
        }
    })
}
