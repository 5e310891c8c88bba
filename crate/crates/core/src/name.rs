//! Global, location-independent topic identifiers.
//!
//! A [`GdpName`] is the SHA-256 digest of a topic's [`TopicMetadata`] in a
//! fixed length-prefixed layout. Every party holding the same metadata
//! derives the same name; nothing in this crate maps a name back to the
//! metadata that produced it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Length of a name in bytes (256 bits).
pub const NAME_LEN: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NameError {
    #[error("metadata field `{0}` must not be empty")]
    EmptyField(&'static str),
    #[error("field `{field}` is {len} bytes, longer than the 4-byte length prefix allows")]
    FieldTooLong { field: &'static str, len: usize },
    #[error("invalid hex name: {0}")]
    BadHex(String),
    #[error("cert_fingerprint must be 32 bytes, got {0}")]
    BadFingerprint(usize),
    #[error("metadata document: {0}")]
    Document(String),
}

/// A 256-bit topic identifier.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct GdpName([u8; NAME_LEN]);

impl GdpName {
    /// The all-zero name marks an unaddressed (broadcast) destination.
    pub const ZERO: GdpName = GdpName([0u8; NAME_LEN]);

    pub const fn from_bytes(bytes: [u8; NAME_LEN]) -> Self {
        GdpName(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; NAME_LEN] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0u8; NAME_LEN]
    }

    /// 64 lowercase hex characters.
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, NameError> {
        let mut out = [0u8; NAME_LEN];
        hex::decode_to_slice(s, &mut out).map_err(|e| NameError::BadHex(e.to_string()))?;
        Ok(GdpName(out))
    }

    /// Short display form, first three and last three hex digits: `75e...0fc`.
    pub fn short(&self) -> String {
        let hex = self.to_hex();
        format!("{}...{}", &hex[..3], &hex[hex.len() - 3..])
    }

    /// Number of differing bits between two names.
    pub fn hamming_distance(&self, other: &GdpName) -> u32 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }
}

impl fmt::Display for GdpName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for GdpName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GdpName[{}]", self.short())
    }
}

impl FromStr for GdpName {
    type Err = NameError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GdpName::from_hex(s)
    }
}

impl From<[u8; NAME_LEN]> for GdpName {
    fn from(bytes: [u8; NAME_LEN]) -> Self {
        GdpName(bytes)
    }
}

/// The fields hashed into a topic's name.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TopicMetadata {
    pub topic_name: String,
    pub topic_type: String,
    pub author: String,
    pub maintainer: String,
    pub description: String,
    /// Disambiguates the same topic deployed at several locations.
    pub unique_suffix: String,
    /// SHA-256 of the topic certificate.
    pub cert_fingerprint: [u8; 32],
}

impl TopicMetadata {
    /// Metadata with only the required fields set.
    pub fn new(
        topic_name: impl Into<String>,
        topic_type: impl Into<String>,
        cert_fingerprint: [u8; 32],
    ) -> Self {
        TopicMetadata {
            topic_name: topic_name.into(),
            topic_type: topic_type.into(),
            author: String::new(),
            maintainer: String::new(),
            description: String::new(),
            unique_suffix: String::new(),
            cert_fingerprint,
        }
    }

    pub fn validate(&self) -> Result<(), NameError> {
        if self.topic_name.is_empty() {
            return Err(NameError::EmptyField("topic_name"));
        }
        if self.topic_type.is_empty() {
            return Err(NameError::EmptyField("topic_type"));
        }
        Ok(())
    }

    fn string_fields(&self) -> [(&'static str, &str); 6] {
        [
            ("topic_name", &self.topic_name),
            ("topic_type", &self.topic_type),
            ("author", &self.author),
            ("maintainer", &self.maintainer),
            ("description", &self.description),
            ("unique_suffix", &self.unique_suffix),
        ]
    }
}

/// Serializes metadata as seven `u32` big-endian length-prefixed fields in
/// fixed order, the fingerprint last.
pub fn canonical_serialize(meta: &TopicMetadata) -> Result<Vec<u8>, NameError> {
    meta.validate()?;
    let fields = meta.string_fields();
    let len = fields.iter().map(|(_, v)| 4 + v.len()).sum::<usize>() + 4 + 32;
    let mut out = Vec::with_capacity(len);
    for (field, value) in fields {
        let n = u32::try_from(value.len())
            .map_err(|_| NameError::FieldTooLong { field, len: value.len() })?;
        out.extend_from_slice(&n.to_be_bytes());
        out.extend_from_slice(value.as_bytes());
    }
    out.extend_from_slice(&32u32.to_be_bytes());
    out.extend_from_slice(&meta.cert_fingerprint);
    Ok(out)
}

/// SHA-256 over [`canonical_serialize`].
pub fn derive_name(meta: &TopicMetadata) -> Result<GdpName, NameError> {
    let bytes = canonical_serialize(meta)?;
    Ok(GdpName(Sha256::digest(&bytes).into()))
}

/// JSON form of [`TopicMetadata`] read by `sgc name`; the fingerprint is hex.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetadataDocument {
    pub topic_name: String,
    pub topic_type: String,
    #[serde(default)]
    pub author: String,
    #[serde(default)]
    pub maintainer: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub unique_suffix: String,
    pub cert_fingerprint: String,
}

impl TryFrom<MetadataDocument> for TopicMetadata {
    type Error = NameError;

    fn try_from(doc: MetadataDocument) -> Result<Self, Self::Error> {
        let raw = hex::decode(&doc.cert_fingerprint).map_err(|e| NameError::BadHex(e.to_string()))?;
        let cert_fingerprint: [u8; 32] = raw
            .as_slice()
            .try_into()
            .map_err(|_| NameError::BadFingerprint(raw.len()))?;
        let meta = TopicMetadata {
            topic_name: doc.topic_name,
            topic_type: doc.topic_type,
            author: doc.author,
            maintainer: doc.maintainer,
            description: doc.description,
            unique_suffix: doc.unique_suffix,
            cert_fingerprint,
        };
        meta.validate()?;
        Ok(meta)
    }
}

impl From<&TopicMetadata> for MetadataDocument {
    fn from(meta: &TopicMetadata) -> Self {
        MetadataDocument {
            topic_name: meta.topic_name.clone(),
            topic_type: meta.topic_type.clone(),
            author: meta.author.clone(),
            maintainer: meta.maintainer.clone(),
            description: meta.description.clone(),
            unique_suffix: meta.unique_suffix.clone(),
            cert_fingerprint: hex::encode(meta.cert_fingerprint),
        }
    }
}

/// Parses a metadata JSON document.
pub fn parse_metadata_json(text: &str) -> Result<TopicMetadata, NameError> {
    let doc: MetadataDocument =
        serde_json::from_str(text).map_err(|e| NameError::Document(e.to_string()))?;
    doc.try_into()
}
