//! The JSON message format used in transit and on the local-bus endpoint.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

/// One bus message. Fields are declared in key order so the serialized
/// form is canonical: sorted keys, no whitespace, non-ASCII left as UTF-8.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedMessage {
    /// Base64 (standard alphabet, padded) of the raw message bytes.
    pub data: String,
    #[serde(default)]
    pub timestamp_ns: u64,
    pub topic: String,
    #[serde(rename = "type")]
    pub msg_type: String,
}

impl UnifiedMessage {
    pub fn new(topic: impl Into<String>, msg_type: impl Into<String>, timestamp_ns: u64, raw: &[u8]) -> Self {
        UnifiedMessage { data: B64.encode(raw), timestamp_ns, topic: topic.into(), msg_type: msg_type.into() }
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("message serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }

    pub fn decode_data(&self) -> Result<Vec<u8>, base64::DecodeError> {
        B64.decode(&self.data)
    }
}

/// Nanoseconds since the Unix epoch.
pub fn now_ns() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}
