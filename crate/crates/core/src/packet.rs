//! Wire codec shared by every transport.
//!
//! ```text
//! offset  size  field
//!      0     2  magic 0x53 0x47 ("SG")
//!      2     1  version (0x01)
//!      3     1  packet type
//!      4     1  flags (bit 0: payload is a sealed envelope)
//!      5     1  ttl (remaining hops)
//!      6    32  source name
//!     38    32  destination name (all zero: unaddressed)
//!     70     8  dedup nonce, big-endian
//!     78     4  payload length, big-endian
//!     82     -  payload
//! ```
//!
//! Decoding from [`Bytes`] is zero-copy: the payload is a slice of the input.

use std::sync::atomic::{AtomicU64, Ordering};

use bytes::{Buf, BufMut, Bytes, BytesMut};
use thiserror::Error;

use crate::crypto::{Certificate, CryptoError};
use crate::name::{GdpName, NAME_LEN};

pub const MAGIC: [u8; 2] = [0x53, 0x47];
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 82;
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;
pub const FLAG_SEALED: u8 = 0x01;

/// Bytes of the header bound into an envelope digest or control signature:
/// type, flags, source, destination, nonce. The ttl and length are not
/// covered since routers rewrite the ttl at every hop.
pub const COVERED_LEN: usize = 1 + 1 + NAME_LEN + NAME_LEN + 8;

static PAYLOAD_COPIES: AtomicU64 = AtomicU64::new(0);

/// Number of times the codec has copied a payload into a new buffer.
pub fn payload_copies() -> u64 {
    PAYLOAD_COPIES.load(Ordering::Relaxed)
}

fn count_copy() {
    PAYLOAD_COPIES.fetch_add(1, Ordering::Relaxed);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PacketType {
    Advertisement = 0x01,
    Subscribe = 0x02,
    Data = 0x03,
    RibQuery = 0x04,
    RibResponse = 0x05,
}

impl TryFrom<u8> for PacketType {
    type Error = DecodeError;

    fn try_from(v: u8) -> Result<Self, DecodeError> {
        Ok(match v {
            0x01 => PacketType::Advertisement,
            0x02 => PacketType::Subscribe,
            0x03 => PacketType::Data,
            0x04 => PacketType::RibQuery,
            0x05 => PacketType::RibResponse,
            other => return Err(DecodeError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown packet type 0x{0:02x}")]
    UnknownType(u8),
    #[error("truncated packet: need {needed} bytes, have {have}")]
    TruncatedPacket { needed: usize, have: usize },
    #[error("payload of {0} bytes exceeds the 16 MiB limit")]
    OversizePayload(usize),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("payload of {0} bytes exceeds the 16 MiB limit")]
    OversizePayload(usize),
    #[error("ttl must be at least 1 when a packet is emitted")]
    ZeroTtl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PacketHeader {
    pub ptype: PacketType,
    pub flags: u8,
    pub ttl: u8,
    pub source: GdpName,
    pub destination: GdpName,
    pub nonce: u64,
}

impl PacketHeader {
    pub fn new(ptype: PacketType, source: GdpName, destination: GdpName, ttl: u8) -> Self {
        PacketHeader { ptype, flags: 0, ttl, source, destination, nonce: rand::random() }
    }

    pub fn is_sealed(&self) -> bool {
        self.flags & FLAG_SEALED != 0
    }

    pub fn encode(&self, payload_len: usize) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..2].copy_from_slice(&MAGIC);
        out[2] = VERSION;
        out[3] = self.ptype as u8;
        out[4] = self.flags;
        out[5] = self.ttl;
        out[6..38].copy_from_slice(self.source.as_bytes());
        out[38..70].copy_from_slice(self.destination.as_bytes());
        out[70..78].copy_from_slice(&self.nonce.to_be_bytes());
        out[78..82].copy_from_slice(&(payload_len as u32).to_be_bytes());
        out
    }

    pub fn covered_bytes(&self) -> [u8; COVERED_LEN] {
        let mut out = [0u8; COVERED_LEN];
        out[0] = self.ptype as u8;
        out[1] = self.flags;
        out[2..34].copy_from_slice(self.source.as_bytes());
        out[34..66].copy_from_slice(self.destination.as_bytes());
        out[66..74].copy_from_slice(&self.nonce.to_be_bytes());
        out
    }

    /// Parses and validates the fixed header, returning it with the
    /// declared payload length.
    pub fn decode(buf: &[u8]) -> Result<(PacketHeader, usize), DecodeError> {
        if buf.len() < 2 {
            return Err(DecodeError::TruncatedPacket { needed: HEADER_LEN, have: buf.len() });
        }
        if buf[0..2] != MAGIC {
            return Err(DecodeError::BadMagic([buf[0], buf[1]]));
        }
        if buf.len() < HEADER_LEN {
            return Err(DecodeError::TruncatedPacket { needed: HEADER_LEN, have: buf.len() });
        }
        if buf[2] != VERSION {
            return Err(DecodeError::UnsupportedVersion(buf[2]));
        }
        let ptype = PacketType::try_from(buf[3])?;
        let mut name = [0u8; NAME_LEN];
        name.copy_from_slice(&buf[6..38]);
        let source = GdpName::from_bytes(name);
        name.copy_from_slice(&buf[38..70]);
        let destination = GdpName::from_bytes(name);
        let nonce = u64::from_be_bytes(buf[70..78].try_into().expect("8 bytes"));
        let payload_len = u32::from_be_bytes(buf[78..82].try_into().expect("4 bytes")) as usize;
        if payload_len > MAX_PAYLOAD {
            return Err(DecodeError::OversizePayload(payload_len));
        }
        let header = PacketHeader { ptype, flags: buf[4], ttl: buf[5], source, destination, nonce };
        Ok((header, payload_len))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub header: PacketHeader,
    pub payload: Bytes,
}

/// An encoded packet as two buffers, so a shared payload can be written
/// to several connections without being copied.
#[derive(Debug, Clone)]
pub struct Frame {
    pub header: [u8; HEADER_LEN],
    pub payload: Bytes,
}

impl Frame {
    pub fn len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn ptype(&self) -> Option<PacketType> {
        PacketType::try_from(self.header[3]).ok()
    }
}

impl Packet {
    pub fn new(header: PacketHeader, payload: impl Into<Bytes>) -> Self {
        Packet { header, payload: payload.into() }
    }

    /// Signed advertisement of `name`, whose holder owns `cert`.
    pub fn advertisement(name: GdpName, cert: Certificate, key: &crate::crypto::KeyPair, ttl: u8) -> Self {
        let h = PacketHeader::new(PacketType::Advertisement, name, GdpName::ZERO, ttl);
        let proof = ControlProof::sign(h.ptype, &h.source, &h.destination, cert, key);
        Packet::new(h, proof.encode())
    }

    /// Signed subscribe to `name` on behalf of `subscriber`.
    pub fn subscribe(
        subscriber: GdpName,
        name: GdpName,
        cert: Certificate,
        key: &crate::crypto::KeyPair,
        ttl: u8,
    ) -> Self {
        let h = PacketHeader::new(PacketType::Subscribe, subscriber, name, ttl);
        let proof = ControlProof::sign(h.ptype, &h.source, &h.destination, cert, key);
        Packet::new(h, proof.encode())
    }

    fn check(&self) -> Result<(), EncodeError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(EncodeError::OversizePayload(self.payload.len()));
        }
        if self.header.ttl == 0 {
            return Err(EncodeError::ZeroTtl);
        }
        Ok(())
    }

    /// Encodes into one contiguous buffer. This copies the payload.
    pub fn encode(&self) -> Result<Vec<u8>, EncodeError> {
        self.check()?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.header.encode(self.payload.len()));
        out.extend_from_slice(&self.payload);
        count_copy();
        Ok(out)
    }

    /// Encodes without touching the payload bytes.
    pub fn frame(&self) -> Result<Frame, EncodeError> {
        self.check()?;
        Ok(Frame { header: self.header.encode(self.payload.len()), payload: self.payload.clone() })
    }
}

/// Decodes exactly one packet; the payload is a view into `bytes`.
pub fn decode(mut bytes: Bytes) -> Result<Packet, DecodeError> {
    let (header, payload_len) = PacketHeader::decode(&bytes)?;
    let total = HEADER_LEN + payload_len;
    if bytes.len() < total {
        return Err(DecodeError::TruncatedPacket { needed: total, have: bytes.len() });
    }
    if bytes.len() > total {
        return Err(DecodeError::TrailingBytes(bytes.len() - total));
    }
    bytes.advance(HEADER_LEN);
    Ok(Packet { header, payload: bytes })
}

/// Decodes from a borrowed slice. This copies the payload.
pub fn decode_slice(buf: &[u8]) -> Result<Packet, DecodeError> {
    let (header, payload_len) = PacketHeader::decode(buf)?;
    let total = HEADER_LEN + payload_len;
    if buf.len() < total {
        return Err(DecodeError::TruncatedPacket { needed: total, have: buf.len() });
    }
    if buf.len() > total {
        return Err(DecodeError::TrailingBytes(buf.len() - total));
    }
    count_copy();
    Ok(Packet { header, payload: Bytes::copy_from_slice(&buf[HEADER_LEN..]) })
}

/// Credential carried by signed control packets (Advertisement, Subscribe,
/// RibResponse):
///
/// ```text
/// cert_len (u32 BE) | certificate canonical JSON | sig_len (u16 BE) | signature
/// ```
///
/// The signature is RSASSA-PSS over [`control_message`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlProof {
    pub cert: Certificate,
    pub signature: Vec<u8>,
}

/// Bytes signed by a control credential. Advertisements and RibResponses
/// share the Advertisement kind so a stored advertisement proof can be
/// replayed in a response.
pub fn control_message(kind: PacketType, source: &GdpName, destination: &GdpName) -> [u8; 1 + 2 * NAME_LEN] {
    let kind = match kind {
        PacketType::RibResponse => PacketType::Advertisement,
        k => k,
    };
    let mut out = [0u8; 1 + 2 * NAME_LEN];
    out[0] = kind as u8;
    out[1..33].copy_from_slice(source.as_bytes());
    out[33..65].copy_from_slice(destination.as_bytes());
    out
}

impl ControlProof {
    pub fn sign(
        kind: PacketType,
        source: &GdpName,
        destination: &GdpName,
        cert: Certificate,
        key: &crate::crypto::KeyPair,
    ) -> Self {
        let signature = key.sign(&control_message(kind, source, destination));
        ControlProof { cert, signature }
    }

    pub fn verify(&self, kind: PacketType, source: &GdpName, destination: &GdpName) -> bool {
        self.cert.verify_signature(&control_message(kind, source, destination), &self.signature)
    }

    pub fn encode(&self) -> Bytes {
        let json = self.cert.to_canonical_json();
        let mut out = BytesMut::with_capacity(4 + json.len() + 2 + self.signature.len());
        out.put_u32(json.len() as u32);
        out.put_slice(json.as_bytes());
        out.put_u16(self.signature.len() as u16);
        out.put_slice(&self.signature);
        out.freeze()
    }

    pub fn decode(mut buf: &[u8]) -> Result<Self, CryptoError> {
        const SHORT: CryptoError = CryptoError::Malformed("control credential truncated");
        if buf.len() < 4 {
            return Err(SHORT);
        }
        let cert_len = buf.get_u32() as usize;
        if buf.len() < cert_len + 2 {
            return Err(SHORT);
        }
        let json = std::str::from_utf8(&buf[..cert_len])
            .map_err(|_| CryptoError::Malformed("certificate is not UTF-8"))?;
        let cert = Certificate::from_json(json)?;
        buf.advance(cert_len);
        let sig_len = buf.get_u16() as usize;
        if buf.len() != sig_len {
            return Err(CryptoError::Malformed("signature length mismatch"));
        }
        Ok(ControlProof { cert, signature: buf.to_vec() })
    }
}
