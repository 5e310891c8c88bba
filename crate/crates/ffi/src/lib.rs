//! C interface to `sgc-core`.
//!
//! Every function returns an `SgcStatus`. On failure a description is
//! kept per thread and can be read with `sgc_last_error`. Buffers handed
//! out by this library are released with `sgc_buffer_free`; handles with
//! their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use bytes::Bytes;
use sgc_core::crypto::{self, CryptoError, Envelope, TrustAnchor};
use sgc_core::keystore::{self, KeyStore, KeyStoreError};
use sgc_core::name::{derive_name, GdpName, TopicMetadata};
use sgc_core::packet::{self, Packet, PacketHeader, PacketType, FLAG_SEALED};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgcStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    /// Bytes are not a well-formed packet.
    Decode = 4,
    /// Digest mismatch: the packet was modified.
    Integrity = 5,
    /// Signature does not verify under the sender's certificate.
    Authenticity = 6,
    /// Key or certificate missing, unreadable or untrusted.
    Key = 7,
    Panic = 8,
}

/// Bytes owned by this library.
#[repr(C)]
#[derive(Debug)]
pub struct SgcBuffer {
    pub data: *mut u8,
    pub len: usize,
}

impl SgcBuffer {
    fn empty() -> Self {
        SgcBuffer { data: ptr::null_mut(), len: 0 }
    }

    fn from_vec(v: Vec<u8>) -> Self {
        let mut b = v.into_boxed_slice();
        let out = SgcBuffer { data: b.as_mut_ptr(), len: b.len() };
        std::mem::forget(b);
        out
    }
}

/// Topic metadata. String fields are NUL-terminated UTF-8; optional ones
/// may be NULL. `cert_fingerprint` points to 32 bytes.
#[repr(C)]
pub struct SgcTopicMetadata {
    pub topic_name: *const c_char,
    pub topic_type: *const c_char,
    pub author: *const c_char,
    pub maintainer: *const c_char,
    pub description: *const c_char,
    pub unique_suffix: *const c_char,
    pub cert_fingerprint: *const u8,
}

/// Header fields of a validated packet.
#[repr(C)]
#[derive(Debug, Default, Clone, Copy)]
pub struct SgcPacketInfo {
    pub packet_type: u8,
    pub flags: u8,
    pub ttl: u8,
    pub source: [u8; 32],
    pub destination: [u8; 32],
    pub nonce: u64,
    pub payload_len: usize,
}

/// Key directory plus an optional trust anchor.
pub struct SgcKeyStore {
    keys: KeyStore,
    anchor: Option<TrustAnchor>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SgcStatus, String);

type Outcome = Result<(), Failure>;

fn fail(status: SgcStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

impl From<CryptoError> for Failure {
    fn from(e: CryptoError) -> Self {
        let status = match e {
            CryptoError::Integrity => SgcStatus::Integrity,
            CryptoError::Authenticity => SgcStatus::Authenticity,
            CryptoError::Malformed(_) => SgcStatus::Decode,
            CryptoError::Key(_) | CryptoError::Certificate(_) => SgcStatus::Key,
        };
        fail(status, e.to_string())
    }
}

impl From<KeyStoreError> for Failure {
    fn from(e: KeyStoreError) -> Self {
        fail(SgcStatus::Key, e.to_string())
    }
}

fn set_error(msg: Option<String>) {
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = msg.map(|m| CString::new(m.replace('\0', " ")).expect("no interior NUL"));
    });
}

fn guard(f: impl FnOnce() -> Outcome) -> SgcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(None);
            SgcStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(Some(msg));
            status
        }
        Err(_) => {
            set_error(Some("internal panic".into()));
            SgcStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, field: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(SgcStatus::NullArgument, format!("{field} is NULL")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(SgcStatus::InvalidUtf8, format!("{field} is not UTF-8")))
}

unsafe fn optional_text(p: *const c_char, field: &str) -> Result<String, Failure> {
    if p.is_null() {
        Ok(String::new())
    } else {
        text(p, field).map(str::to_owned)
    }
}

unsafe fn bytes<'a>(p: *const u8, len: usize, field: &str) -> Result<&'a [u8], Failure> {
    match (p.is_null(), len) {
        (_, 0) => Ok(&[]),
        (true, _) => Err(fail(SgcStatus::NullArgument, format!("{field} is NULL"))),
        (false, n) => Ok(std::slice::from_raw_parts(p, n)),
    }
}

unsafe fn name_arg(p: *const u8, field: &str) -> Result<GdpName, Failure> {
    let b = bytes(p, 32, field)?;
    Ok(GdpName::from_bytes(b.try_into().expect("32 bytes")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, field: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(SgcStatus::NullArgument, format!("{field} is NULL")))
}

/// Description of the last failure on this thread, or NULL after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sgc_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sgc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a buffer returned by this library. Safe to call on an empty buffer.
///
/// # Safety
/// `buf` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn sgc_buffer_free(buf: SgcBuffer) {
    if !buf.data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(buf.data, buf.len)));
    }
}

/// Derives the 32-byte name of a topic into `out`.
///
/// # Safety
/// `meta` must point to a valid `SgcTopicMetadata`; `out` to 32 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sgc_derive_name(meta: *const SgcTopicMetadata, out: *mut u8) -> SgcStatus {
    guard(|| {
        let m = meta.as_ref().ok_or_else(|| fail(SgcStatus::NullArgument, "meta is NULL"))?;
        if out.is_null() {
            return Err(fail(SgcStatus::NullArgument, "out is NULL"));
        }
        let fp = bytes(m.cert_fingerprint, 32, "cert_fingerprint")?;
        let mut t = TopicMetadata::new(
            text(m.topic_name, "topic_name")?,
            text(m.topic_type, "topic_type")?,
            fp.try_into().expect("32 bytes"),
        );
        t.author = optional_text(m.author, "author")?;
        t.maintainer = optional_text(m.maintainer, "maintainer")?;
        t.description = optional_text(m.description, "description")?;
        t.unique_suffix = optional_text(m.unique_suffix, "unique_suffix")?;
        let name = derive_name(&t).map_err(|e| fail(SgcStatus::InvalidArgument, e.to_string()))?;
        ptr::copy_nonoverlapping(name.as_bytes().as_ptr(), out, 32);
        Ok(())
    })
}

/// Writes the 64-character lowercase hex form of a name plus a NUL into `out`.
///
/// # Safety
/// `name` must point to 32 readable bytes; `out` to 65 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sgc_name_to_hex(name: *const u8, out: *mut c_char) -> SgcStatus {
    guard(|| {
        let n = name_arg(name, "name")?;
        if out.is_null() {
            return Err(fail(SgcStatus::NullArgument, "out is NULL"));
        }
        let hex = n.to_hex();
        ptr::copy_nonoverlapping(hex.as_ptr().cast::<c_char>(), out, 64);
        *out.add(64) = 0;
        Ok(())
    })
}

/// Opens a key directory holding `<id>.key.pem`, `<id>.cert.json` and
/// `<id>.psk` files. When `anchor_id` is not NULL, sender certificates
/// used by `sgc_open_packet` must be issued by that anchor.
///
/// # Safety
/// `dir` must be NUL-terminated, `anchor_id` NULL or NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sgc_keystore_open(dir: *const c_char, anchor_id: *const c_char, out: *mut *mut SgcKeyStore) -> SgcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let dir = text(dir, "dir")?;
        if !std::path::Path::new(dir).is_dir() {
            return Err(fail(SgcStatus::Key, format!("{dir}: not a directory")));
        }
        let keys = KeyStore::open(dir);
        let anchor = match anchor_id.is_null() {
            true => None,
            false => {
                let id = text(anchor_id, "anchor_id")?;
                Some(keystore::load_anchor(&keystore::cert_path(std::path::Path::new(dir), id))?)
            }
        };
        *out = Box::into_raw(Box::new(SgcKeyStore { keys, anchor }));
        Ok(())
    })
}

/// # Safety
/// `ks` must be NULL or a handle from `sgc_keystore_open` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sgc_keystore_free(ks: *mut SgcKeyStore) {
    if !ks.is_null() {
        drop(Box::from_raw(ks));
    }
}

/// Seals `payload` into an encoded Data packet addressed to `name`, signed
/// by `identity` and encrypted with the pre-shared key `key_ref`.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `name` is 32 bytes.
#[no_mangle]
pub unsafe extern "C" fn sgc_seal_packet(
    ks: *const SgcKeyStore,
    identity: *const c_char,
    key_ref: *const c_char,
    name: *const u8,
    ttl: u8,
    payload: *const u8,
    payload_len: usize,
    out: *mut SgcBuffer,
) -> SgcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = SgcBuffer::empty();
        let ks = ks.as_ref().ok_or_else(|| fail(SgcStatus::NullArgument, "keystore is NULL"))?;
        if ttl == 0 {
            return Err(fail(SgcStatus::InvalidArgument, "ttl must be at least 1"));
        }
        let signer = ks.keys.keypair(text(identity, "identity")?)?;
        let key = ks.keys.symmetric(text(key_ref, "key_ref")?)?;
        let n = name_arg(name, "name")?;
        let data = bytes(payload, payload_len, "payload")?;
        let mut h = PacketHeader::new(PacketType::Data, n, n, ttl);
        h.flags = FLAG_SEALED;
        let env = crypto::seal(data, &key, &signer, &h.covered_bytes());
        let wire = Packet::new(h, env.into_bytes()).encode().map_err(|e| fail(SgcStatus::InvalidArgument, e.to_string()))?;
        *out = SgcBuffer::from_vec(wire);
        Ok(())
    })
}

/// Decodes an encoded sealed packet, checks it against the certificate
/// `sender` and returns the plaintext payload.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn sgc_open_packet(
    ks: *const SgcKeyStore,
    sender: *const c_char,
    key_ref: *const c_char,
    wire: *const u8,
    wire_len: usize,
    out: *mut SgcBuffer,
) -> SgcStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = SgcBuffer::empty();
        let ks = ks.as_ref().ok_or_else(|| fail(SgcStatus::NullArgument, "keystore is NULL"))?;
        let cert = ks.keys.certificate(text(sender, "sender")?)?;
        if let Some(a) = &ks.anchor {
            a.verify(&cert)?;
        }
        let key = ks.keys.symmetric(text(key_ref, "key_ref")?)?;
        let pkt = packet::decode(Bytes::copy_from_slice(bytes(wire, wire_len, "wire")?))
            .map_err(|e| fail(SgcStatus::Decode, e.to_string()))?;
        if !pkt.header.is_sealed() {
            return Err(fail(SgcStatus::Decode, "packet is not sealed"));
        }
        let env = Envelope::parse(pkt.payload.clone())?;
        let plain = crypto::open(&env, &key, &cert, &pkt.header.covered_bytes())?;
        *out = SgcBuffer::from_vec(plain);
        Ok(())
    })
}

/// Checks that `wire` is exactly one well-formed packet and reports its header.
///
/// # Safety
/// `wire` must be valid for `wire_len` bytes; `info` writable or NULL.
#[no_mangle]
pub unsafe extern "C" fn sgc_packet_validate(wire: *const u8, wire_len: usize, info: *mut SgcPacketInfo) -> SgcStatus {
    guard(|| {
        let data = bytes(wire, wire_len, "wire")?;
        let pkt = packet::decode_slice(data).map_err(|e| fail(SgcStatus::Decode, e.to_string()))?;
        if let Some(i) = info.as_mut() {
            *i = SgcPacketInfo {
                packet_type: pkt.header.ptype as u8,
                flags: pkt.header.flags,
                ttl: pkt.header.ttl,
                source: *pkt.header.source.as_bytes(),
                destination: *pkt.header.destination.as_bytes(),
                nonce: pkt.header.nonce,
                payload_len: pkt.payload.len(),
            };
        }
        Ok(())
    })
}
