//! The proxy bridges a local bus into the mesh.
//!
//! For each public topic it derives the global name, then either advertises
//! it and ships sealed local messages to its router (publish), or subscribes
//! to it and republishes what arrives (subscribe). Private topics stay on
//! the local bus.

pub mod bus;
pub mod message;
pub mod queue;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};

use bytes::Bytes;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::broadcast;
use tracing::{error, info, warn};

use crate::crypto::{self, Certificate, CryptoError, Envelope, KeyPair, SymmetricKey};
use crate::keystore::{KeyStore, KeyStoreError};
use crate::name::{derive_name, GdpName, NameError, TopicMetadata};
use crate::packet::{ControlProof, Frame, Packet, PacketHeader, PacketType, FLAG_SEALED};
use crate::rib::ConnectionId;
use crate::router::DEFAULT_TTL;
use crate::transport::{self, Endpoint, Link, LinkContext, PeerConfig, TunnelMode};

pub use bus::{BusMessage, LocalBus, Origin};
pub use message::UnifiedMessage;
pub use queue::DropOldestQueue;

/// Per-topic ingress queue depth.
pub const QUEUE_DEPTH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Publish,
    Subscribe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visibility {
    #[default]
    Public,
    Private,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicConfig {
    pub topic_name: String,
    pub topic_type: String,
    pub action: Action,
    pub visibility: Visibility,
    /// Pre-shared key sealing this topic's data.
    pub key_ref: Option<String>,
    pub unique_suffix: String,
    /// Certificate of the topic owner; defaults to the proxy identity.
    pub cert_ref: Option<String>,
    pub author: String,
    pub maintainer: String,
    pub description: String,
}

impl TopicConfig {
    pub fn new(topic_name: impl Into<String>, topic_type: impl Into<String>, action: Action) -> Self {
        TopicConfig {
            topic_name: topic_name.into(),
            topic_type: topic_type.into(),
            action,
            visibility: Visibility::Public,
            key_ref: None,
            unique_suffix: String::new(),
            cert_ref: None,
            author: String::new(),
            maintainer: String::new(),
            description: String::new(),
        }
    }

    pub fn key(mut self, key_ref: impl Into<String>) -> Self {
        self.key_ref = Some(key_ref.into());
        self
    }

    pub fn cert(mut self, cert_ref: impl Into<String>) -> Self {
        self.cert_ref = Some(cert_ref.into());
        self
    }

    pub fn private(mut self) -> Self {
        self.visibility = Visibility::Private;
        self
    }

    pub fn suffix(mut self, s: impl Into<String>) -> Self {
        self.unique_suffix = s.into();
        self
    }

    pub fn metadata(&self, cert_fingerprint: [u8; 32]) -> TopicMetadata {
        TopicMetadata {
            topic_name: self.topic_name.clone(),
            topic_type: self.topic_type.clone(),
            author: self.author.clone(),
            maintainer: self.maintainer.clone(),
            description: self.description.clone(),
            unique_suffix: self.unique_suffix.clone(),
            cert_fingerprint,
        }
    }
}

/// How Data payloads travel. `Plain` skips sealing and exists only as a
/// benchmark baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadMode {
    #[default]
    Sealed,
    Plain,
}

impl std::str::FromStr for PayloadMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sealed" => Ok(PayloadMode::Sealed),
            "plain" => Ok(PayloadMode::Plain),
            other => Err(format!("unknown payload mode `{other}` (expected sealed or plain)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProxySettings {
    pub topics: Vec<TopicConfig>,
    pub router: PeerConfig,
    /// Listen address of the local-bus TCP endpoint.
    pub local_bus: Option<String>,
    /// Key and certificate id this proxy signs with.
    pub identity: String,
    pub keys: Arc<KeyStore>,
    pub ttl: u8,
    pub payload_mode: PayloadMode,
}

impl ProxySettings {
    pub fn new(router: PeerConfig, identity: impl Into<String>, keys: Arc<KeyStore>) -> Self {
        ProxySettings {
            topics: Vec::new(),
            router,
            local_bus: None,
            identity: identity.into(),
            keys,
            ttl: DEFAULT_TTL,
            payload_mode: PayloadMode::Sealed,
        }
    }
}

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("identity `{id}`: {source}")]
    Identity { id: String, source: KeyStoreError },
    #[error("topic `{topic}`: {source}")]
    Certificate { topic: String, source: KeyStoreError },
    #[error("topic `{topic}`: {source}")]
    Name { topic: String, source: NameError },
    #[error("topic `{0}`: its certificate does not belong to this proxy's identity key, so it cannot be published")]
    CertMismatch(String),
    #[error("topic `{0}` is configured more than once")]
    Duplicate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PublishError {
    #[error("topic `{0}` is not a public publish topic")]
    NotPublished(String),
    #[error("topic `{0}` has no usable key; message dropped")]
    MissingKey(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DeliveryError {
    #[error("no subscribed topic has this name")]
    UnknownTopic,
    #[error("payload sealing does not match this proxy's mode")]
    SealingMismatch,
    #[error("topic has no usable key")]
    MissingKey,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("type `{got}` does not match the configured `{expected}`")]
    TypeMismatch { expected: String, got: String },
}

#[derive(Debug, Default)]
struct Counters {
    ingress: AtomicU64,
    sent: AtomicU64,
    dropped_no_key: AtomicU64,
    dropped_disconnected: AtomicU64,
    received: AtomicU64,
    delivered: AtomicU64,
    dropped_tampered: AtomicU64,
    dropped_type: AtomicU64,
    dropped_unknown: AtomicU64,
    dropped_malformed: AtomicU64,
    control_sent: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ProxyStats {
    pub ingress: u64,
    pub queue_overflow: u64,
    pub sent: u64,
    pub dropped_no_key: u64,
    pub dropped_disconnected: u64,
    pub received: u64,
    pub delivered: u64,
    /// Integrity or authenticity failures.
    pub dropped_tampered: u64,
    pub dropped_type: u64,
    pub dropped_unknown: u64,
    pub dropped_malformed: u64,
    pub control_sent: u64,
}

struct Topic {
    cfg: TopicConfig,
    name: GdpName,
    key: Option<SymmetricKey>,
    cert: Arc<Certificate>,
    conn: Option<ConnectionId>,
    /// Header source/destination and credential sent on every connect.
    control: Option<(PacketType, GdpName, GdpName, Bytes)>,
    queue: Option<Arc<DropOldestQueue<BusMessage>>>,
}

struct Core {
    me: Weak<Core>,
    topics: Vec<Arc<Topic>>,
    by_name: HashMap<GdpName, Arc<Topic>>,
    identity_key: KeyPair,
    mode: PayloadMode,
    ttl: u8,
    links: Mutex<HashMap<ConnectionId, Link>>,
    bus: Arc<LocalBus>,
    counters: Counters,
}

/// A running proxy.
#[derive(Clone)]
pub struct Proxy {
    core: Arc<Core>,
    ctx: LinkContext,
    bus_addr: Option<SocketAddr>,
}

impl Proxy {
    pub async fn start(settings: ProxySettings, ctx: LinkContext) -> Result<Proxy, ProxyError> {
        let ks = &settings.keys;
        let id = settings.identity.clone();
        let identity_key = ks.keypair(&id).map_err(|source| ProxyError::Identity { id: id.clone(), source })?;
        let identity_cert = ks.certificate(&id).map_err(|source| ProxyError::Identity { id: id.clone(), source })?;
        let subscriber = GdpName::from_bytes(identity_cert.fingerprint());
        let ttl = settings.ttl.max(1);

        let shared = ctx.next_id();
        let mut topics = Vec::new();
        let mut by_name = HashMap::new();
        let mut seen = std::collections::HashSet::new();
        for cfg in settings.topics {
            if !seen.insert((cfg.topic_name.clone(), cfg.action)) {
                return Err(ProxyError::Duplicate(cfg.topic_name));
            }
            let topic = cfg.topic_name.clone();
            let cert = match &cfg.cert_ref {
                Some(r) => ks.certificate(r).map_err(|source| ProxyError::Certificate { topic: topic.clone(), source })?,
                None => identity_cert.clone(),
            };
            let name = derive_name(&cfg.metadata(cert.fingerprint()))
                .map_err(|source| ProxyError::Name { topic: topic.clone(), source })?;
            let public = cfg.visibility == Visibility::Public;
            if public && cfg.action == Action::Publish && cert.public_key != identity_cert.public_key {
                return Err(ProxyError::CertMismatch(topic));
            }
            let key = match (&cfg.key_ref, public, settings.payload_mode) {
                (Some(r), true, PayloadMode::Sealed) => match ks.symmetric(r) {
                    Ok(k) => Some(k),
                    Err(e) => {
                        error!(topic = %topic, key = %r, error = %e, "topic key unavailable; its data will be dropped");
                        None
                    }
                },
                (None, true, PayloadMode::Sealed) => {
                    error!(topic = %topic, "topic has no key_ref; its data will be dropped");
                    None
                }
                _ => None,
            };
            let conn = match (public, settings.router.mode) {
                (false, _) => None,
                (true, TunnelMode::Shared) => Some(shared),
                (true, TunnelMode::Dedicated) => Some(ctx.next_id()),
            };
            let control = public.then(|| {
                let (kind, src, dst) = match cfg.action {
                    Action::Publish => (PacketType::Advertisement, name, GdpName::ZERO),
                    Action::Subscribe => (PacketType::Subscribe, subscriber, name),
                };
                let proof = ControlProof::sign(kind, &src, &dst, (*identity_cert).clone(), &identity_key);
                (kind, src, dst, proof.encode())
            });
            let queue = (public && cfg.action == Action::Publish).then(|| Arc::new(DropOldestQueue::new(QUEUE_DEPTH)));
            let t = Arc::new(Topic { cfg, name, key, cert, conn, control, queue });
            if public && t.cfg.action == Action::Subscribe {
                by_name.insert(name, t.clone());
            }
            info!(topic = %t.cfg.topic_name, name = %name, action = ?t.cfg.action, visibility = ?t.cfg.visibility, "topic configured");
            topics.push(t);
        }

        let bus = Arc::new(LocalBus::new());
        let core = Arc::new_cyclic(|me| Core {
            me: me.clone(),
            topics,
            by_name,
            identity_key,
            mode: settings.payload_mode,
            ttl,
            links: Mutex::new(HashMap::new()),
            bus: bus.clone(),
            counters: Counters::default(),
        });

        let bus_addr = match &settings.local_bus {
            Some(a) => Some(bus.serve(a, ctx.shutdown.clone()).await?),
            None => None,
        };

        for t in core.topics.iter().filter(|t| t.queue.is_some()) {
            core.spawn_publisher(t.clone(), &ctx);
        }
        let mut conns: Vec<ConnectionId> = core.topics.iter().filter_map(|t| t.conn).collect();
        conns.sort();
        conns.dedup();
        for conn in conns {
            transport::spawn_dialer(settings.router.clone(), conn, ctx.clone(), core.clone());
        }
        Ok(Proxy { core, ctx, bus_addr })
    }

    pub fn bus(&self) -> &Arc<LocalBus> {
        &self.core.bus
    }

    pub fn local_bus_addr(&self) -> Option<SocketAddr> {
        self.bus_addr
    }

    pub fn context(&self) -> &LinkContext {
        &self.ctx
    }

    /// Publishes `data` on the local bus under a configured topic.
    pub fn publish(&self, topic: &str, data: impl Into<Bytes>) {
        let msg_type = self
            .core
            .topics
            .iter()
            .find(|t| t.cfg.topic_name == topic)
            .map_or_else(String::new, |t| t.cfg.topic_type.clone());
        self.core.bus.publish(BusMessage::local(topic, msg_type, data));
    }

    /// Global name of a configured topic.
    pub fn topic_name(&self, topic: &str) -> Option<GdpName> {
        self.core.topics.iter().find(|t| t.cfg.topic_name == topic).map(|t| t.name)
    }

    pub fn connection_count(&self) -> usize {
        self.core.links.lock().len()
    }

    pub fn stats(&self) -> ProxyStats {
        let c = &self.core.counters;
        let get = |a: &AtomicU64| a.load(Ordering::Relaxed);
        ProxyStats {
            ingress: get(&c.ingress),
            queue_overflow: self.core.topics.iter().filter_map(|t| t.queue.as_ref()).map(|q| q.overflow_count()).sum(),
            sent: get(&c.sent),
            dropped_no_key: get(&c.dropped_no_key),
            dropped_disconnected: get(&c.dropped_disconnected),
            received: get(&c.received),
            delivered: get(&c.delivered),
            dropped_tampered: get(&c.dropped_tampered),
            dropped_type: get(&c.dropped_type),
            dropped_unknown: get(&c.dropped_unknown),
            dropped_malformed: get(&c.dropped_malformed),
            control_sent: get(&c.control_sent),
        }
    }

    /// Builds the Data packet that would carry `msg` to the mesh.
    pub fn local_to_global(&self, msg: &BusMessage) -> Result<Packet, PublishError> {
        let topic = self
            .core
            .topics
            .iter()
            .find(|t| t.queue.is_some() && t.cfg.topic_name == msg.topic)
            .ok_or_else(|| PublishError::NotPublished(msg.topic.clone()))?;
        self.core.local_to_global(topic, msg)
    }

    /// Unpacks a Data packet into the message it would deliver locally.
    pub fn global_to_local(&self, pkt: &Packet) -> Result<BusMessage, DeliveryError> {
        self.core.global_to_local(pkt)
    }

    pub fn shutdown(&self) {
        self.ctx.shutdown.cancel();
    }
}

impl Core {
    fn spawn_publisher(&self, topic: Arc<Topic>, ctx: &LinkContext) {
        let queue = topic.queue.clone().expect("publish topic has a queue");
        let mut rx = self.bus.subscribe(&topic.cfg.topic_name);
        let core = self.me.upgrade().expect("core alive during start");
        let stop = ctx.shutdown.clone();
        let q = queue.clone();
        let ingress = core.clone();
        let topic_name = topic.cfg.topic_name.clone();
        tokio::spawn(async move {
            loop {
                let m = tokio::select! {
                    m = rx.recv() => m,
                    _ = stop.cancelled() => break,
                };
                match m {
                    Ok(m) if m.origin == Origin::Mesh => {}
                    Ok(m) => {
                        ingress.counters.ingress.fetch_add(1, Ordering::Relaxed);
                        q.push(m);
                    }
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        warn!(topic = %topic_name, missed = n, "local bus overran the proxy");
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                }
            }
        });
        let stop = ctx.shutdown.clone();
        tokio::spawn(async move {
            loop {
                let m = tokio::select! {
                    m = queue.pop() => m,
                    _ = stop.cancelled() => break,
                };
                let pkt = match core.local_to_global(&topic, &m) {
                    Ok(p) => p,
                    Err(_) => {
                        core.counters.dropped_no_key.fetch_add(1, Ordering::Relaxed);
                        continue;
                    }
                };
                let link = topic.conn.and_then(|c| core.links.lock().get(&c).cloned());
                let frame = pkt.frame().expect("ttl and size checked");
                match link {
                    Some(l) if l.send_wait(frame).await.is_ok() => {
                        core.counters.sent.fetch_add(1, Ordering::Relaxed);
                    }
                    _ => {
                        core.counters.dropped_disconnected.fetch_add(1, Ordering::Relaxed);
                    }
                }
            }
        });
    }

    fn local_to_global(&self, topic: &Topic, msg: &BusMessage) -> Result<Packet, PublishError> {
        let json = UnifiedMessage::new(topic.cfg.topic_name.clone(), topic.cfg.topic_type.clone(), msg.timestamp_ns, &msg.data)
            .to_json();
        let mut h = PacketHeader::new(PacketType::Data, topic.name, topic.name, self.ttl);
        match self.mode {
            PayloadMode::Plain => Ok(Packet::new(h, json)),
            PayloadMode::Sealed => {
                let key = topic.key.as_ref().ok_or_else(|| PublishError::MissingKey(topic.cfg.topic_name.clone()))?;
                h.flags |= FLAG_SEALED;
                let env = crypto::seal(&json, key, &self.identity_key, &h.covered_bytes());
                Ok(Packet::new(h, env.into_bytes()))
            }
        }
    }

    fn global_to_local(&self, pkt: &Packet) -> Result<BusMessage, DeliveryError> {
        let topic = self.by_name.get(&pkt.header.destination).ok_or(DeliveryError::UnknownTopic)?;
        let json = match (self.mode, pkt.header.is_sealed()) {
            (PayloadMode::Sealed, true) => {
                let key = topic.key.as_ref().ok_or(DeliveryError::MissingKey)?;
                let env = Envelope::parse(pkt.payload.clone())?;
                Bytes::from(crypto::open(&env, key, &topic.cert, &pkt.header.covered_bytes())?)
            }
            (PayloadMode::Plain, false) => pkt.payload.clone(),
            _ => return Err(DeliveryError::SealingMismatch),
        };
        let m = UnifiedMessage::from_json(&json).map_err(|e| DeliveryError::Malformed(e.to_string()))?;
        if m.msg_type != topic.cfg.topic_type {
            return Err(DeliveryError::TypeMismatch { expected: topic.cfg.topic_type.clone(), got: m.msg_type });
        }
        let data = m.decode_data().map_err(|e| DeliveryError::Malformed(e.to_string()))?;
        Ok(BusMessage {
            topic: topic.cfg.topic_name.clone(),
            msg_type: m.msg_type,
            timestamp_ns: m.timestamp_ns,
            data: data.into(),
            origin: Origin::Mesh,
        })
    }

    fn deliver(&self, pkt: Packet) {
        let c = &self.counters;
        c.received.fetch_add(1, Ordering::Relaxed);
        match self.global_to_local(&pkt) {
            Ok(msg) => {
                c.delivered.fetch_add(1, Ordering::Relaxed);
                self.bus.publish(msg);
            }
            Err(e) => {
                let counter = match &e {
                    DeliveryError::Crypto(CryptoError::Integrity | CryptoError::Authenticity) => &c.dropped_tampered,
                    DeliveryError::TypeMismatch { .. } => &c.dropped_type,
                    DeliveryError::UnknownTopic => &c.dropped_unknown,
                    DeliveryError::MissingKey => &c.dropped_no_key,
                    _ => &c.dropped_malformed,
                };
                counter.fetch_add(1, Ordering::Relaxed);
                warn!(name = %pkt.header.destination.short(), error = %e, "dropping mesh message");
            }
        }
    }
}

impl Endpoint for Core {
    fn on_open(&self, link: Link) {
        let conn = link.id;
        for t in self.topics.iter().filter(|t| t.conn == Some(conn)) {
            if let Some((kind, src, dst, proof)) = &t.control {
                let h = PacketHeader::new(*kind, *src, *dst, self.ttl);
                let frame = Frame { header: h.encode(proof.len()), payload: proof.clone() };
                if link.send(frame).is_ok() {
                    self.counters.control_sent.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        self.links.lock().insert(conn, link);
    }

    fn on_packet(&self, _conn: ConnectionId, pkt: Packet) {
        if pkt.header.ptype == PacketType::Data {
            self.deliver(pkt);
        }
    }

    fn on_close(&self, conn: ConnectionId) {
        self.links.lock().remove(&conn);
    }
}
