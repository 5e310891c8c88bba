//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use sgc_core::crypto::{Certificate, KeyPair, SymmetricKey, TrustAnchor};
use sgc_core::name::GdpName;
use sgc_core::packet::{Packet, PacketType};
use sgc_core::rib::ConnectionId;
use sgc_core::router::{Router, RouterSettings};
use sgc_core::transport::{self, Endpoint, Link, LinkContext, PeerConfig};
use tokio::sync::mpsc;

pub struct Fixtures {
    pub anchor_key: KeyPair,
    pub anchor: TrustAnchor,
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

pub fn name(tag: u8) -> GdpName {
    GdpName::from_bytes([tag; 32])
}

pub fn advert(n: GdpName, ttl: u8) -> Packet {
    let f = fixtures();
    Packet::advertisement(n, f.alice_cert.clone(), &f.alice, ttl)
}

pub fn subscribe(n: GdpName) -> Packet {
    let f = fixtures();
    Packet::subscribe(GdpName::from_bytes(f.bob_cert.fingerprint()), n, f.bob_cert.clone(), &f.bob, 32)
}

pub fn data(n: GdpName, payload: Vec<u8>) -> Packet {
    let h = sgc_core::packet::PacketHeader::new(PacketType::Data, n, n, 32);
    Packet::new(h, payload)
}

pub async fn router(peers: &[SocketAddr]) -> Router {
    let mut s = RouterSettings::new(fixtures().anchor.clone());
    s.peers = peers.iter().map(|a| PeerConfig::tcp(a.to_string())).collect();
    Router::start(s, LinkContext::new()).await.unwrap()
}

pub async fn router_on(addr: &str, peers: &[SocketAddr]) -> Router {
    let mut s = RouterSettings::new(fixtures().anchor.clone());
    s.listen_tcp = Some(addr.to_string());
    s.peers = peers.iter().map(|a| PeerConfig::tcp(a.to_string())).collect();
    Router::start(s, LinkContext::new()).await.unwrap()
}

/// Polls `cond` every 10 ms until it holds or `limit` passes.
pub async fn eventually(limit: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let start = Instant::now();
    while start.elapsed() < limit {
        if cond() {
            return true;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    cond()
}

/// Waits until every router has `n` connections.
pub async fn settle(routers: &[&Router], n: usize) {
    assert!(
        eventually(Duration::from_secs(5), || routers.iter().all(|r| r.connection_count() >= n)).await,
        "routers did not connect"
    );
}

struct Sink {
    link: Mutex<Option<Link>>,
    tx: mpsc::UnboundedSender<Packet>,
}

impl Endpoint for Sink {
    fn on_open(&self, link: Link) {
        *self.link.lock() = Some(link);
    }
    fn on_packet(&self, _: ConnectionId, pkt: Packet) {
        let _ = self.tx.send(pkt);
    }
    fn on_close(&self, _: ConnectionId) {
        *self.link.lock() = None;
    }
}

/// A bare client connection standing in for a proxy.
pub struct MockClient {
    sink: Arc<Sink>,
    rx: tokio::sync::Mutex<mpsc::UnboundedReceiver<Packet>>,
    pub ctx: LinkContext,
}

impl MockClient {
    pub async fn connect(addr: SocketAddr) -> MockClient {
        let (tx, rx) = mpsc::unbounded_channel();
        let sink = Arc::new(Sink { link: Mutex::new(None), tx });
        let ctx = LinkContext::new();
        transport::spawn_dialer(PeerConfig::tcp(addr.to_string()), ctx.next_id(), ctx.clone(), sink.clone());
        assert!(eventually(Duration::from_secs(5), || sink.link.lock().is_some()).await);
        MockClient { sink, rx: tokio::sync::Mutex::new(rx), ctx }
    }

    pub async fn send(&self, pkt: Packet) {
        let link = self.sink.link.lock().clone().expect("connected");
        link.send_wait(pkt.frame().unwrap()).await.unwrap();
    }

    /// Next packet of type `ptype`, skipping others.
    pub async fn recv(&self, ptype: PacketType, limit: Duration) -> Option<Packet> {
        let mut rx = self.rx.lock().await;
        let deadline = tokio::time::Instant::now() + limit;
        loop {
            match tokio::time::timeout_at(deadline, rx.recv()).await {
                Ok(Some(p)) if p.header.ptype == ptype => return Some(p),
                Ok(Some(_)) => continue,
                _ => return None,
            }
        }
    }

    /// Drains packets of type `ptype` that arrive within `window`.
    pub async fn collect(&self, ptype: PacketType, window: Duration) -> Vec<Packet> {
        let mut out = Vec::new();
        let deadline = Instant::now() + window;
        while let Some(p) = self.recv(ptype, deadline.saturating_duration_since(Instant::now())).await {
            out.push(p);
        }
        out
    }

    pub fn close(&self) {
        self.ctx.shutdown.cancel();
    }
}

impl Drop for MockClient {
    fn drop(&mut self) {
        self.ctx.shutdown.cancel();
    }
}

pub fn keystore() -> Arc<sgc_core::keystore::KeyStore> {
    Arc::new(sgc_core::keystore::KeyStore::open(fixture_dir()))
}

/// Publisher topic owned by alice, sealed with the camera key.
pub fn pub_topic(topic: &str) -> sgc_core::proxy::TopicConfig {
    sgc_core::proxy::TopicConfig::new(topic, "sensor_msgs/CompressedImage", sgc_core::proxy::Action::Publish).key("camera")
}

/// The matching subscriber topic, for a proxy whose identity is bob.
pub fn sub_topic(topic: &str) -> sgc_core::proxy::TopicConfig {
    sgc_core::proxy::TopicConfig::new(topic, "sensor_msgs/CompressedImage", sgc_core::proxy::Action::Subscribe)
        .key("camera")
        .cert("alice")
}

pub async fn proxy_with(
    router: SocketAddr,
    identity: &str,
    topics: Vec<sgc_core::proxy::TopicConfig>,
    mode: sgc_core::transport::TunnelMode,
    ctx: LinkContext,
) -> sgc_core::proxy::Proxy {
    let mut s = sgc_core::proxy::ProxySettings::new(PeerConfig::tcp(router.to_string()).with_mode(mode), identity, keystore());
    s.topics = topics;
    sgc_core::proxy::Proxy::start(s, ctx).await.unwrap()
}

pub async fn proxy(router: SocketAddr, identity: &str, topics: Vec<sgc_core::proxy::TopicConfig>) -> sgc_core::proxy::Proxy {
    proxy_with(router, identity, topics, sgc_core::transport::TunnelMode::Shared, LinkContext::new()).await
}

#[derive(Default)]
struct Capture {
    links: Mutex<Vec<Link>>,
    packets: Mutex<Vec<Packet>>,
}

impl Endpoint for Capture {
    fn on_open(&self, link: Link) {
        self.links.lock().push(link);
    }
    fn on_packet(&self, _: ConnectionId, pkt: Packet) {
        self.packets.lock().push(pkt);
    }
    fn on_close(&self, _: ConnectionId) {}
}

/// A listener that records everything proxies send it and can inject packets.
pub struct FakeRouter {
    cap: Arc<Capture>,
    ctx: LinkContext,
    pub addr: SocketAddr,
}

impl FakeRouter {
    pub async fn start() -> FakeRouter {
        let cap = Arc::new(Capture::default());
        let ctx = LinkContext::new();
        let addr = transport::listen_tcp("127.0.0.1:0", ctx.clone(), cap.clone()).await.unwrap();
        FakeRouter { cap, ctx, addr }
    }

    pub fn connections(&self) -> usize {
        self.cap.links.lock().len()
    }

    pub fn packets(&self, ptype: PacketType) -> Vec<Packet> {
        self.cap.packets.lock().iter().filter(|p| p.header.ptype == ptype).cloned().collect()
    }

    pub async fn inject(&self, pkt: Packet) {
        let link = self.cap.links.lock()[0].clone();
        link.send_wait(pkt.frame().unwrap()).await.unwrap();
    }
}

impl Drop for FakeRouter {
    fn drop(&mut self) {
        self.ctx.shutdown.cancel();
    }
}

/// Records the header of every frame a node sends.
#[derive(Default)]
pub struct Tap {
    pub headers: Mutex<Vec<(PacketType, GdpName, GdpName)>>,
}

impl transport::LinkShaper for Tap {
    fn on_send(&self, _: &transport::LinkMeta, frame: &sgc_core::packet::Frame) -> transport::Verdict {
        let (h, _) = sgc_core::packet::PacketHeader::decode(&frame.header).unwrap();
        self.headers.lock().push((h.ptype, h.source, h.destination));
        transport::Verdict::Deliver
    }
}

/// Client on one router, server on another, with alice and bob as
/// identities and the camera key for bench topics.
pub fn reference_topology() -> sgc_core::testbed::Topology {
    sgc_core::testbed::Topology::reference(keystore(), fixtures().anchor.clone(), "alice", "bob", "camera")
}
