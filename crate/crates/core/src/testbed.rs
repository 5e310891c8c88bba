//! In-process multi-node harness and benchmarks.
//!
//! A [`Topology`] is launched on loopback by [`run_topology`]; the returned
//! [`Testbed`] can inject messages, kill and restart nodes, and read stats.
//! Link impairment lives in the transport's send hook, never in the router.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::Bytes;
use dashmap::DashMap;
use parking_lot::{Mutex, RwLock};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;
use thiserror::Error;
use tokio::sync::{broadcast, Notify};
use tracing::{info, warn};

use crate::config::{BenchSpec, LinkSpec, TopoProxy, TopoRouter, TopologyFile};
use crate::crypto::{sha256, TrustAnchor};
use crate::keystore::{KeyStore, KeyStoreError};
use crate::name::GdpName;
use crate::packet::{ControlProof, Frame, Packet, PacketType};
use crate::proxy::{
    Action, BusMessage, Origin, PayloadMode, Proxy, ProxyError, ProxySettings, ProxyStats, TopicConfig, Visibility,
};
use crate::rib::ConnectionId;
use crate::router::{Router, RouterEvent, RouterSettings, StatsSnapshot};
use crate::transport::{self, Endpoint, Link, LinkContext, LinkMeta, LinkShaper, PeerConfig, Transport, TunnelMode, Verdict};

/// Request topic of the echo benchmark, published by the bench client.
pub const ECHO_REQUEST: &str = "/sgc_bench/request";
/// Reply topic, published by the bench server as a short string.
pub const ECHO_REPLY: &str = "/sgc_bench/reply";
/// Topic streamed from client to server by the throughput benchmark.
pub const STREAM: &str = "/sgc_bench/stream";

pub const RTT_TIMEOUT: Duration = Duration::from_secs(5);
/// Extra delay a lost TCP segment costs: the stream retransmits instead of
/// losing the message.
pub const RETRANSMIT_PENALTY: Duration = Duration::from_millis(10);
const READY_TIMEOUT: Duration = Duration::from_secs(10);
const THROUGHPUT_WINDOW: u64 = 128;
const RIB_SAMPLES: usize = 100;
const STARTUP_SAMPLES: usize = 5;
/// Publishing interval of the stream a startup probe waits on. Sealing one
/// message costs most of a millisecond, so a faster feed starves the probe.
const FEED_INTERVAL: Duration = Duration::from_millis(2);

#[derive(Debug, Error)]
pub enum TestbedError {
    #[error("invalid topology: {0}")]
    Invalid(String),
    #[error("node {node}: cannot bind: {source}")]
    Bind { node: String, source: std::io::Error },
    #[error("node {node}: {source}")]
    Proxy { node: String, source: ProxyError },
    #[error(transparent)]
    Keys(#[from] KeyStoreError),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("node `{0}` is not running")]
    NotRunning(String),
    #[error("topology has no bench client/server")]
    NoBench,
    #[error("{0} not ready within {1:?}")]
    NotReady(String, Duration),
}

/// Everything needed to launch a set of nodes.
#[derive(Clone)]
pub struct Topology {
    pub routers: Vec<TopoRouter>,
    pub proxies: Vec<TopoProxy>,
    pub links: Vec<LinkSpec>,
    pub bench: Option<BenchSpec>,
    pub keys: Arc<KeyStore>,
    pub anchor: TrustAnchor,
    pub payload_mode: PayloadMode,
}

impl Topology {
    pub fn new(keys: Arc<KeyStore>, anchor: TrustAnchor) -> Self {
        Topology {
            routers: Vec::new(),
            proxies: Vec::new(),
            links: Vec::new(),
            bench: None,
            keys,
            anchor,
            payload_mode: PayloadMode::Sealed,
        }
    }

    pub fn from_file(file: &TopologyFile) -> Result<Self, TestbedError> {
        let mut t = Topology::new(file.keys.store(), file.keys.anchor()?);
        t.routers = file.routers.clone();
        t.proxies = file.proxies.clone();
        t.links = file.links.clone();
        t.bench = file.bench.clone();
        Ok(t)
    }

    /// Two routers, a client proxy on the first and a server proxy on the
    /// second, set up for the benchmarks.
    pub fn reference(keys: Arc<KeyStore>, anchor: TrustAnchor, client: &str, server: &str, key_ref: &str) -> Self {
        let mut t = Topology::new(keys, anchor);
        t.add_router("r1", Transport::Tcp).add_router("r2", Transport::Tcp).link("r1", "r2");
        t.add_proxy("client", "r1", client, Vec::new());
        t.add_proxy("server", "r2", server, Vec::new());
        t.bench = Some(BenchSpec { client: "client".into(), server: "server".into(), key_ref: key_ref.into() });
        t
    }

    /// `n` routers where router `i` dials router `i - 1`.
    pub fn chain(keys: Arc<KeyStore>, anchor: TrustAnchor, n: usize) -> Self {
        let mut t = Topology::new(keys, anchor);
        for i in 0..n {
            t.add_router(&format!("r{i}"), Transport::Tcp);
            if i > 0 {
                t.link(&format!("r{}", i - 1), &format!("r{i}"));
            }
        }
        t
    }

    pub fn add_router(&mut self, id: &str, transport: Transport) -> &mut Self {
        self.routers.push(TopoRouter { id: id.into(), transport, ttl_default: crate::router::DEFAULT_TTL });
        self
    }

    /// Adds a link where `b` dials `a`.
    pub fn link(&mut self, a: &str, b: &str) -> &mut Self {
        self.impaired_link(a, b, 0.0, 0)
    }

    pub fn impaired_link(&mut self, a: &str, b: &str, loss: f64, delay_ms: u64) -> &mut Self {
        self.links.push(LinkSpec { a: a.into(), b: b.into(), loss, delay_ms });
        self
    }

    pub fn add_proxy(&mut self, id: &str, router: &str, identity: &str, topics: Vec<TopicConfig>) -> &mut Self {
        self.proxies.push(TopoProxy { id: id.into(), router: router.into(), identity: identity.into(), mode: TunnelMode::Shared, topics });
        self
    }

    pub fn with_payload(mut self, mode: PayloadMode) -> Self {
        self.payload_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), TestbedError> {
        let bad = |m: String| Err(TestbedError::Invalid(m));
        let mut ids = HashSet::new();
        for id in self.routers.iter().map(|r| &r.id).chain(self.proxies.iter().map(|p| &p.id)) {
            if !ids.insert(id.as_str()) {
                return bad(format!("duplicate node id `{id}`"));
            }
        }
        let routers: HashSet<&str> = self.routers.iter().map(|r| r.id.as_str()).collect();
        for l in &self.links {
            for end in [&l.a, &l.b] {
                if !routers.contains(end.as_str()) {
                    return bad(format!("link {}-{} references unknown router `{end}`", l.a, l.b));
                }
            }
            if l.a == l.b {
                return bad(format!("link {}-{} joins a router to itself", l.a, l.b));
            }
            if !(0.0..=1.0).contains(&l.loss) {
                return bad(format!("link {}-{} loss {} outside [0, 1]", l.a, l.b, l.loss));
            }
        }
        for p in &self.proxies {
            if !routers.contains(p.router.as_str()) {
                return bad(format!("proxy `{}` attaches to unknown router `{}`", p.id, p.router));
            }
        }
        if let Some(b) = &self.bench {
            for end in [&b.client, &b.server] {
                if !self.proxies.iter().any(|p| &p.id == end) {
                    return bad(format!("bench references unknown proxy `{end}`"));
                }
            }
            if b.client == b.server {
                return bad("bench client and server are the same proxy".into());
            }
        }
        Ok(())
    }

    /// Proxy topics with the bench topics added to the client and server.
    fn proxy_topics(&self, p: &TopoProxy) -> Vec<TopicConfig> {
        let mut topics = p.topics.clone();
        let Some(b) = &self.bench else { return topics };
        let identity = |id: &str| self.proxies.iter().find(|p| p.id == id).map(|p| p.identity.clone()).unwrap_or_default();
        let topic = |name: &str, ty: &str, action| TopicConfig::new(name, ty, action).key(b.key_ref.clone());
        if p.id == b.client {
            topics.push(topic(ECHO_REQUEST, "sgc_bench/Bytes", Action::Publish));
            topics.push(topic(STREAM, "sgc_bench/Bytes", Action::Publish));
            topics.push(topic(ECHO_REPLY, "std_msgs/String", Action::Subscribe).cert(identity(&b.server)));
        } else if p.id == b.server {
            topics.push(topic(ECHO_REPLY, "std_msgs/String", Action::Publish));
            topics.push(topic(ECHO_REQUEST, "sgc_bench/Bytes", Action::Subscribe).cert(identity(&b.client)));
            topics.push(topic(STREAM, "sgc_bench/Bytes", Action::Subscribe).cert(identity(&b.client)));
        }
        topics
    }
}

struct Rule {
    transport: Transport,
    loss: f64,
    delay: Duration,
    rng: Mutex<StdRng>,
}

/// Per-link loss and delay, keyed by the listening address of the dialed
/// router. The dialer's local address is learned from its first send so the
/// accepting side's traffic is impaired too.
#[derive(Default)]
pub struct Impairments {
    by_listener: RwLock<HashMap<SocketAddr, Arc<Rule>>>,
    learned: DashMap<SocketAddr, Arc<Rule>>,
    dropped: AtomicU64,
    delayed: AtomicU64,
}

impl Impairments {
    fn add(&self, listener: SocketAddr, transport: Transport, loss: f64, delay: Duration, seed: u64) {
        let rule = Rule { transport, loss, delay, rng: Mutex::new(StdRng::seed_from_u64(seed)) };
        self.by_listener.write().insert(listener, Arc::new(rule));
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn delayed(&self) -> u64 {
        self.delayed.load(Ordering::Relaxed)
    }
}

impl LinkShaper for Impairments {
    fn on_send(&self, link: &LinkMeta, frame: &Frame) -> Verdict {
        let rule = if link.outbound {
            let rule = self.by_listener.read().get(&link.remote).cloned();
            if let Some(r) = &rule {
                self.learned.entry(link.local).or_insert_with(|| r.clone());
            }
            rule
        } else {
            self.learned.get(&link.remote).map(|r| r.clone())
        };
        let Some(rule) = rule else { return Verdict::Deliver };
        // Only data is subject to loss; control traffic is not retransmitted
        // by the protocol, so losing it would measure setup, not delivery.
        let lost = frame.ptype() == Some(PacketType::Data) && rule.loss > 0.0 && rule.rng.lock().gen_bool(rule.loss);
        let delay = match (lost, rule.transport) {
            (true, Transport::Udp) => {
                self.dropped.fetch_add(1, Ordering::Relaxed);
                return Verdict::Drop;
            }
            (true, Transport::Tcp) => rule.delay + RETRANSMIT_PENALTY,
            (false, _) => rule.delay,
        };
        if delay.is_zero() {
            Verdict::Deliver
        } else {
            self.delayed.fetch_add(1, Ordering::Relaxed);
            Verdict::Delay(delay)
        }
    }
}

struct RouterNode {
    spec: TopoRouter,
    router: Router,
    tcp: SocketAddr,
    udp: Option<SocketAddr>,
    peers: Vec<PeerConfig>,
    alive: bool,
}

struct ProxyNode {
    spec: TopoProxy,
    settings: ProxySettings,
    proxy: Proxy,
    alive: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TestbedStats {
    pub routers: BTreeMap<String, StatsSnapshot>,
    pub proxies: BTreeMap<String, ProxyStats>,
    pub impaired_dropped: u64,
    pub impaired_delayed: u64,
}

/// A running topology.
pub struct Testbed {
    topology: Topology,
    routers: Vec<RouterNode>,
    proxies: Vec<ProxyNode>,
    impair: Arc<Impairments>,
}

/// Launches every node of `t` on loopback and waits until published names
/// have reached every router.
pub async fn run_topology(t: Topology) -> Result<Testbed, TestbedError> {
    t.validate()?;
    let impair = Arc::new(Impairments::default());
    let mut routers = Vec::new();
    for spec in &t.routers {
        let mut s = RouterSettings::new(t.anchor.clone());
        s.listen_tcp = Some("127.0.0.1:0".into());
        s.listen_udp = (spec.transport == Transport::Udp).then(|| "127.0.0.1:0".into());
        s.ttl_default = spec.ttl_default;
        let ctx = LinkContext::new().with_shaper(impair.clone());
        let router = Router::start(s, ctx).await.map_err(|source| TestbedError::Bind { node: spec.id.clone(), source })?;
        let tcp = router.tcp_addr().expect("tcp listener configured");
        let udp = router.udp_addr();
        info!(node = %spec.id, %tcp, ?udp, "router up");
        routers.push(RouterNode { spec: spec.clone(), router, tcp, udp, peers: Vec::new(), alive: true });
    }
    let index: HashMap<String, usize> = routers.iter().enumerate().map(|(i, r)| (r.spec.id.clone(), i)).collect();
    let mut degree = vec![0usize; routers.len()];
    for (i, l) in t.links.iter().enumerate() {
        let (a, b) = (index[&l.a], index[&l.b]);
        let peer = match (routers[a].spec.transport, routers[a].udp) {
            (Transport::Udp, Some(udp)) => PeerConfig::udp(udp.to_string()),
            _ => PeerConfig::tcp(routers[a].tcp.to_string()),
        };
        let listener: SocketAddr = peer.address.parse().expect("loopback address");
        impair.add(listener, peer.transport, l.loss, Duration::from_millis(l.delay_ms), i as u64 + 1);
        routers[b].router.connect_peer(peer.clone());
        routers[b].peers.push(peer);
        degree[a] += 1;
        degree[b] += 1;
    }
    let linked = wait_for(READY_TIMEOUT, || routers.iter().zip(&degree).all(|(r, d)| r.router.connection_count() >= *d)).await;
    if !linked {
        return Err(TestbedError::NotReady("router links".into(), READY_TIMEOUT));
    }

    let mut proxies = Vec::new();
    for spec in &t.proxies {
        let r = &routers[index[&spec.router]];
        let mut s = ProxySettings::new(PeerConfig::tcp(r.tcp.to_string()).with_mode(spec.mode), spec.identity.clone(), t.keys.clone());
        s.topics = t.proxy_topics(spec);
        s.payload_mode = t.payload_mode;
        let proxy = Proxy::start(s.clone(), LinkContext::new())
            .await
            .map_err(|source| TestbedError::Proxy { node: spec.id.clone(), source })?;
        proxies.push(ProxyNode { spec: spec.clone(), settings: s, proxy, alive: true });
    }
    let tb = Testbed { topology: t, routers, proxies, impair };
    tb.wait_converged(READY_TIMEOUT).await?;
    Ok(tb)
}

async fn wait_for(limit: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let start = Instant::now();
    loop {
        if cond() {
            return true;
        }
        if start.elapsed() >= limit {
            return false;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

fn expected_connections(s: &ProxySettings) -> usize {
    let public = s.topics.iter().filter(|t| t.visibility == Visibility::Public).count();
    match (public, s.router.mode) {
        (0, _) => 0,
        (_, TunnelMode::Shared) => 1,
        (n, TunnelMode::Dedicated) => n,
    }
}

impl Testbed {
    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn impairments(&self) -> &Arc<Impairments> {
        &self.impair
    }

    pub fn router(&self, id: &str) -> Option<&Router> {
        self.routers.iter().find(|r| r.spec.id == id && r.alive).map(|r| &r.router)
    }

    pub fn proxy(&self, id: &str) -> Option<&Proxy> {
        self.proxies.iter().find(|p| p.spec.id == id && p.alive).map(|p| &p.proxy)
    }

    /// Waits until proxies are connected and every public published name is
    /// in every running router's table.
    pub async fn wait_converged(&self, limit: Duration) -> Result<(), TestbedError> {
        let connected = wait_for(limit, || {
            self.proxies.iter().filter(|p| p.alive).all(|p| p.proxy.connection_count() >= expected_connections(&p.settings))
        })
        .await;
        if !connected {
            return Err(TestbedError::NotReady("proxy connections".into(), limit));
        }
        let names: Vec<GdpName> = self
            .proxies
            .iter()
            .filter(|p| p.alive)
            .flat_map(|p| {
                p.settings
                    .topics
                    .iter()
                    .filter(|t| t.action == Action::Publish && t.visibility == Visibility::Public)
                    .filter_map(|t| p.proxy.topic_name(&t.topic_name))
                    .collect::<Vec<_>>()
            })
            .collect();
        let spread = wait_for(limit, || {
            self.routers.iter().filter(|r| r.alive).all(|r| names.iter().all(|n| r.router.rib().lookup(n).is_some()))
        })
        .await;
        if !spread {
            warn!("advertisements did not reach every router");
        }
        Ok(())
    }

    /// Publishes `data` on a proxy's local bus.
    pub fn inject(&self, proxy: &str, topic: &str, data: impl Into<Bytes>) -> Result<(), TestbedError> {
        let p = self.proxy_node(proxy)?;
        if !p.alive {
            return Err(TestbedError::NotRunning(proxy.into()));
        }
        p.proxy.publish(topic, data);
        Ok(())
    }

    fn proxy_node(&self, id: &str) -> Result<&ProxyNode, TestbedError> {
        self.proxies.iter().find(|p| p.spec.id == id).ok_or_else(|| TestbedError::UnknownNode(id.into()))
    }

    /// Stops a router or proxy. Its neighbours keep running.
    pub async fn kill(&mut self, id: &str) -> Result<(), TestbedError> {
        if let Some(r) = self.routers.iter_mut().find(|r| r.spec.id == id) {
            r.router.shutdown();
            r.alive = false;
        } else if let Some(p) = self.proxies.iter_mut().find(|p| p.spec.id == id) {
            p.proxy.shutdown();
            p.alive = false;
        } else {
            return Err(TestbedError::UnknownNode(id.into()));
        }
        info!(node = %id, "killed");
        tokio::time::sleep(Duration::from_millis(20)).await;
        Ok(())
    }

    /// Starts a killed node again on its old addresses.
    pub async fn restart(&mut self, id: &str) -> Result<(), TestbedError> {
        if let Some(r) = self.routers.iter_mut().find(|r| r.spec.id == id) {
            if r.alive {
                r.router.shutdown();
            }
            let mut s = RouterSettings::new(self.topology.anchor.clone());
            s.listen_tcp = Some(r.tcp.to_string());
            s.listen_udp = r.udp.map(|a| a.to_string());
            s.ttl_default = r.spec.ttl_default;
            s.peers = r.peers.clone();
            let ctx = LinkContext::new().with_shaper(self.impair.clone());
            r.router = Router::start(s, ctx).await.map_err(|source| TestbedError::Bind { node: id.into(), source })?;
            r.alive = true;
        } else if let Some(p) = self.proxies.iter_mut().find(|p| p.spec.id == id) {
            if p.alive {
                p.proxy.shutdown();
            }
            p.proxy = Proxy::start(p.settings.clone(), LinkContext::new())
                .await
                .map_err(|source| TestbedError::Proxy { node: id.into(), source })?;
            p.alive = true;
        } else {
            return Err(TestbedError::UnknownNode(id.into()));
        }
        info!(node = %id, "restarted");
        Ok(())
    }

    pub fn stats(&self) -> TestbedStats {
        TestbedStats {
            routers: self.routers.iter().filter(|r| r.alive).map(|r| (r.spec.id.clone(), r.router.stats())).collect(),
            proxies: self.proxies.iter().filter(|p| p.alive).map(|p| (p.spec.id.clone(), p.proxy.stats())).collect(),
            impaired_dropped: self.impair.dropped(),
            impaired_delayed: self.impair.delayed(),
        }
    }

    pub fn shutdown(&self) {
        for r in &self.routers {
            r.router.shutdown();
        }
        for p in &self.proxies {
            p.proxy.shutdown();
        }
    }

    fn bench_pair(&self) -> Result<(&Proxy, &Proxy, &ProxyNode), TestbedError> {
        let b = self.topology.bench.as_ref().ok_or(TestbedError::NoBench)?;
        let client = self.proxy(&b.client).ok_or_else(|| TestbedError::NotRunning(b.client.clone()))?;
        let server = self.proxy(&b.server).ok_or_else(|| TestbedError::NotRunning(b.server.clone()))?;
        Ok((client, server, self.proxy_node(&b.server)?))
    }
}

impl Drop for Testbed {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub scenario: String,
    pub payload: PayloadMode,
    pub message_size: usize,
    /// Messages offered.
    pub count: u64,
    /// Distinct messages received.
    pub delivered: u64,
    pub loss: u64,
    pub duplicates: u64,
    pub duration_s: f64,
    pub rtt_p50: Option<f64>,
    pub rtt_p90: Option<f64>,
    pub rtt_p99: Option<f64>,
    pub rtt_mean: Option<f64>,
    /// Delivered messages per second.
    pub throughput: f64,
    /// Messages per second offered by a paced run.
    pub offered_rate: Option<f64>,
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (p * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Message `seq` padded to `size` bytes; the sequence number occupies the
/// first (up to eight) bytes.
fn numbered(seq: u64, size: usize) -> Vec<u8> {
    let mut v = vec![0xa5u8; size];
    let n = size.min(8);
    v[..n].copy_from_slice(&seq.to_le_bytes()[..n]);
    v
}

fn sequence_of(data: &[u8]) -> u64 {
    let mut b = [0u8; 8];
    let n = data.len().min(8);
    b[..n].copy_from_slice(&data[..n]);
    u64::from_le_bytes(b)
}

fn echo_text(request: &[u8]) -> String {
    format!("ack:{}", hex::encode(&request[..request.len().min(8)]))
}

async fn next_mesh(rx: &mut broadcast::Receiver<BusMessage>) -> Option<BusMessage> {
    loop {
        match rx.recv().await {
            Ok(m) if m.origin == Origin::Mesh => return Some(m),
            Ok(_) | Err(broadcast::error::RecvError::Lagged(_)) => continue,
            Err(broadcast::error::RecvError::Closed) => return None,
        }
    }
}

async fn exchange(
    client: &Proxy,
    replies: &mut broadcast::Receiver<BusMessage>,
    seq: u64,
    size: usize,
    timeout: Duration,
) -> Option<Duration> {
    let payload = numbered(seq, size);
    let want = echo_text(&payload);
    let sent = Instant::now();
    client.publish(ECHO_REQUEST, payload);
    let got = tokio::time::timeout(timeout, async {
        while let Some(m) = next_mesh(replies).await {
            if m.data == want.as_bytes() {
                return true;
            }
        }
        false
    })
    .await;
    matches!(got, Ok(true)).then(|| sent.elapsed())
}

/// Round trips of `count` requests of `size` bytes, one at a time; the server
/// answers each with a short string on the reply topic.
pub async fn bench_rtt(tb: &Testbed, size: usize, count: usize) -> Result<BenchReport, TestbedError> {
    let (client, server, _) = tb.bench_pair()?;
    let mut requests = server.bus().subscribe(ECHO_REQUEST);
    let echo = server.clone();
    let stop = tokio_util::sync::CancellationToken::new();
    let stop_echo = stop.clone();
    tokio::spawn(async move {
        loop {
            let m = tokio::select! {
                m = next_mesh(&mut requests) => m,
                _ = stop_echo.cancelled() => None,
            };
            let Some(m) = m else { break };
            echo.publish(ECHO_REPLY, echo_text(&m.data).into_bytes());
        }
    });
    let mut replies = client.bus().subscribe(ECHO_REPLY);

    let mut seq = 0u64;
    let warm = Instant::now();
    loop {
        seq += 1;
        if exchange(client, &mut replies, seq, size, Duration::from_millis(200)).await.is_some() {
            break;
        }
        if warm.elapsed() > READY_TIMEOUT {
            stop.cancel();
            return Err(TestbedError::NotReady("echo path".into(), READY_TIMEOUT));
        }
    }

    let mut rtts = Vec::with_capacity(count);
    let start = Instant::now();
    for _ in 0..count {
        seq += 1;
        if let Some(rtt) = exchange(client, &mut replies, seq, size, RTT_TIMEOUT).await {
            rtts.push(rtt.as_secs_f64());
        }
    }
    let duration = start.elapsed().as_secs_f64();
    stop.cancel();

    let delivered = rtts.len() as u64;
    let summary = mean(&rtts);
    rtts.sort_by(f64::total_cmp);
    Ok(BenchReport {
        scenario: "rtt".into(),
        payload: tb.topology.payload_mode,
        message_size: size,
        count: count as u64,
        delivered,
        loss: count as u64 - delivered,
        duplicates: 0,
        duration_s: duration,
        rtt_p50: percentile(&rtts, 0.50),
        rtt_p90: percentile(&rtts, 0.90),
        rtt_p99: percentile(&rtts, 0.99),
        rtt_mean: summary,
        throughput: if count == 0 || duration <= 0.0 { 0.0 } else { delivered as f64 / duration },
        offered_rate: None,
    })
}

#[derive(Default)]
struct Tally {
    counting: std::sync::atomic::AtomicBool,
    seen: Mutex<HashSet<u64>>,
    delivered: AtomicU64,
    duplicates: AtomicU64,
    last: Mutex<Option<Instant>>,
    progress: Notify,
}

/// Publishes `size`-byte messages from the client for `duration` as fast as
/// the pipeline drains them and counts distinct arrivals at the server. At
/// most a fixed window of messages is in flight so the publisher cannot
/// starve the pipeline it measures.
pub async fn bench_throughput(tb: &Testbed, size: usize, duration: Duration) -> Result<BenchReport, TestbedError> {
    throughput(tb, size, duration, None).await
}

/// Like [`bench_throughput`] but offers messages at a fixed `rate` per second.
pub async fn bench_throughput_paced(tb: &Testbed, size: usize, duration: Duration, rate: f64) -> Result<BenchReport, TestbedError> {
    throughput(tb, size, duration, Some(rate)).await
}

async fn throughput(tb: &Testbed, size: usize, duration: Duration, rate: Option<f64>) -> Result<BenchReport, TestbedError> {
    let (client, server, _) = tb.bench_pair()?;
    let base = 1u64 << 32;
    let tally = Arc::new(Tally::default());
    let mut rx = server.bus().subscribe(STREAM);
    let counter = tally.clone();
    let stop = tokio_util::sync::CancellationToken::new();
    let stop_tally = stop.clone();
    tokio::spawn(async move {
        loop {
            let m = tokio::select! {
                m = next_mesh(&mut rx) => m,
                _ = stop_tally.cancelled() => None,
            };
            let Some(m) = m else { break };
            let seq = sequence_of(&m.data);
            if !counter.counting.load(Ordering::Acquire) || (size >= 8 && seq < base) {
                continue; // warm-up
            }
            if size < 8 || counter.seen.lock().insert(seq) {
                counter.delivered.fetch_add(1, Ordering::Relaxed);
            } else {
                counter.duplicates.fetch_add(1, Ordering::Relaxed);
            }
            *counter.last.lock() = Some(Instant::now());
            counter.progress.notify_waiters();
        }
    });

    let warm = Instant::now();
    let mut probe_rx = server.bus().subscribe(STREAM);
    let mut n = 0;
    loop {
        n += 1;
        client.publish(STREAM, numbered(n, size));
        if let Ok(Some(_)) = tokio::time::timeout(Duration::from_millis(200), next_mesh(&mut probe_rx)).await {
            break;
        }
        if warm.elapsed() > READY_TIMEOUT {
            stop.cancel();
            return Err(TestbedError::NotReady("stream path".into(), READY_TIMEOUT));
        }
    }
    drop(probe_rx);
    // let stragglers from the warm-up land before counting starts
    tokio::time::sleep(Duration::from_millis(50)).await;
    tally.counting.store(true, Ordering::Release);

    let delivered = || tally.delivered.load(Ordering::Relaxed);
    let start = Instant::now();
    let mut sent = 0u64;
    let mut written_off = 0u64;
    let mut pace = rate.map(|r| {
        let mut t = tokio::time::interval(Duration::from_secs_f64(1.0 / r.max(1e-3)));
        t.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Burst);
        t
    });
    while start.elapsed() < duration {
        if let Some(t) = pace.as_mut() {
            t.tick().await;
        }
        if sent - written_off - delivered().min(sent) >= THROUGHPUT_WINDOW {
            let before = delivered();
            let woke = tokio::time::timeout(Duration::from_millis(200), tally.progress.notified()).await;
            if woke.is_err() && delivered() == before {
                // nothing moved: what is in flight is lost
                written_off = sent - delivered().min(sent);
            }
            continue;
        }
        client.publish(STREAM, numbered(base + sent, size));
        sent += 1;
        tokio::task::yield_now().await;
    }
    let mut quiet = Instant::now();
    let mut last_seen = delivered();
    while delivered() < sent && quiet.elapsed() < Duration::from_millis(500) {
        tokio::time::sleep(Duration::from_millis(5)).await;
        if delivered() != last_seen {
            last_seen = delivered();
            quiet = Instant::now();
        }
    }
    stop.cancel();
    let got = delivered();
    let end = tally.last.lock().unwrap_or(start);
    let secs = end.saturating_duration_since(start).as_secs_f64();
    Ok(BenchReport {
        scenario: "throughput".into(),
        payload: tb.topology.payload_mode,
        message_size: size,
        count: sent,
        delivered: got,
        loss: sent.saturating_sub(got),
        duplicates: tally.duplicates.load(Ordering::Relaxed),
        duration_s: secs,
        rtt_p50: None,
        rtt_p90: None,
        rtt_p99: None,
        rtt_mean: None,
        throughput: if secs > 0.0 { got as f64 / secs } else { 0.0 },
        offered_rate: rate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RibReport {
    pub scenario: String,
    pub records: usize,
    pub samples: usize,
    /// Seconds from sending an advertisement to its table entry existing.
    pub advertise_p50: f64,
    pub advertise_mean: f64,
    /// Seconds from sending a subscribe to the sink being registered.
    pub subscribe_p50: f64,
    pub subscribe_mean: f64,
    /// Seconds from starting a subscriber proxy to its first message.
    pub startup_to_first_message: f64,
}

struct Probe {
    link: Mutex<Option<Link>>,
}

impl Endpoint for Probe {
    fn on_open(&self, link: Link) {
        *self.link.lock() = Some(link);
    }
    fn on_packet(&self, _: ConnectionId, _: Packet) {}
    fn on_close(&self, _: ConnectionId) {
        *self.link.lock() = None;
    }
}

async fn probe(addr: SocketAddr, ctx: &LinkContext) -> Result<Link, TestbedError> {
    let p = Arc::new(Probe { link: Mutex::new(None) });
    transport::spawn_dialer(PeerConfig::tcp(addr.to_string()), ctx.next_id(), ctx.clone(), p.clone());
    if !wait_for(READY_TIMEOUT, || p.link.lock().is_some()).await {
        return Err(TestbedError::NotReady("probe connection".into(), READY_TIMEOUT));
    }
    let link = p.link.lock().clone().expect("link present");
    Ok(link)
}

async fn timed(events: &mut broadcast::Receiver<RouterEvent>, link: &Link, pkt: Packet, done: impl Fn(&RouterEvent) -> bool) -> Option<f64> {
    let frame = pkt.frame().ok()?;
    let t0 = Instant::now();
    link.send_wait(frame).await.ok()?;
    let seen = tokio::time::timeout(RTT_TIMEOUT, async {
        loop {
            match events.recv().await {
                Ok(e) if done(&e) => return true,
                Ok(_) | Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return false,
            }
        }
    })
    .await;
    matches!(seen, Ok(true)).then(|| t0.elapsed().as_secs_f64())
}

fn p50_and_mean(mut v: Vec<f64>) -> (f64, f64) {
    v.sort_by(f64::total_cmp);
    (percentile(&v, 0.5).unwrap_or(0.0), mean(&v).unwrap_or(0.0))
}

/// Times table operations on the server's router after preloading it with
/// `records` entries, then times a fresh subscriber proxy from start to its
/// first message.
pub async fn bench_rib(tb: &Testbed, records: usize) -> Result<RibReport, TestbedError> {
    let (client, _, server_node) = tb.bench_pair()?;
    let bench = tb.topology.bench.as_ref().ok_or(TestbedError::NoBench)?;
    let router = tb.router(&server_node.spec.router).ok_or_else(|| TestbedError::NotRunning(server_node.spec.router.clone()))?;
    let keys = &tb.topology.keys;
    let client_identity = &tb.proxy_node(&bench.client)?.spec.identity;
    let server_identity = &server_node.spec.identity;
    let cert = keys.certificate(client_identity)?;
    let kp = keys.keypair(client_identity)?;
    let sub_cert = keys.certificate(server_identity)?;
    let sub_kp = keys.keypair(server_identity)?;

    let proof = ControlProof::sign(PacketType::Advertisement, &GdpName::ZERO, &GdpName::ZERO, (*cert).clone(), &kp).encode();
    for i in 0..records {
        let name = GdpName::from_bytes(sha256(format!("preload/{i}").as_bytes()));
        router.preload(name, cert.clone(), proof.clone());
    }

    let run = rand::random::<u64>();
    let names: Vec<GdpName> =
        (0..RIB_SAMPLES).map(|i| GdpName::from_bytes(sha256(format!("probe/{run}/{i}").as_bytes()))).collect();
    let subscriber = GdpName::from_bytes(sub_cert.fingerprint());
    let adverts: Vec<Packet> = names.iter().map(|n| Packet::advertisement(*n, (*cert).clone(), &kp, 1)).collect();
    let subscribes: Vec<Packet> =
        names.iter().map(|n| Packet::subscribe(subscriber, *n, (*sub_cert).clone(), &sub_kp, 1)).collect();

    let ctx = LinkContext::new();
    let publisher = probe(router.tcp_addr().expect("tcp listener"), &ctx).await?;
    let subscriber_link = probe(router.tcp_addr().expect("tcp listener"), &ctx).await?;
    let mut events = router.events();
    let mut adv_t = Vec::new();
    for (n, pkt) in names.iter().zip(adverts) {
        let n = *n;
        adv_t.extend(timed(&mut events, &publisher, pkt, |e| matches!(e, RouterEvent::Advertisement { name, fresh: true, .. } if *name == n)).await);
    }
    let mut sub_t = Vec::new();
    for (n, pkt) in names.iter().zip(subscribes) {
        let n = *n;
        sub_t.extend(timed(&mut events, &subscriber_link, pkt, |e| matches!(e, RouterEvent::SinkAdded { name, .. } if *name == n)).await);
    }
    drop(events);
    ctx.shutdown.cancel();

    let mut startup = Vec::new();
    let stop = tokio_util::sync::CancellationToken::new();
    let feeder = {
        let client = client.clone();
        let stop = stop.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(FEED_INTERVAL);
            tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
            let mut n = 0u64;
            loop {
                tokio::select! {
                    _ = tick.tick() => {}
                    _ = stop.cancelled() => break,
                }
                n += 1;
                client.publish(STREAM, numbered(n, 64));
            }
        })
    };
    let mut s = server_node.settings.clone();
    s.topics = vec![TopicConfig::new(STREAM, "sgc_bench/Bytes", Action::Subscribe).key(bench.key_ref.clone()).cert(client_identity.clone())];
    for _ in 0..STARTUP_SAMPLES {
        let t0 = Instant::now();
        let p = Proxy::start(s.clone(), LinkContext::new())
            .await
            .map_err(|source| TestbedError::Proxy { node: "startup-probe".into(), source })?;
        let mut rx = p.bus().subscribe(STREAM);
        let first = tokio::time::timeout(RTT_TIMEOUT, next_mesh(&mut rx)).await;
        if let Ok(Some(_)) = first {
            startup.push(t0.elapsed().as_secs_f64());
        }
        p.shutdown();
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    stop.cancel();
    let _ = feeder.await;

    let samples = adv_t.len().min(sub_t.len());
    let (advertise_p50, advertise_mean) = p50_and_mean(adv_t);
    let (subscribe_p50, subscribe_mean) = p50_and_mean(sub_t);
    let (startup_to_first_message, _) = p50_and_mean(startup);
    Ok(RibReport {
        scenario: "rib".into(),
        records,
        samples,
        advertise_p50,
        advertise_mean,
        subscribe_p50,
        subscribe_mean,
        startup_to_first_message,
    })
}
