//! The router: keeps peer and proxy connections, verifies control packets
//! and forwards traffic according to its [`Rib`].
//!
//! Advertisements flood across router links, deduplicated per (name, nonce).
//! Subscribes walk the recorded upstream chain and register a sink at every
//! hop. Data follows the sinks. Routers never hold topic keys, so Data is
//! forwarded sealed and unverified.
//!
//! A router that dials a peer sends it a table-dump query (a RibQuery with
//! the zero destination) as its first packet. That marks the connection as
//! a router link on the accepting side and brings both tables in sync after
//! every (re)connect. Connections that never send one are treated as proxies.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::{Duration, Instant};

use bytes::Bytes;
use dashmap::DashMap;
use parking_lot::Mutex;
use serde::Serialize;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpListener;
use tokio::sync::broadcast;
use tracing::{debug, error, info, warn};

use crate::crypto::{Certificate, TrustAnchor};
use crate::name::GdpName;
use crate::packet::{ControlProof, Frame, Packet, PacketHeader, PacketType};
use crate::rib::{AddSinkOutcome, ConnectionId, InsertOutcome, NonceWindow, Rib};
use crate::transport::{self, Endpoint, Link, LinkContext, PeerConfig, SendError, TunnelMode};

pub const DEFAULT_TTL: u8 = 32;
pub const PENDING_TIMEOUT: Duration = Duration::from_secs(5);
/// Connection id used for packets that originate inside this router.
pub const LOCAL: ConnectionId = ConnectionId(0);
const QUERY_WINDOW: usize = 4096;
const EVENT_CAPACITY: usize = 65_536;

#[derive(Debug, Clone)]
pub struct RouterSettings {
    pub listen_tcp: Option<String>,
    pub listen_udp: Option<String>,
    /// Address of the line-oriented admin endpoint (`rib dump`, `stats`).
    pub admin: Option<String>,
    pub ttl_default: u8,
    pub peers: Vec<PeerConfig>,
    pub anchor: TrustAnchor,
}

impl RouterSettings {
    pub fn new(anchor: TrustAnchor) -> Self {
        RouterSettings {
            listen_tcp: Some("127.0.0.1:0".into()),
            listen_udp: None,
            admin: None,
            ttl_default: DEFAULT_TTL,
            peers: Vec::new(),
            anchor,
        }
    }
}

/// Router counters. All are monotonically non-decreasing.
#[derive(Debug, Default)]
pub struct RouterStats {
    pub packets_forwarded: AtomicU64,
    pub packets_dropped_ttl: AtomicU64,
    pub packets_dropped_verify: AtomicU64,
    pub packets_dropped_no_route: AtomicU64,
    pub packets_dropped_queue: AtomicU64,
    pub advertisements_fresh: AtomicU64,
    pub advertisements_duplicate: AtomicU64,
    pub subscribes_timed_out: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StatsSnapshot {
    pub packets_forwarded: u64,
    pub packets_dropped_ttl: u64,
    pub packets_dropped_verify: u64,
    pub packets_dropped_no_route: u64,
    pub packets_dropped_queue: u64,
    pub payload_copy_count: u64,
    pub advertisements_fresh: u64,
    pub advertisements_duplicate: u64,
    pub subscribes_timed_out: u64,
    pub connections: usize,
    pub rib_entries: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    Ttl,
    Verify,
    NoRoute,
    QueueFull,
    TooLarge,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RouterEvent {
    LinkUp { conn: ConnectionId, outbound: bool },
    LinkDown { conn: ConnectionId },
    /// An advertisement or table-dump response was received with `ttl`.
    Advertisement { name: GdpName, nonce: u64, ttl: u8, from: ConnectionId, fresh: bool },
    SinkAdded { name: GdpName, sink: ConnectionId },
    SubscribePending { name: GdpName },
    SubscribeTimeout { name: GdpName },
    Dropped { ptype: PacketType, reason: DropReason },
}

struct Peer {
    link: Link,
    is_router: AtomicBool,
}

struct Pending {
    from: ConnectionId,
    pkt: Packet,
    since: Instant,
}

struct Core {
    me: Weak<Core>,
    rib: Rib,
    anchor: TrustAnchor,
    ttl_default: u8,
    links: DashMap<ConnectionId, Peer>,
    pending: DashMap<GdpName, Vec<Pending>>,
    /// Last verified subscribe per name, replayed when the route changes.
    subscriptions: DashMap<GdpName, Packet>,
    queries: Mutex<NonceWindow>,
    stats: RouterStats,
    copies: Arc<AtomicU64>,
    events: broadcast::Sender<RouterEvent>,
}

/// A running router. Dropping the handle does not stop it; call
/// [`Router::shutdown`].
#[derive(Clone)]
pub struct Router {
    core: Arc<Core>,
    ctx: LinkContext,
    tcp_addr: Option<SocketAddr>,
    udp_addr: Option<SocketAddr>,
    admin_addr: Option<SocketAddr>,
}

impl Router {
    /// Binds the configured listeners and starts dialing peers.
    pub async fn start(settings: RouterSettings, ctx: LinkContext) -> std::io::Result<Router> {
        let (events, _) = broadcast::channel(EVENT_CAPACITY);
        let core = Arc::new_cyclic(|me| Core {
            me: me.clone(),
            rib: Rib::new(),
            anchor: settings.anchor,
            ttl_default: settings.ttl_default.max(1),
            links: DashMap::new(),
            pending: DashMap::new(),
            subscriptions: DashMap::new(),
            queries: Mutex::new(NonceWindow::new(QUERY_WINDOW)),
            stats: RouterStats::default(),
            copies: ctx.copies.clone(),
            events,
        });
        let endpoint: Arc<dyn Endpoint> = core.clone();
        let tcp_addr = match &settings.listen_tcp {
            Some(a) => Some(transport::listen_tcp(a, ctx.clone(), endpoint.clone()).await?),
            None => None,
        };
        let udp_addr = match &settings.listen_udp {
            Some(a) => Some(transport::listen_udp(a, ctx.clone(), endpoint.clone()).await?),
            None => None,
        };
        let mut router = Router { core, ctx, tcp_addr, udp_addr, admin_addr: None };
        if let Some(a) = &settings.admin {
            router.admin_addr = Some(router.serve_admin(a).await?);
        }
        for peer in settings.peers {
            router.connect_peer(peer);
        }
        Ok(router)
    }

    pub fn tcp_addr(&self) -> Option<SocketAddr> {
        self.tcp_addr
    }

    pub fn udp_addr(&self) -> Option<SocketAddr> {
        self.udp_addr
    }

    pub fn admin_addr(&self) -> Option<SocketAddr> {
        self.admin_addr
    }

    pub fn rib(&self) -> &Rib {
        &self.core.rib
    }

    pub fn context(&self) -> &LinkContext {
        &self.ctx
    }

    /// Keeps a connection to `cfg` alive, reconnecting with backoff.
    ///
    /// Router-to-router links always multiplex every name over one
    /// connection; a dedicated mode here is accepted and treated as shared.
    pub fn connect_peer(&self, cfg: PeerConfig) -> ConnectionId {
        if cfg.mode == TunnelMode::Dedicated {
            debug!(peer = %cfg.address, "router peers share one connection per peer");
        }
        let id = self.ctx.next_id();
        transport::spawn_dialer(cfg, id, self.ctx.clone(), self.core.clone());
        id
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.core.snapshot()
    }

    pub fn events(&self) -> broadcast::Receiver<RouterEvent> {
        self.core.events.subscribe()
    }

    pub fn connection_count(&self) -> usize {
        self.core.links.len()
    }

    /// Live connections, with whether each is a router link.
    pub fn connections(&self) -> Vec<(ConnectionId, bool)> {
        let mut v: Vec<_> = self
            .core
            .links
            .iter()
            .map(|p| (*p.key(), p.is_router.load(Ordering::Relaxed)))
            .collect();
        v.sort();
        v
    }

    /// Processes a packet as if it originated inside this router: it is
    /// recorded and sent on without a ttl decrement.
    pub fn originate(&self, pkt: Packet) {
        self.core.handle(LOCAL, pkt);
    }

    /// Records an already-verified advertisement without network traffic.
    pub fn preload(&self, name: GdpName, cert: Arc<Certificate>, proof: Bytes) -> InsertOutcome {
        self.core.rib.insert_advertisement(name, LOCAL, cert, proof, rand::random())
    }

    pub fn shutdown(&self) {
        self.ctx.shutdown.cancel();
    }

    pub fn is_shut_down(&self) -> bool {
        self.ctx.shutdown.is_cancelled()
    }

    async fn serve_admin(&self, addr: &str) -> std::io::Result<SocketAddr> {
        let listener = TcpListener::bind(addr).await?;
        let local = listener.local_addr()?;
        let core = self.core.clone();
        let shutdown = self.ctx.shutdown.clone();
        tokio::spawn(async move {
            loop {
                let (stream, _) = tokio::select! {
                    r = listener.accept() => match r {
                        Ok(s) => s,
                        Err(_) => continue,
                    },
                    _ = shutdown.cancelled() => break,
                };
                let core = core.clone();
                tokio::spawn(async move {
                    let (rd, mut wr) = stream.into_split();
                    let mut lines = BufReader::new(rd).lines();
                    while let Ok(Some(line)) = lines.next_line().await {
                        let out = core.admin_command(line.trim());
                        if wr.write_all(out.as_bytes()).await.is_err() {
                            break;
                        }
                    }
                });
            }
        });
        info!(%local, "admin endpoint listening");
        Ok(local)
    }
}

fn proof_of(pkt: &Packet, kind: PacketType, anchor: &TrustAnchor) -> Option<ControlProof> {
    let proof = ControlProof::decode(&pkt.payload).ok()?;
    anchor.verify(&proof.cert).ok()?;
    proof.verify(kind, &pkt.header.source, &pkt.header.destination).then_some(proof)
}

impl Core {
    fn snapshot(&self) -> StatsSnapshot {
        let s = &self.stats;
        let get = |c: &AtomicU64| c.load(Ordering::Relaxed);
        StatsSnapshot {
            packets_forwarded: get(&s.packets_forwarded),
            packets_dropped_ttl: get(&s.packets_dropped_ttl),
            packets_dropped_verify: get(&s.packets_dropped_verify),
            packets_dropped_no_route: get(&s.packets_dropped_no_route),
            packets_dropped_queue: get(&s.packets_dropped_queue),
            payload_copy_count: get(&self.copies),
            advertisements_fresh: get(&s.advertisements_fresh),
            advertisements_duplicate: get(&s.advertisements_duplicate),
            subscribes_timed_out: get(&s.subscribes_timed_out),
            connections: self.links.len(),
            rib_entries: self.rib.len(),
        }
    }

    fn admin_command(&self, cmd: &str) -> String {
        match cmd {
            "rib dump" => {
                let mut out = String::new();
                for line in self.rib.dump() {
                    out.push_str(&serde_json::to_string(&line).expect("dump line serializes"));
                    out.push('\n');
                }
                out.push('\n');
                out
            }
            "stats" => {
                let mut s = serde_json::to_string(&self.snapshot()).expect("stats serialize");
                s.push_str("\n\n");
                s
            }
            other => format!("{{\"error\":\"unknown command {other:?}\"}}\n\n"),
        }
    }

    fn emit(&self, ev: RouterEvent) {
        if self.events.receiver_count() > 0 {
            let _ = self.events.send(ev);
        }
    }

    fn drop_packet(&self, ptype: PacketType, reason: DropReason) {
        let counter = match reason {
            DropReason::Ttl => &self.stats.packets_dropped_ttl,
            DropReason::Verify => &self.stats.packets_dropped_verify,
            DropReason::NoRoute => &self.stats.packets_dropped_no_route,
            DropReason::QueueFull | DropReason::TooLarge => &self.stats.packets_dropped_queue,
        };
        counter.fetch_add(1, Ordering::Relaxed);
        self.emit(RouterEvent::Dropped { ptype, reason });
    }

    fn send_to(&self, conn: ConnectionId, frame: Frame, ptype: PacketType) -> bool {
        let Some(peer) = self.links.get(&conn) else {
            return false;
        };
        match peer.link.send(frame) {
            Ok(()) => {
                self.stats.packets_forwarded.fetch_add(1, Ordering::Relaxed);
                true
            }
            Err(SendError::Closed) => false,
            Err(SendError::Full) => {
                self.drop_packet(ptype, DropReason::QueueFull);
                false
            }
            Err(SendError::TooLarge(_)) => {
                self.drop_packet(ptype, DropReason::TooLarge);
                false
            }
        }
    }

    fn router_links(&self, except: ConnectionId) -> Vec<ConnectionId> {
        self.links
            .iter()
            .filter(|p| *p.key() != except && p.is_router.load(Ordering::Relaxed))
            .map(|p| *p.key())
            .collect()
    }

    fn is_router(&self, conn: ConnectionId) -> bool {
        self.links.get(&conn).is_some_and(|p| p.is_router.load(Ordering::Relaxed))
    }

    /// Header for the next hop: `None` if the ttl is exhausted. Locally
    /// originated packets keep their ttl.
    fn next_hop(&self, header: &PacketHeader, from: ConnectionId) -> Option<PacketHeader> {
        let mut h = *header;
        if from != LOCAL {
            if h.ttl <= 1 {
                return None;
            }
            h.ttl -= 1;
        }
        Some(h)
    }

    fn handle(&self, from: ConnectionId, pkt: Packet) {
        match pkt.header.ptype {
            PacketType::Data => self.handle_data(pkt, from),
            PacketType::Advertisement | PacketType::RibResponse => self.handle_advertisement(pkt, from),
            PacketType::Subscribe => self.handle_subscribe(pkt, from),
            PacketType::RibQuery => self.handle_query(pkt, from),
        }
    }

    fn handle_advertisement(&self, pkt: Packet, from: ConnectionId) {
        let name = pkt.header.source;
        let nonce = pkt.header.nonce;
        if self.rib.has_seen(&name, nonce) {
            self.stats.advertisements_duplicate.fetch_add(1, Ordering::Relaxed);
            self.emit(RouterEvent::Advertisement { name, nonce, ttl: pkt.header.ttl, from, fresh: false });
            return;
        }
        let Some(proof) = proof_of(&pkt, PacketType::Advertisement, &self.anchor) else {
            self.drop_packet(pkt.header.ptype, DropReason::Verify);
            return;
        };
        let outcome = self
            .rib
            .insert_advertisement(name, from, Arc::new(proof.cert), pkt.payload.clone(), nonce);
        let InsertOutcome::Fresh { rerouted } = outcome else {
            self.stats.advertisements_duplicate.fetch_add(1, Ordering::Relaxed);
            self.emit(RouterEvent::Advertisement { name, nonce, ttl: pkt.header.ttl, from, fresh: false });
            return;
        };
        self.stats.advertisements_fresh.fetch_add(1, Ordering::Relaxed);
        self.emit(RouterEvent::Advertisement { name, nonce, ttl: pkt.header.ttl, from, fresh: true });

        if let Some(h) = self.next_hop(&pkt.header, from) {
            let frame = Frame { header: h.encode(pkt.payload.len()), payload: pkt.payload.clone() };
            for conn in self.router_links(from) {
                self.send_to(conn, frame.clone(), h.ptype);
            }
        }
        if rerouted {
            self.resubscribe(&name);
        }
        self.resolve_pending(&name);
    }

    /// Sends the stored subscribe for `name` toward its current upstream.
    fn resubscribe(&self, name: &GdpName) {
        let Some(sub) = self.subscriptions.get(name).map(|s| s.clone()) else {
            return;
        };
        let upstream = self.rib.with_route(name, |e| (!e.sinks.is_empty()).then_some(e.upstream));
        if let Some(Some(up)) = upstream {
            if self.is_router(up) {
                let mut h = sub.header;
                h.ttl = self.ttl_default;
                let frame = Frame { header: h.encode(sub.payload.len()), payload: sub.payload };
                self.send_to(up, frame, PacketType::Subscribe);
            }
        }
    }

    fn resolve_pending(&self, name: &GdpName) {
        if let Some((_, waiting)) = self.pending.remove(name) {
            for p in waiting {
                if self.links.contains_key(&p.from) {
                    self.attach_subscriber(p.pkt, p.from);
                }
            }
        }
    }

    fn handle_subscribe(&self, pkt: Packet, from: ConnectionId) {
        if proof_of(&pkt, PacketType::Subscribe, &self.anchor).is_none() {
            self.drop_packet(PacketType::Subscribe, DropReason::Verify);
            return;
        }
        self.attach_subscriber(pkt, from);
    }

    fn attach_subscriber(&self, pkt: Packet, from: ConnectionId) {
        let name = pkt.header.destination;
        match self.rib.add_sink(&name, from) {
            AddSinkOutcome::Added => {
                self.emit(RouterEvent::SinkAdded { name, sink: from });
                self.subscriptions.insert(name, pkt.clone());
                let upstream = self.rib.with_route(&name, |e| e.upstream);
                if let (Some(up), Some(h)) = (upstream, self.next_hop(&pkt.header, from)) {
                    if self.is_router(up) {
                        let frame = Frame { header: h.encode(pkt.payload.len()), payload: pkt.payload };
                        self.send_to(up, frame, PacketType::Subscribe);
                    }
                }
            }
            AddSinkOutcome::IsUpstream => {
                debug!(name = %name.short(), conn = from.0, "subscribe from the upstream link ignored");
            }
            AddSinkOutcome::UnknownName => self.hold_pending(pkt, from),
        }
    }

    fn hold_pending(&self, pkt: Packet, from: ConnectionId) {
        let name = pkt.header.destination;
        self.pending.entry(name).or_default().push(Pending { from, pkt, since: Instant::now() });
        self.emit(RouterEvent::SubscribePending { name });

        let query = PacketHeader::new(PacketType::RibQuery, GdpName::ZERO, name, self.ttl_default);
        self.queries.lock().insert(query.nonce);
        let frame = Frame { header: query.encode(0), payload: Bytes::new() };
        for conn in self.router_links(from) {
            self.send_to(conn, frame.clone(), PacketType::RibQuery);
        }

        let Some(core) = self.me.upgrade() else {
            return;
        };
        tokio::spawn(async move {
            tokio::time::sleep(PENDING_TIMEOUT).await;
            core.expire_pending(&name);
        });
    }

    fn expire_pending(&self, name: &GdpName) {
        let mut expired = 0u64;
        if let Some(mut waiting) = self.pending.get_mut(name) {
            let before = waiting.len();
            waiting.retain(|p| p.since.elapsed() < PENDING_TIMEOUT);
            expired = (before - waiting.len()) as u64;
        }
        self.pending.remove_if(name, |_, v| v.is_empty());
        if expired > 0 {
            self.stats.subscribes_timed_out.fetch_add(expired, Ordering::Relaxed);
            self.emit(RouterEvent::SubscribeTimeout { name: *name });
            error!(name = %name.short(), "subscribe timed out waiting for an advertisement");
        }
    }

    fn handle_query(&self, pkt: Packet, from: ConnectionId) {
        if let Some(peer) = self.links.get(&from) {
            peer.is_router.store(true, Ordering::Relaxed);
        }
        let name = pkt.header.destination;
        if name.is_zero() {
            self.dump_to(from);
            return;
        }
        if !self.queries.lock().insert(pkt.header.nonce) {
            return;
        }
        let answer = self.rib.with_route(&name, |e| e.proof.clone());
        if let Some(proof) = answer {
            let h = PacketHeader::new(PacketType::RibResponse, name, GdpName::ZERO, self.ttl_default);
            self.send_to(from, Frame { header: h.encode(proof.len()), payload: proof }, PacketType::RibResponse);
        } else if let Some(h) = self.next_hop(&pkt.header, from) {
            let frame = Frame { header: h.encode(0), payload: Bytes::new() };
            for conn in self.router_links(from) {
                self.send_to(conn, frame.clone(), PacketType::RibQuery);
            }
        } else {
            self.drop_packet(PacketType::RibQuery, DropReason::Ttl);
        }
    }

    /// Sends every routable entry not learned from `to` as a RibResponse.
    fn dump_to(&self, to: ConnectionId) {
        for e in self.rib.routable() {
            if e.upstream == to {
                continue;
            }
            let h = PacketHeader::new(PacketType::RibResponse, e.name, GdpName::ZERO, self.ttl_default);
            self.send_to(to, Frame { header: h.encode(e.proof.len()), payload: e.proof }, PacketType::RibResponse);
        }
    }

    fn handle_data(&self, pkt: Packet, from: ConnectionId) {
        let Some(h) = self.next_hop(&pkt.header, from) else {
            self.drop_packet(PacketType::Data, DropReason::Ttl);
            return;
        };
        let frame = Frame { header: h.encode(pkt.payload.len()), payload: pkt.payload };
        let sinks = self.rib.with_route(&h.destination, |e| {
            e.sinks.iter().copied().filter(|s| *s != from).collect::<Vec<_>>()
        });
        match sinks {
            Some(sinks) => {
                for s in sinks {
                    self.send_to(s, frame.clone(), PacketType::Data);
                }
            }
            None => self.drop_packet(PacketType::Data, DropReason::NoRoute),
        }
    }
}

impl Endpoint for Core {
    fn on_open(&self, link: Link) {
        let conn = link.id;
        let outbound = link.outbound;
        self.links.insert(conn, Peer { link, is_router: AtomicBool::new(outbound) });
        self.emit(RouterEvent::LinkUp { conn, outbound });
        if outbound {
            // Ask for the peer's table, then offer ours with fresh nonces.
            let q = PacketHeader::new(PacketType::RibQuery, GdpName::ZERO, GdpName::ZERO, 1);
            self.send_to(conn, Frame { header: q.encode(0), payload: Bytes::new() }, PacketType::RibQuery);
            for e in self.rib.routable() {
                if e.upstream == conn {
                    continue;
                }
                let h = PacketHeader::new(PacketType::Advertisement, e.name, GdpName::ZERO, self.ttl_default);
                self.send_to(conn, Frame { header: h.encode(e.proof.len()), payload: e.proof }, PacketType::Advertisement);
            }
        }
    }

    fn on_packet(&self, conn: ConnectionId, pkt: Packet) {
        self.handle(conn, pkt);
    }

    fn on_close(&self, conn: ConnectionId) {
        self.links.remove(&conn);
        let affected = self.rib.remove_connection(conn);
        if !affected.is_empty() {
            warn!(conn = conn.0, names = affected.len(), "link lost; routes marked stale");
        }
        self.pending.iter_mut().for_each(|mut v| v.retain(|p| p.from != conn));
        self.emit(RouterEvent::LinkDown { conn });
    }
}
