//! TCP and UDP links carrying framed packets.
//!
//! Every connection has a reader and a writer task. The reader reads each
//! frame's header into a stack buffer and the payload straight into its own
//! allocation, so a payload is copied exactly once on ingress. The writer
//! hands header and payload to the kernel as separate I/O slices, so a
//! payload shared between several links is never copied on egress.

use std::fmt;
use std::io::{self, IoSlice};
use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use tokio::time::Instant;

use bytes::BytesMut;
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream, UdpSocket};
use tokio::sync::mpsc;
use tokio_util::sync::CancellationToken;
use tracing::{debug, info, warn};

use crate::packet::{self, Frame, Packet, PacketHeader, HEADER_LEN};
use crate::rib::ConnectionId;

/// Largest frame sent over UDP; there is no fragmentation.
pub const MAX_DATAGRAM: usize = 60 * 1024;
pub const BACKOFF_BASE: Duration = Duration::from_millis(200);
pub const BACKOFF_CAP: Duration = Duration::from_secs(10);
const LINK_QUEUE: usize = 4096;
const WRITE_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Tcp,
    Udp,
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transport::Tcp => "tcp",
            Transport::Udp => "udp",
        })
    }
}

impl FromStr for Transport {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tcp" => Ok(Transport::Tcp),
            "udp" => Ok(Transport::Udp),
            other => Err(format!("unknown transport `{other}` (expected tcp or udp)")),
        }
    }
}

/// Whether topics to one peer share a connection or get one each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TunnelMode {
    Dedicated,
    #[default]
    Shared,
}

impl FromStr for TunnelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dedicated" => Ok(TunnelMode::Dedicated),
            "shared" => Ok(TunnelMode::Shared),
            other => Err(format!("unknown tunnel mode `{other}` (expected dedicated or shared)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerConfig {
    pub address: String,
    pub transport: Transport,
    pub mode: TunnelMode,
    pub psk_ref: Option<String>,
}

impl PeerConfig {
    pub fn tcp(address: impl Into<String>) -> Self {
        PeerConfig { address: address.into(), transport: Transport::Tcp, mode: TunnelMode::Shared, psk_ref: None }
    }

    pub fn udp(address: impl Into<String>) -> Self {
        PeerConfig { transport: Transport::Udp, ..PeerConfig::tcp(address) }
    }

    pub fn with_mode(mut self, mode: TunnelMode) -> Self {
        self.mode = mode;
        self
    }
}

/// What a [`LinkShaper`] decides for an outgoing frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Deliver,
    Drop,
    Delay(Duration),
}

/// Per-link hook on the send path, used by the testbed to impair links and
/// to capture traffic.
pub trait LinkShaper: Send + Sync {
    fn on_send(&self, link: &LinkMeta, frame: &Frame) -> Verdict;
}

/// Identity of a link, as seen by its owner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkMeta {
    pub id: ConnectionId,
    pub transport: Transport,
    pub remote: SocketAddr,
    pub local: SocketAddr,
    /// True if this side dialed the connection.
    pub outbound: bool,
}

/// Callbacks from links into their owner.
pub trait Endpoint: Send + Sync + 'static {
    fn on_open(&self, link: Link);
    fn on_packet(&self, conn: ConnectionId, pkt: Packet);
    fn on_close(&self, conn: ConnectionId);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendError {
    Closed,
    Full,
    TooLarge(usize),
}

impl fmt::Display for SendError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SendError::Closed => f.write_str("link closed"),
            SendError::Full => f.write_str("link queue full"),
            SendError::TooLarge(n) => write!(f, "{n}-byte frame exceeds the datagram limit"),
        }
    }
}

impl std::error::Error for SendError {}

/// Sending half of a live connection.
#[derive(Clone)]
pub struct Link {
    pub id: ConnectionId,
    pub transport: Transport,
    pub remote: SocketAddr,
    pub local: SocketAddr,
    /// True if this side dialed the connection.
    pub outbound: bool,
    tx: mpsc::Sender<Queued>,
}

type Queued = (Instant, Frame);

impl fmt::Debug for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(&self.meta(), f)
    }
}

impl Link {
    fn open(meta: LinkMeta, tx: mpsc::Sender<Queued>) -> Link {
        Link {
            id: meta.id,
            transport: meta.transport,
            remote: meta.remote,
            local: meta.local,
            outbound: meta.outbound,
            tx,
        }
    }

    pub fn meta(&self) -> LinkMeta {
        LinkMeta {
            id: self.id,
            transport: self.transport,
            remote: self.remote,
            local: self.local,
            outbound: self.outbound,
        }
    }

    /// Queues a frame without waiting.
    pub fn send(&self, frame: Frame) -> Result<(), SendError> {
        if self.transport == Transport::Udp && frame.len() > MAX_DATAGRAM {
            return Err(SendError::TooLarge(frame.len()));
        }
        self.tx.try_send((Instant::now(), frame)).map_err(|e| match e {
            mpsc::error::TrySendError::Full(_) => SendError::Full,
            mpsc::error::TrySendError::Closed(_) => SendError::Closed,
        })
    }

    /// Queues a frame, waiting for queue space.
    pub async fn send_wait(&self, frame: Frame) -> Result<(), SendError> {
        if self.transport == Transport::Udp && frame.len() > MAX_DATAGRAM {
            return Err(SendError::TooLarge(frame.len()));
        }
        self.tx.send((Instant::now(), frame)).await.map_err(|_| SendError::Closed)
    }

    pub fn is_closed(&self) -> bool {
        self.tx.is_closed()
    }
}

/// State shared by all links of one router or proxy.
#[derive(Clone)]
pub struct LinkContext {
    pub shutdown: CancellationToken,
    /// Payload copies performed by the transport layer.
    pub copies: Arc<AtomicU64>,
    pub shaper: Option<Arc<dyn LinkShaper>>,
    next_id: Arc<AtomicU64>,
}

impl Default for LinkContext {
    fn default() -> Self {
        LinkContext::new()
    }
}

impl LinkContext {
    pub fn new() -> Self {
        LinkContext {
            shutdown: CancellationToken::new(),
            copies: Arc::new(AtomicU64::new(0)),
            shaper: None,
            next_id: Arc::new(AtomicU64::new(1)),
        }
    }

    pub fn with_shaper(mut self, shaper: Arc<dyn LinkShaper>) -> Self {
        self.shaper = Some(shaper);
        self
    }

    pub fn next_id(&self) -> ConnectionId {
        ConnectionId(self.next_id.fetch_add(1, Ordering::Relaxed))
    }
}

fn shape(ctx: &LinkContext, link: &LinkMeta, frame: &Frame) -> Verdict {
    ctx.shaper.as_ref().map_or(Verdict::Deliver, |s| s.on_send(link, frame))
}

// ---------------------------------------------------------------- TCP

async fn read_frames(
    mut rd: tokio::net::tcp::OwnedReadHalf,
    id: ConnectionId,
    ctx: &LinkContext,
    endpoint: &dyn Endpoint,
) -> io::Result<()> {
    let mut head = [0u8; HEADER_LEN];
    loop {
        rd.read_exact(&mut head).await?;
        let (header, len) = PacketHeader::decode(&head)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        let mut payload = BytesMut::zeroed(len);
        rd.read_exact(&mut payload).await?;
        ctx.copies.fetch_add(1, Ordering::Relaxed);
        endpoint.on_packet(id, Packet { header, payload: payload.freeze() });
    }
}

async fn write_batch(wr: &mut tokio::net::tcp::OwnedWriteHalf, frames: &[Queued]) -> io::Result<()> {
    let mut slices: Vec<IoSlice<'_>> = Vec::with_capacity(frames.len() * 2);
    for (_, f) in frames {
        slices.push(IoSlice::new(&f.header));
        if !f.payload.is_empty() {
            slices.push(IoSlice::new(&f.payload));
        }
    }
    let mut bufs = &mut slices[..];
    while !bufs.is_empty() {
        let n = wr.write_vectored(bufs).await?;
        if n == 0 {
            return Err(io::ErrorKind::WriteZero.into());
        }
        IoSlice::advance_slices(&mut bufs, n);
    }
    Ok(())
}

async fn write_frames(
    mut wr: tokio::net::tcp::OwnedWriteHalf,
    mut rx: mpsc::Receiver<Queued>,
    meta: LinkMeta,
    ctx: LinkContext,
) -> io::Result<()> {
    let mut batch: Vec<Queued> = Vec::with_capacity(WRITE_BATCH);
    while let Some(first) = rx.recv().await {
        batch.push(first);
        while batch.len() < WRITE_BATCH {
            match rx.try_recv() {
                Ok(f) => batch.push(f),
                Err(_) => break,
            }
        }
        if ctx.shaper.is_some() {
            for q in batch.drain(..) {
                match shape(&ctx, &meta, &q.1) {
                    Verdict::Drop => continue,
                    Verdict::Delay(d) => tokio::time::sleep_until(q.0 + d).await,
                    Verdict::Deliver => {}
                }
                write_batch(&mut wr, std::slice::from_ref(&q)).await?;
            }
        } else {
            write_batch(&mut wr, &batch).await?;
            batch.clear();
        }
    }
    let _ = wr.shutdown().await;
    Ok(())
}

/// Drives one TCP connection until it closes or the context shuts down.
pub async fn run_tcp(
    stream: TcpStream,
    id: ConnectionId,
    outbound: bool,
    ctx: LinkContext,
    endpoint: Arc<dyn Endpoint>,
) {
    let (remote, local) = match (stream.peer_addr(), stream.local_addr()) {
        (Ok(r), Ok(l)) => (r, l),
        (Err(e), _) | (_, Err(e)) => {
            debug!(conn = id.0, error = %e, "connection gone before setup");
            return;
        }
    };
    let _ = stream.set_nodelay(true);
    let (rd, wr) = stream.into_split();
    let (tx, rx) = mpsc::channel(LINK_QUEUE);
    let meta = LinkMeta { id, transport: Transport::Tcp, remote, local, outbound };
    endpoint.on_open(Link::open(meta, tx));
    let mut writer = tokio::spawn(write_frames(wr, rx, meta, ctx.clone()));
    let reason = tokio::select! {
        r = read_frames(rd, id, &ctx, endpoint.as_ref()) => r.err().map(|e| e.to_string()),
        r = &mut writer => match r {
            Ok(Ok(())) => None,
            Ok(Err(e)) => Some(e.to_string()),
            Err(e) => Some(e.to_string()),
        },
        _ = ctx.shutdown.cancelled() => Some("shutdown".into()),
    };
    writer.abort();
    debug!(conn = id.0, %remote, reason = reason.as_deref().unwrap_or("closed"), "tcp link closed");
    endpoint.on_close(id);
}

/// Binds a TCP listener and spawns its accept loop.
pub async fn listen_tcp(
    addr: &str,
    ctx: LinkContext,
    endpoint: Arc<dyn Endpoint>,
) -> io::Result<SocketAddr> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    info!(%local, "listening (tcp)");
    tokio::spawn(async move {
        loop {
            let accepted = tokio::select! {
                r = listener.accept() => r,
                _ = ctx.shutdown.cancelled() => break,
            };
            match accepted {
                Ok((stream, _)) => {
                    let id = ctx.next_id();
                    tokio::spawn(run_tcp(stream, id, false, ctx.clone(), endpoint.clone()));
                }
                Err(e) => {
                    warn!(error = %e, "accept failed");
                    tokio::time::sleep(Duration::from_millis(50)).await;
                }
            }
        }
    });
    Ok(local)
}

// ---------------------------------------------------------------- UDP

fn send_datagram(sock: &UdpSocket, frame: &Frame, to: Option<SocketAddr>) -> io::Result<usize> {
    let sock_ref = socket2::SockRef::from(sock);
    let slices = [IoSlice::new(&frame.header), IoSlice::new(&frame.payload)];
    match to {
        Some(addr) => sock_ref.send_to_vectored(&slices, &addr.into()),
        None => sock_ref.send_vectored(&slices),
    }
}

async fn write_datagrams(
    sock: Arc<UdpSocket>,
    to: Option<SocketAddr>,
    mut rx: mpsc::Receiver<Queued>,
    meta: LinkMeta,
    ctx: LinkContext,
) -> io::Result<()> {
    while let Some((queued, frame)) = rx.recv().await {
        match shape(&ctx, &meta, &frame) {
            Verdict::Drop => continue,
            Verdict::Delay(d) => tokio::time::sleep_until(queued + d).await,
            Verdict::Deliver => {}
        }
        loop {
            sock.writable().await?;
            match sock.try_io(tokio::io::Interest::WRITABLE, || send_datagram(&sock, &frame, to)) {
                Ok(_) => break,
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => continue,
                // A refused datagram is lost, like any other.
                Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => break,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(())
}

fn recv_buffer(buf: &mut BytesMut) {
    if buf.capacity() < 64 * 1024 {
        *buf = BytesMut::with_capacity(256 * 1024);
    }
}

/// Binds a UDP socket that accepts datagrams from any peer; each distinct
/// remote address becomes one connection.
pub async fn listen_udp(
    addr: &str,
    ctx: LinkContext,
    endpoint: Arc<dyn Endpoint>,
) -> io::Result<SocketAddr> {
    let sock = Arc::new(UdpSocket::bind(addr).await?);
    let local = sock.local_addr()?;
    info!(%local, "listening (udp)");
    tokio::spawn(async move {
        let mut peers: std::collections::HashMap<SocketAddr, ConnectionId> = Default::default();
        let mut buf = BytesMut::new();
        loop {
            recv_buffer(&mut buf);
            let r = tokio::select! {
                r = sock.recv_buf_from(&mut buf) => r,
                _ = ctx.shutdown.cancelled() => break,
            };
            let (n, from) = match r {
                Ok(v) => v,
                Err(e) => {
                    debug!(error = %e, "udp recv error");
                    buf.clear();
                    continue;
                }
            };
            let datagram = buf.split_to(n).freeze();
            ctx.copies.fetch_add(1, Ordering::Relaxed);
            let pkt = match packet::decode(datagram) {
                Ok(p) => p,
                Err(e) => {
                    debug!(%from, error = %e, "dropping undecodable datagram");
                    continue;
                }
            };
            let id = *peers.entry(from).or_insert_with(|| {
                let id = ctx.next_id();
                let (tx, rx) = mpsc::channel(LINK_QUEUE);
                let meta = LinkMeta { id, transport: Transport::Udp, remote: from, local, outbound: false };
                tokio::spawn(write_datagrams(sock.clone(), Some(from), rx, meta, ctx.clone()));
                endpoint.on_open(Link::open(meta, tx));
                id
            });
            endpoint.on_packet(id, pkt);
        }
        for id in peers.values() {
            endpoint.on_close(*id);
        }
    });
    Ok(local)
}

async fn run_udp_dialed(
    sock: UdpSocket,
    id: ConnectionId,
    ctx: LinkContext,
    endpoint: Arc<dyn Endpoint>,
) {
    let (remote, local) = match (sock.peer_addr(), sock.local_addr()) {
        (Ok(r), Ok(l)) => (r, l),
        _ => return,
    };
    let sock = Arc::new(sock);
    let (tx, rx) = mpsc::channel(LINK_QUEUE);
    let meta = LinkMeta { id, transport: Transport::Udp, remote, local, outbound: true };
    endpoint.on_open(Link::open(meta, tx));
    let mut writer = tokio::spawn(write_datagrams(sock.clone(), None, rx, meta, ctx.clone()));
    let reader = async {
        let mut buf = BytesMut::new();
        loop {
            recv_buffer(&mut buf);
            let n = sock.recv_buf(&mut buf).await?;
            let datagram = buf.split_to(n).freeze();
            ctx.copies.fetch_add(1, Ordering::Relaxed);
            match packet::decode(datagram) {
                Ok(pkt) => endpoint.on_packet(id, pkt),
                Err(e) => debug!(error = %e, "dropping undecodable datagram"),
            }
        }
        #[allow(unreachable_code)]
        Ok::<(), io::Error>(())
    };
    tokio::select! {
        r = reader => if let Err(e) = r { debug!(conn = id.0, error = %e, "udp link error") },
        _ = &mut writer => {}
        _ = ctx.shutdown.cancelled() => {}
    }
    writer.abort();
    endpoint.on_close(id);
}

// ---------------------------------------------------------------- dialing

async fn resolve(address: &str) -> io::Result<SocketAddr> {
    tokio::net::lookup_host(address)
        .await?
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("{address} did not resolve")))
}

async fn connect_once(cfg: &PeerConfig) -> io::Result<Connected> {
    let addr = resolve(&cfg.address).await?;
    match cfg.transport {
        Transport::Tcp => {
            let stream = tokio::time::timeout(Duration::from_secs(5), TcpStream::connect(addr))
                .await
                .map_err(|_| io::Error::new(io::ErrorKind::TimedOut, "connect timed out"))??;
            Ok(Connected::Tcp(stream))
        }
        Transport::Udp => {
            let bind = if addr.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" };
            let sock = UdpSocket::bind(bind).await?;
            sock.connect(addr).await?;
            Ok(Connected::Udp(sock))
        }
    }
}

enum Connected {
    Tcp(TcpStream),
    Udp(UdpSocket),
}

/// Exponential backoff: 200 ms doubling to a 10 s cap.
#[derive(Debug, Clone)]
pub struct Backoff {
    next: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff { next: BACKOFF_BASE }
    }
}

impl Backoff {
    pub fn next_delay(&mut self) -> Duration {
        let d = self.next;
        self.next = (self.next * 2).min(BACKOFF_CAP);
        d
    }

    pub fn reset(&mut self) {
        self.next = BACKOFF_BASE;
    }
}

/// Keeps a connection to `cfg` alive under a stable [`ConnectionId`],
/// reconnecting with [`Backoff`] whenever it drops or cannot be made.
pub fn spawn_dialer(
    cfg: PeerConfig,
    id: ConnectionId,
    ctx: LinkContext,
    endpoint: Arc<dyn Endpoint>,
) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut backoff = Backoff::default();
        loop {
            if ctx.shutdown.is_cancelled() {
                break;
            }
            let attempt = tokio::select! {
                r = connect_once(&cfg) => r,
                _ = ctx.shutdown.cancelled() => break,
            };
            match attempt {
                Ok(Connected::Tcp(stream)) => {
                    backoff.reset();
                    info!(conn = id.0, peer = %cfg.address, "connected (tcp)");
                    run_tcp(stream, id, true, ctx.clone(), endpoint.clone()).await;
                }
                Ok(Connected::Udp(sock)) => {
                    backoff.reset();
                    info!(conn = id.0, peer = %cfg.address, "connected (udp)");
                    run_udp_dialed(sock, id, ctx.clone(), endpoint.clone()).await;
                }
                Err(e) => {
                    debug!(conn = id.0, peer = %cfg.address, error = %e, "connect failed");
                }
            }
            let delay = backoff.next_delay();
            tokio::select! {
                _ = tokio::time::sleep(delay) => {}
                _ = ctx.shutdown.cancelled() => break,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::name::GdpName;
    use crate::packet::PacketType;
    use bytes::Bytes;
    use parking_lot::Mutex;

    #[derive(Default)]
    struct Recorder {
        links: Mutex<Vec<Link>>,
        packets: Mutex<Vec<(ConnectionId, Packet)>>,
        closed: Mutex<Vec<ConnectionId>>,
    }

    impl Endpoint for Recorder {
        fn on_open(&self, link: Link) {
            self.links.lock().push(link);
        }
        fn on_packet(&self, conn: ConnectionId, pkt: Packet) {
            self.packets.lock().push((conn, pkt));
        }
        fn on_close(&self, conn: ConnectionId) {
            self.closed.lock().push(conn);
        }
    }

    fn frame(payload: &'static [u8]) -> Frame {
        let h = PacketHeader::new(PacketType::Data, GdpName::from_bytes([3; 32]), GdpName::from_bytes([3; 32]), 8);
        Packet::new(h, Bytes::from_static(payload)).frame().unwrap()
    }

    async fn wait_for(mut cond: impl FnMut() -> bool) {
        for _ in 0..200 {
            if cond() {
                return;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("condition not reached");
    }

    #[test]
    fn backoff_doubles_to_cap() {
        let mut b = Backoff::default();
        let seq: Vec<u64> = (0..8).map(|_| b.next_delay().as_millis() as u64).collect();
        assert_eq!(seq, vec![200, 400, 800, 1600, 3200, 6400, 10_000, 10_000]);
        b.reset();
        assert_eq!(b.next_delay(), BACKOFF_BASE);
    }

    #[tokio::test]
    async fn tcp_frames_arrive_intact_with_one_copy_each() {
        let server = Arc::new(Recorder::default());
        let sctx = LinkContext::new();
        let addr = listen_tcp("127.0.0.1:0", sctx.clone(), server.clone()).await.unwrap();
        let client = Arc::new(Recorder::default());
        let cctx = LinkContext::new();
        spawn_dialer(PeerConfig::tcp(addr.to_string()), cctx.next_id(), cctx.clone(), client.clone());
        wait_for(|| !client.links.lock().is_empty()).await;
        let link = client.links.lock()[0].clone();
        assert!(link.outbound);
        for _ in 0..100 {
            link.send(frame(b"payload-bytes")).unwrap();
        }
        link.send(frame(b"")).unwrap();
        wait_for(|| server.packets.lock().len() == 101).await;
        assert!(server.packets.lock()[..100].iter().all(|(_, p)| &p.payload[..] == b"payload-bytes"));
        assert_eq!(sctx.copies.load(Ordering::Relaxed), 101);
        sctx.shutdown.cancel();
        cctx.shutdown.cancel();
    }

    #[tokio::test]
    async fn udp_rejects_oversize_and_delivers_small() {
        let server = Arc::new(Recorder::default());
        let sctx = LinkContext::new();
        let addr = listen_udp("127.0.0.1:0", sctx.clone(), server.clone()).await.unwrap();
        let client = Arc::new(Recorder::default());
        let cctx = LinkContext::new();
        spawn_dialer(PeerConfig::udp(addr.to_string()), cctx.next_id(), cctx.clone(), client.clone());
        wait_for(|| !client.links.lock().is_empty()).await;
        let link = client.links.lock()[0].clone();
        let big = Packet::new(
            PacketHeader::new(PacketType::Data, GdpName::ZERO, GdpName::ZERO, 1),
            Bytes::from(vec![0u8; MAX_DATAGRAM]),
        );
        assert!(matches!(link.send(big.frame().unwrap()), Err(SendError::TooLarge(_))));
        link.send(frame(b"dgram")).unwrap();
        wait_for(|| server.packets.lock().len() == 1).await;
        assert_eq!(&server.packets.lock()[0].1.payload[..], b"dgram");
        // The reply path reuses the demultiplexed connection.
        let back = server.links.lock()[0].clone();
        back.send(frame(b"reply")).unwrap();
        wait_for(|| client.packets.lock().len() == 1).await;
        sctx.shutdown.cancel();
        cctx.shutdown.cancel();
    }

    #[tokio::test]
    async fn dialer_retries_until_listener_appears() {
        // Reserve a port, release it, and start listening there later.
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let addr = format!("127.0.0.1:{port}");
        let client = Arc::new(Recorder::default());
        let cctx = LinkContext::new();
        let id = cctx.next_id();
        spawn_dialer(PeerConfig::tcp(addr.clone()), id, cctx.clone(), client.clone());
        tokio::time::sleep(Duration::from_millis(500)).await;
        assert!(client.links.lock().is_empty());
        let server = Arc::new(Recorder::default());
        let sctx = LinkContext::new();
        listen_tcp(&addr, sctx.clone(), server.clone()).await.unwrap();
        wait_for(|| !client.links.lock().is_empty()).await;
        assert_eq!(client.links.lock()[0].id, id);
        // Listener goes away: the client sees the close and reconnects under the same id.
        sctx.shutdown.cancel();
        wait_for(|| !client.closed.lock().is_empty()).await;
        let sctx2 = LinkContext::new();
        tokio::time::sleep(Duration::from_millis(50)).await;
        listen_tcp(&addr, sctx2.clone(), server.clone()).await.unwrap();
        wait_for(|| client.links.lock().len() == 2).await;
        assert_eq!(client.links.lock()[1].id, id);
        cctx.shutdown.cancel();
        sctx2.shutdown.cancel();
    }
}
