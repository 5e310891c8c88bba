//! The local publish/subscribe bus: an in-process broker, plus a TCP
//! endpoint where each line is one [`UnifiedMessage`] in JSON.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use bytes::Bytes;
use dashmap::DashMap;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpListener;
use tokio::sync::broadcast;
use tokio_util::sync::CancellationToken;
use tracing::{debug, info};

use super::message::{now_ns, UnifiedMessage};

const TOPIC_CAPACITY: usize = 1024;

/// Who put a message on the bus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// An in-process publisher.
    Local,
    /// A client of the TCP endpoint.
    Client(u64),
    /// The proxy, delivering from the mesh.
    Mesh,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BusMessage {
    pub topic: String,
    pub msg_type: String,
    pub timestamp_ns: u64,
    pub data: Bytes,
    pub origin: Origin,
}

impl BusMessage {
    pub fn local(topic: impl Into<String>, msg_type: impl Into<String>, data: impl Into<Bytes>) -> Self {
        BusMessage {
            topic: topic.into(),
            msg_type: msg_type.into(),
            timestamp_ns: now_ns(),
            data: data.into(),
            origin: Origin::Local,
        }
    }

    pub fn to_unified(&self) -> UnifiedMessage {
        UnifiedMessage::new(self.topic.clone(), self.msg_type.clone(), self.timestamp_ns, &self.data)
    }
}

#[derive(Debug)]
pub struct LocalBus {
    topics: DashMap<String, broadcast::Sender<BusMessage>>,
    all: broadcast::Sender<BusMessage>,
    next_client: AtomicU64,
}

impl Default for LocalBus {
    fn default() -> Self {
        LocalBus::new()
    }
}

impl LocalBus {
    pub fn new() -> Self {
        LocalBus {
            topics: DashMap::new(),
            all: broadcast::channel(TOPIC_CAPACITY).0,
            next_client: AtomicU64::new(1),
        }
    }

    fn sender(&self, topic: &str) -> broadcast::Sender<BusMessage> {
        if let Some(s) = self.topics.get(topic) {
            return s.clone();
        }
        self.topics
            .entry(topic.to_string())
            .or_insert_with(|| broadcast::channel(TOPIC_CAPACITY).0)
            .clone()
    }

    /// Delivers to every subscriber of the topic; returns how many.
    pub fn publish(&self, msg: BusMessage) -> usize {
        let _ = self.all.send(msg.clone());
        self.sender(&msg.topic).send(msg).unwrap_or(0)
    }

    pub fn subscribe(&self, topic: &str) -> broadcast::Receiver<BusMessage> {
        self.sender(topic).subscribe()
    }

    pub fn subscribe_all(&self) -> broadcast::Receiver<BusMessage> {
        self.all.subscribe()
    }

    /// Serves the TCP endpoint. Each client may publish lines and receives
    /// every bus message it did not publish itself.
    pub async fn serve(self: &Arc<Self>, addr: &str, shutdown: CancellationToken) -> std::io::Result<SocketAddr> {
        let listener = TcpListener::bind(addr).await?;
        let local = listener.local_addr()?;
        info!(%local, "local bus endpoint listening");
        let bus = self.clone();
        tokio::spawn(async move {
            loop {
                let stream = tokio::select! {
                    r = listener.accept() => match r {
                        Ok((s, _)) => s,
                        Err(_) => continue,
                    },
                    _ = shutdown.cancelled() => break,
                };
                let _ = stream.set_nodelay(true);
                let id = bus.next_client.fetch_add(1, Ordering::Relaxed);
                let bus = bus.clone();
                let shutdown = shutdown.clone();
                tokio::spawn(async move {
                    let (rd, mut wr) = stream.into_split();
                    let mut outbound = bus.subscribe_all();
                    let writer = async {
                        loop {
                            match outbound.recv().await {
                                Ok(m) if m.origin == Origin::Client(id) => continue,
                                Ok(m) => {
                                    let mut line = m.to_unified().to_json();
                                    line.push(b'\n');
                                    if wr.write_all(&line).await.is_err() {
                                        break;
                                    }
                                }
                                Err(broadcast::error::RecvError::Lagged(n)) => {
                                    debug!(client = id, missed = n, "bus client lagging");
                                }
                                Err(broadcast::error::RecvError::Closed) => break,
                            }
                        }
                    };
                    let reader = async {
                        let mut lines = BufReader::new(rd).lines();
                        while let Ok(Some(line)) = lines.next_line().await {
                            if line.trim().is_empty() {
                                continue;
                            }
                            let parsed = UnifiedMessage::from_json(line.as_bytes())
                                .ok()
                                .and_then(|m| m.decode_data().ok().map(|d| (m, d)));
                            match parsed {
                                Some((m, data)) => {
                                    bus.publish(BusMessage {
                                        topic: m.topic,
                                        msg_type: m.msg_type,
                                        timestamp_ns: now_ns(),
                                        data: data.into(),
                                        origin: Origin::Client(id),
                                    });
                                }
                                None => debug!(client = id, "ignoring malformed bus line"),
                            }
                        }
                    };
                    tokio::select! {
                        _ = writer => {}
                        _ = reader => {}
                        _ = shutdown.cancelled() => {}
                    }
                });
            }
        });
        Ok(local)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tokio::net::TcpStream;

    #[tokio::test]
    async fn tcp_clients_exchange_lines() {
        let bus = Arc::new(LocalBus::new());
        let stop = CancellationToken::new();
        let addr = bus.serve("127.0.0.1:0", stop.clone()).await.unwrap();
        let mut watcher = bus.subscribe("/chatter");

        let a = TcpStream::connect(addr).await.unwrap();
        let b = TcpStream::connect(addr).await.unwrap();
        let (_, mut a_wr) = a.into_split();
        let (b_rd, _b_wr) = b.into_split();
        tokio::time::sleep(std::time::Duration::from_millis(50)).await;

        let line = UnifiedMessage::new("/chatter", "std_msgs/String", 0, "héllo".as_bytes()).to_json();
        a_wr.write_all(&line).await.unwrap();
        a_wr.write_all(b"\nnot json\n").await.unwrap();

        let got = watcher.recv().await.unwrap();
        assert_eq!(&got.data[..], "héllo".as_bytes());
        assert!(matches!(got.origin, Origin::Client(_)));
        let mut lines = BufReader::new(b_rd).lines();
        let echoed = lines.next_line().await.unwrap().unwrap();
        let m = UnifiedMessage::from_json(echoed.as_bytes()).unwrap();
        assert_eq!(m.decode_data().unwrap(), "héllo".as_bytes());
        assert!(m.timestamp_ns > 0);
        stop.cancel();
    }
}
