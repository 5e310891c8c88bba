//! Routing Information Base: per-name routing state kept by each router.
//!
//! An entry records the connection an advertisement arrived on (the
//! upstream, toward the publisher) and the connections that subscribed
//! through this router (the sinks). When a connection drops, entries whose
//! upstream it was are marked stale rather than deleted so subscriber state
//! survives until the name is advertised again.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use bytes::Bytes;
use dashmap::DashMap;
use serde::Serialize;

use crate::crypto::Certificate;
use crate::name::GdpName;

/// Dedup window per name.
pub const NONCE_CAPACITY: usize = 1024;

/// One live peer or proxy connection on a router.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct ConnectionId(pub u64);

impl fmt::Debug for ConnectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "conn#{}", self.0)
    }
}

impl fmt::Display for ConnectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Bounded set of recently seen nonces with least-recently-used eviction.
#[derive(Debug, Clone, Default)]
pub struct NonceWindow {
    order: VecDeque<u64>,
    members: HashSet<u64>,
    capacity: usize,
}

impl NonceWindow {
    pub fn new(capacity: usize) -> Self {
        NonceWindow { order: VecDeque::new(), members: HashSet::new(), capacity }
    }

    /// Records `nonce`; returns false if it was already present.
    pub fn insert(&mut self, nonce: u64) -> bool {
        if self.members.contains(&nonce) {
            if let Some(pos) = self.order.iter().position(|n| *n == nonce) {
                self.order.remove(pos);
            }
            self.order.push_back(nonce);
            return false;
        }
        if self.order.len() == self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.members.remove(&old);
            }
        }
        self.order.push_back(nonce);
        self.members.insert(nonce);
        true
    }

    pub fn contains(&self, nonce: u64) -> bool {
        self.members.contains(&nonce)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Snapshot of the routing state for one name.
#[derive(Debug, Clone)]
pub struct RibEntry {
    pub name: GdpName,
    pub upstream: ConnectionId,
    pub sinks: BTreeSet<ConnectionId>,
    pub cert: Arc<Certificate>,
    /// Encoded advertisement credential, replayed in responses and
    /// re-advertisements.
    pub proof: Bytes,
    pub last_advertised: Instant,
    pub stale: bool,
}

#[derive(Debug)]
struct Slot {
    entry: RibEntry,
    seen: NonceWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    /// New (name, nonce). `rerouted` is set when the entry was absent or
    /// stale and now routes through the advertising connection.
    Fresh { rerouted: bool },
    Duplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddSinkOutcome {
    Added,
    /// No routable entry; the caller should query for the name.
    UnknownName,
    /// The connection is this entry's upstream and cannot be a sink.
    IsUpstream,
}

/// One line of `sgc rib dump`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DumpLine {
    pub name_hex: String,
    pub upstream: ConnectionId,
    pub sinks: Vec<ConnectionId>,
    pub stale: bool,
}

#[derive(Debug, Default)]
pub struct Rib {
    entries: DashMap<GdpName, Slot>,
}

impl Rib {
    pub fn new() -> Self {
        Rib::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert_advertisement(
        &self,
        name: GdpName,
        from: ConnectionId,
        cert: Arc<Certificate>,
        proof: Bytes,
        nonce: u64,
    ) -> InsertOutcome {
        use dashmap::mapref::entry::Entry;
        match self.entries.entry(name) {
            Entry::Vacant(v) => {
                let mut seen = NonceWindow::new(NONCE_CAPACITY);
                seen.insert(nonce);
                v.insert(Slot {
                    entry: RibEntry {
                        name,
                        upstream: from,
                        sinks: BTreeSet::new(),
                        cert,
                        proof,
                        last_advertised: Instant::now(),
                        stale: false,
                    },
                    seen,
                });
                InsertOutcome::Fresh { rerouted: true }
            }
            Entry::Occupied(mut o) => {
                let slot = o.get_mut();
                if !slot.seen.insert(nonce) {
                    return InsertOutcome::Duplicate;
                }
                let e = &mut slot.entry;
                e.last_advertised = Instant::now();
                e.cert = cert;
                e.proof = proof;
                let rerouted = e.stale;
                if e.stale {
                    e.upstream = from;
                    e.stale = false;
                    e.sinks.remove(&from);
                }
                InsertOutcome::Fresh { rerouted }
            }
        }
    }

    pub fn add_sink(&self, name: &GdpName, sink: ConnectionId) -> AddSinkOutcome {
        match self.entries.get_mut(name) {
            Some(mut slot) if !slot.entry.stale => {
                if slot.entry.upstream == sink {
                    AddSinkOutcome::IsUpstream
                } else {
                    slot.entry.sinks.insert(sink);
                    AddSinkOutcome::Added
                }
            }
            _ => AddSinkOutcome::UnknownName,
        }
    }

    /// Routable entry for `name`; stale entries are not returned.
    pub fn lookup(&self, name: &GdpName) -> Option<RibEntry> {
        self.entries
            .get(name)
            .filter(|s| !s.entry.stale)
            .map(|s| s.entry.clone())
    }

    /// Runs `f` on a routable entry without cloning it.
    pub fn with_route<R>(&self, name: &GdpName, f: impl FnOnce(&RibEntry) -> R) -> Option<R> {
        self.entries.get(name).filter(|s| !s.entry.stale).map(|s| f(&s.entry))
    }

    /// Whether the (name, nonce) pair has been recorded.
    pub fn has_seen(&self, name: &GdpName, nonce: u64) -> bool {
        self.entries.get(name).is_some_and(|s| s.seen.contains(nonce))
    }

    /// Drops `conn` from every sink set and marks entries it was upstream of
    /// as stale. Returns the affected names.
    pub fn remove_connection(&self, conn: ConnectionId) -> Vec<GdpName> {
        let mut affected = Vec::new();
        for mut slot in self.entries.iter_mut() {
            let e = &mut slot.entry;
            let mut hit = e.sinks.remove(&conn);
            if e.upstream == conn && !e.stale {
                e.stale = true;
                hit = true;
            }
            if hit {
                affected.push(e.name);
            }
        }
        affected
    }

    /// All routable entries.
    pub fn routable(&self) -> Vec<RibEntry> {
        self.entries
            .iter()
            .filter(|s| !s.entry.stale)
            .map(|s| s.entry.clone())
            .collect()
    }

    pub fn dump(&self) -> Vec<DumpLine> {
        let mut lines: Vec<DumpLine> = self
            .entries
            .iter()
            .map(|s| DumpLine {
                name_hex: s.entry.name.to_hex(),
                upstream: s.entry.upstream,
                sinks: s.entry.sinks.iter().copied().collect(),
                stale: s.entry.stale,
            })
            .collect();
        lines.sort_by(|a, b| a.name_hex.cmp(&b.name_hex));
        lines
    }
}
