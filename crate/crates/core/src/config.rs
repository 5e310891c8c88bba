//! TOML configuration for routers, proxies and testbed topologies.
//!
//! Files are checked completely before anything starts; every problem is
//! reported as a [`Diagnostic`] naming the file, table and key.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;
use toml::{Table, Value};

use crate::crypto::TrustAnchor;
use crate::keystore::{self, KeyStore};
use crate::proxy::{Action, ProxySettings, TopicConfig, Visibility};
use crate::router::{RouterSettings, DEFAULT_TTL};
use crate::transport::{PeerConfig, Transport, TunnelMode};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub file: PathBuf,
    pub table: String,
    pub key: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: [{}] {}: {}", self.file.display(), self.table, self.key, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{}", render(.0))]
    Invalid(Vec<Diagnostic>),
}

fn render(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n")
}

impl ConfigError {
    pub fn diagnostics(&self) -> Vec<String> {
        match self {
            ConfigError::Invalid(d) => d.iter().map(|d| d.to_string()).collect(),
            other => vec![other.to_string()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeysSection {
    pub key_dir: PathBuf,
    pub anchor_cert: Option<PathBuf>,
    /// Proxies only: id of the key and certificate the proxy signs with.
    pub identity: Option<String>,
}

impl KeysSection {
    pub fn store(&self) -> Arc<KeyStore> {
        Arc::new(KeyStore::open(&self.key_dir))
    }

    pub fn anchor(&self) -> Result<TrustAnchor, keystore::KeyStoreError> {
        let path = self.anchor_cert.clone().unwrap_or_else(|| keystore::cert_path(&self.key_dir, "anchor"));
        keystore::load_anchor(&path)
    }
}

#[derive(Debug, Clone)]
pub struct RouterFile {
    pub listen_tcp: Option<String>,
    pub listen_udp: Option<String>,
    pub admin: Option<String>,
    pub ttl_default: u8,
    pub peers: Vec<PeerConfig>,
    pub keys: KeysSection,
}

impl RouterFile {
    pub fn settings(&self) -> Result<RouterSettings, keystore::KeyStoreError> {
        Ok(RouterSettings {
            listen_tcp: self.listen_tcp.clone(),
            listen_udp: self.listen_udp.clone(),
            admin: self.admin.clone(),
            ttl_default: self.ttl_default,
            peers: self.peers.clone(),
            anchor: self.keys.anchor()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ProxyFile {
    pub router_peer: PeerConfig,
    pub topics: Vec<TopicConfig>,
    pub local_bus: Option<String>,
    pub ttl: u8,
    pub keys: KeysSection,
}

impl ProxyFile {
    pub fn settings(&self) -> ProxySettings {
        let mut s = ProxySettings::new(
            self.router_peer.clone(),
            self.keys.identity.clone().unwrap_or_default(),
            self.keys.store(),
        );
        s.topics = self.topics.clone();
        s.local_bus = self.local_bus.clone();
        s.ttl = self.ttl;
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopoRouter {
    pub id: String,
    pub transport: Transport,
    pub ttl_default: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopoProxy {
    pub id: String,
    pub router: String,
    pub identity: String,
    pub mode: TunnelMode,
    pub topics: Vec<TopicConfig>,
}

/// A link between two nodes. `b` dials `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub loss: f64,
    pub delay_ms: u64,
}

/// Which proxies the benchmarks drive: `client` publishes requests and the
/// stream, `server` echoes. Bench topics are sealed with `key_ref`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchSpec {
    pub client: String,
    pub server: String,
    pub key_ref: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyFile {
    pub routers: Vec<TopoRouter>,
    pub proxies: Vec<TopoProxy>,
    pub links: Vec<LinkSpec>,
    pub bench: Option<BenchSpec>,
    pub keys: KeysSection,
}

#[derive(Debug, Clone)]
pub enum ConfigFile {
    Router(RouterFile),
    Proxy(ProxyFile),
    Topology(TopologyFile),
}

impl ConfigFile {
    pub fn kind(&self) -> &'static str {
        match self {
            ConfigFile::Router(_) => "router",
            ConfigFile::Proxy(_) => "proxy",
            ConfigFile::Topology(_) => "topology",
        }
    }
}

/// Reads, parses and fully validates a config file of any kind.
pub fn load(path: &Path) -> Result<ConfigFile, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse(&text, path)
}

pub fn load_router(path: &Path) -> Result<RouterFile, ConfigError> {
    match load(path)? {
        ConfigFile::Router(r) => Ok(r),
        other => Err(wrong_kind(path, "router", other.kind())),
    }
}

pub fn load_proxy(path: &Path) -> Result<ProxyFile, ConfigError> {
    match load(path)? {
        ConfigFile::Proxy(p) => Ok(p),
        other => Err(wrong_kind(path, "proxy", other.kind())),
    }
}

pub fn load_topology(path: &Path) -> Result<TopologyFile, ConfigError> {
    match load(path)? {
        ConfigFile::Topology(t) => Ok(t),
        other => Err(wrong_kind(path, "topology", other.kind())),
    }
}

fn wrong_kind(path: &Path, want: &str, got: &str) -> ConfigError {
    ConfigError::Invalid(vec![Diagnostic {
        file: path.to_path_buf(),
        table: "<root>".into(),
        key: "<file>".into(),
        message: format!("expected a {want} config, found a {got} config"),
    }])
}

/// Parses `text` as if read from `path`; relative paths inside resolve
/// against the file's directory.
pub fn parse(text: &str, path: &Path) -> Result<ConfigFile, ConfigError> {
    let root: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string().trim_end().to_string(),
    })?;
    let mut cx = Checker { file: path.to_path_buf(), base: path.parent().map(Path::to_path_buf).unwrap_or_default(), diags: Vec::new() };
    let out = if root.get("link").is_some() || matches!(root.get("router"), Some(Value::Array(_))) {
        ConfigFile::Topology(cx.topology(&root))
    } else if root.contains_key("topic") || root.contains_key("proxy") || root.contains_key("router_peer") {
        ConfigFile::Proxy(cx.proxy(&root))
    } else if root.contains_key("router") {
        ConfigFile::Router(cx.router(&root))
    } else {
        cx.push("<root>", "<file>", "cannot tell the config kind: expected a [router], [router_peer]/[[topic]] or [[link]] table");
        return Err(ConfigError::Invalid(cx.diags));
    };
    if cx.diags.is_empty() {
        Ok(out)
    } else {
        Err(ConfigError::Invalid(cx.diags))
    }
}

/// Accepts `host:port` with a non-empty host and a numeric port.
pub fn valid_address(s: &str) -> bool {
    if s.parse::<std::net::SocketAddr>().is_ok() {
        return true;
    }
    match s.rsplit_once(':') {
        Some((host, port)) => {
            !host.is_empty()
                && port.parse::<u16>().is_ok()
                && host.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '.')
        }
        None => false,
    }
}

struct Checker {
    file: PathBuf,
    base: PathBuf,
    diags: Vec<Diagnostic>,
}

impl Checker {
    fn push(&mut self, table: &str, key: &str, message: impl Into<String>) {
        self.diags.push(Diagnostic {
            file: self.file.clone(),
            table: table.to_string(),
            key: key.to_string(),
            message: message.into(),
        });
    }

    fn table<'a>(&mut self, root: &'a Table, name: &str, required: bool) -> Option<&'a Table> {
        match root.get(name) {
            Some(Value::Table(t)) => Some(t),
            Some(_) => {
                self.push(name, "<table>", "must be a table");
                None
            }
            None => {
                if required {
                    self.push(name, "<table>", "missing table");
                }
                None
            }
        }
    }

    fn array<'a>(&mut self, root: &'a Table, name: &str) -> Vec<&'a Table> {
        match root.get(name) {
            None => Vec::new(),
            Some(Value::Array(items)) => items
                .iter()
                .enumerate()
                .filter_map(|(i, v)| match v {
                    Value::Table(t) => Some(t),
                    _ => {
                        self.push(&format!("{name}[{i}]"), "<table>", "must be a table");
                        None
                    }
                })
                .collect(),
            Some(_) => {
                self.push(name, "<table>", "must be an array of tables");
                Vec::new()
            }
        }
    }

    fn unknown_keys(&mut self, t: &Table, table: &str, allowed: &[&str]) {
        for k in t.keys() {
            if !allowed.contains(&k.as_str()) {
                self.push(table, k, format!("unknown key (expected one of: {})", allowed.join(", ")));
            }
        }
    }

    fn string(&mut self, t: &Table, table: &str, key: &str, required: bool) -> Option<String> {
        match t.get(key) {
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => {
                self.push(table, key, "must be a string");
                None
            }
            None => {
                if required {
                    self.push(table, key, "missing required key");
                }
                None
            }
        }
    }

    fn address(&mut self, t: &Table, table: &str, key: &str, required: bool) -> Option<String> {
        let s = self.string(t, table, key, required)?;
        if valid_address(&s) {
            Some(s)
        } else {
            self.push(table, key, format!("malformed address `{s}` (expected host:port)"));
            None
        }
    }

    fn parsed<T: std::str::FromStr<Err = String>>(&mut self, t: &Table, table: &str, key: &str, default: T) -> T {
        match self.string(t, table, key, false) {
            Some(s) => match s.parse() {
                Ok(v) => v,
                Err(e) => {
                    self.push(table, key, e);
                    default
                }
            },
            None => default,
        }
    }

    fn ttl(&mut self, t: &Table, table: &str, key: &str) -> u8 {
        match t.get(key) {
            None => DEFAULT_TTL,
            Some(Value::Integer(n)) if (1..=255).contains(n) => *n as u8,
            Some(_) => {
                self.push(table, key, "must be an integer between 1 and 255");
                DEFAULT_TTL
            }
        }
    }

    fn path(&self, s: &str) -> PathBuf {
        let p = PathBuf::from(s);
        if p.is_absolute() {
            p
        } else {
            self.base.join(p)
        }
    }

    fn keys(&mut self, root: &Table, need_identity: bool) -> KeysSection {
        let empty = Table::new();
        let t = self.table(root, "keys", true).unwrap_or(&empty);
        self.unknown_keys(t, "keys", &["key_dir", "anchor_cert", "identity"]);
        let key_dir = match self.string(t, "keys", "key_dir", true) {
            Some(d) => {
                let p = self.path(&d);
                if !p.is_dir() {
                    self.push("keys", "key_dir", format!("directory {} does not exist", p.display()));
                }
                p
            }
            None => PathBuf::new(),
        };
        let anchor_cert = self.string(t, "keys", "anchor_cert", false).map(|s| self.path(&s));
        let anchor_path = anchor_cert.clone().unwrap_or_else(|| keystore::cert_path(&key_dir, "anchor"));
        if key_dir.is_dir() || anchor_cert.is_some() {
            if let Err(e) = keystore::load_anchor(&anchor_path) {
                self.push("keys", "anchor_cert", format!("trust anchor unusable: {e}"));
            }
        }
        let identity = self.string(t, "keys", "identity", need_identity);
        if let Some(id) = &identity {
            if key_dir.is_dir() {
                for p in [keystore::key_path(&key_dir, id), keystore::cert_path(&key_dir, id)] {
                    if !p.is_file() {
                        self.push("keys", "identity", format!("{} not found", p.display()));
                    }
                }
            }
        }
        KeysSection { key_dir, anchor_cert, identity }
    }

    fn psk_exists(&self, keys: &KeysSection, id: &str) -> bool {
        keystore::psk_path(&keys.key_dir, id).is_file()
    }

    fn peer(&mut self, t: &Table, table: &str, keys: &KeysSection) -> Option<PeerConfig> {
        self.unknown_keys(t, table, &["address", "transport", "mode", "psk_ref"]);
        let address = self.address(t, table, "address", true);
        let transport = self.parsed(t, table, "transport", Transport::Tcp);
        let mode = self.parsed(t, table, "mode", TunnelMode::Shared);
        let psk_ref = self.string(t, table, "psk_ref", false);
        if let Some(r) = &psk_ref {
            if keys.key_dir.is_dir() && !self.psk_exists(keys, r) {
                self.push(table, "psk_ref", format!("pre-shared key `{r}` not found in {}", keys.key_dir.display()));
            }
        }
        Some(PeerConfig { address: address?, transport, mode, psk_ref })
    }

    fn router(&mut self, root: &Table) -> RouterFile {
        self.unknown_keys(root, "<root>", &["router", "peer", "keys"]);
        let keys = self.keys(root, false);
        let empty = Table::new();
        let r = self.table(root, "router", true).unwrap_or(&empty);
        self.unknown_keys(r, "router", &["listen_tcp", "listen_udp", "ttl_default", "admin"]);
        let listen_tcp = self.address(r, "router", "listen_tcp", false);
        let listen_udp = self.address(r, "router", "listen_udp", false);
        if !r.contains_key("listen_tcp") && !r.contains_key("listen_udp") {
            self.push("router", "listen_tcp", "at least one of listen_tcp or listen_udp is required");
        }
        let admin = self.address(r, "router", "admin", false);
        let ttl_default = self.ttl(r, "router", "ttl_default");
        let peers = self
            .array(root, "peer")
            .into_iter()
            .enumerate()
            .filter_map(|(i, t)| self.peer(t, &format!("peer[{i}]"), &keys))
            .collect();
        RouterFile { listen_tcp, listen_udp, admin, ttl_default, peers, keys }
    }

    fn topic(&mut self, t: &Table, table: &str, keys: &KeysSection) -> Option<TopicConfig> {
        self.unknown_keys(
            t,
            table,
            &["name", "type", "action", "visibility", "key_ref", "unique_suffix", "cert_ref", "author", "maintainer", "description"],
        );
        let name = self.string(t, table, "name", true);
        let ty = self.string(t, table, "type", true);
        for (k, v) in [("name", &name), ("type", &ty)] {
            if v.as_deref() == Some("") {
                self.push(table, k, "must not be empty");
            }
        }
        let action = match self.string(t, table, "action", true).as_deref() {
            Some("publish") => Some(Action::Publish),
            Some("subscribe") => Some(Action::Subscribe),
            Some(other) => {
                self.push(table, "action", format!("unknown action `{other}` (expected publish or subscribe)"));
                None
            }
            None => None,
        };
        let visibility = match self.string(t, table, "visibility", false).as_deref() {
            None | Some("public") => Visibility::Public,
            Some("private") => Visibility::Private,
            Some(other) => {
                self.push(table, "visibility", format!("unknown visibility `{other}` (expected public or private)"));
                Visibility::Public
            }
        };
        let key_ref = self.string(t, table, "key_ref", visibility == Visibility::Public);
        if let Some(r) = &key_ref {
            if keys.key_dir.is_dir() && !self.psk_exists(keys, r) {
                self.push(table, "key_ref", format!("pre-shared key `{r}` not found in {}", keys.key_dir.display()));
            }
        }
        let cert_ref = self.string(t, table, "cert_ref", false);
        if let Some(r) = &cert_ref {
            if keys.key_dir.is_dir() {
                match keystore::load_certificate(&keystore::cert_path(&keys.key_dir, r)) {
                    Ok(cert) => {
                        if let Ok(anchor) = keys.anchor() {
                            if anchor.verify(&cert).is_err() {
                                self.push(table, "cert_ref", format!("certificate `{r}` is not issued by the trust anchor"));
                            }
                        }
                    }
                    Err(e) => self.push(table, "cert_ref", format!("certificate `{r}`: {e}")),
                }
            }
        }
        let text = |cx: &mut Checker, k: &str| cx.string(t, table, k, false).unwrap_or_default();
        let unique_suffix = text(self, "unique_suffix");
        let author = text(self, "author");
        let maintainer = text(self, "maintainer");
        let description = text(self, "description");
        Some(TopicConfig {
            topic_name: name?,
            topic_type: ty?,
            action: action?,
            visibility,
            key_ref,
            unique_suffix,
            cert_ref,
            author,
            maintainer,
            description,
        })
    }

    fn topics(&mut self, root: &Table, prefix: &str, keys: &KeysSection) -> Vec<TopicConfig> {
        let items = self.array(root, "topic");
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for (i, t) in items.into_iter().enumerate() {
            let table = format!("{prefix}topic[{i}]");
            if let Some(tc) = self.topic(t, &table, keys) {
                if !seen.insert((tc.topic_name.clone(), tc.action)) {
                    self.push(&table, "name", format!("topic `{}` is configured twice with the same action", tc.topic_name));
                }
                out.push(tc);
            }
        }
        out
    }

    fn proxy(&mut self, root: &Table) -> ProxyFile {
        self.unknown_keys(root, "<root>", &["proxy", "router_peer", "local_bus", "topic", "keys"]);
        let keys = self.keys(root, true);
        let empty = Table::new();
        let p = self.table(root, "proxy", false).unwrap_or(&empty);
        self.unknown_keys(p, "proxy", &["ttl"]);
        let ttl = self.ttl(p, "proxy", "ttl");
        let rp = self.table(root, "router_peer", true).unwrap_or(&empty);
        let router_peer = self.peer(rp, "router_peer", &keys).unwrap_or_else(|| PeerConfig::tcp(""));
        let local_bus = match self.table(root, "local_bus", false) {
            Some(lb) => {
                self.unknown_keys(lb, "local_bus", &["listen"]);
                self.address(lb, "local_bus", "listen", true)
            }
            None => None,
        };
        let topics = self.topics(root, "", &keys);
        if topics.is_empty() && !root.contains_key("topic") {
            self.push("topic", "<table>", "at least one [[topic]] is required");
        }
        ProxyFile { router_peer, topics, local_bus, ttl, keys }
    }

    fn topology(&mut self, root: &Table) -> TopologyFile {
        self.unknown_keys(root, "<root>", &["router", "proxy", "link", "bench", "keys"]);
        let keys = self.keys(root, false);
        let mut ids = HashSet::new();
        let mut routers = Vec::new();
        for (i, t) in self.array(root, "router").into_iter().enumerate() {
            let table = format!("router[{i}]");
            self.unknown_keys(t, &table, &["id", "transport", "ttl_default"]);
            let Some(id) = self.string(t, &table, "id", true) else { continue };
            if !ids.insert(id.clone()) {
                self.push(&table, "id", format!("duplicate node id `{id}`"));
            }
            let transport = self.parsed(t, &table, "transport", Transport::Tcp);
            let ttl_default = self.ttl(t, &table, "ttl_default");
            routers.push(TopoRouter { id, transport, ttl_default });
        }
        if routers.is_empty() {
            self.push("router", "<table>", "a topology needs at least one [[router]]");
        }
        let router_ids: HashSet<String> = routers.iter().map(|r| r.id.clone()).collect();
        let mut proxies = Vec::new();
        for (i, t) in self.array(root, "proxy").into_iter().enumerate() {
            let table = format!("proxy[{i}]");
            self.unknown_keys(t, &table, &["id", "router", "identity", "mode", "topic"]);
            let id = self.string(t, &table, "id", true);
            let router = self.string(t, &table, "router", true);
            let identity = self.string(t, &table, "identity", true);
            let mode = self.parsed(t, &table, "mode", TunnelMode::Shared);
            if let Some(r) = &router {
                if !router_ids.contains(r) {
                    self.push(&table, "router", format!("no router with id `{r}`"));
                }
            }
            if let Some(id) = &id {
                if !ids.insert(id.clone()) {
                    self.push(&table, "id", format!("duplicate node id `{id}`"));
                }
            }
            let topics = self.topics(t, &format!("{table}."), &keys);
            if let (Some(id), Some(router), Some(identity)) = (id, router, identity) {
                proxies.push(TopoProxy { id, router, identity, mode, topics });
            }
        }
        let mut links = Vec::new();
        for (i, t) in self.array(root, "link").into_iter().enumerate() {
            let table = format!("link[{i}]");
            self.unknown_keys(t, &table, &["a", "b", "loss", "delay_ms"]);
            let a = self.string(t, &table, "a", true);
            let b = self.string(t, &table, "b", true);
            for (k, v) in [("a", &a), ("b", &b)] {
                if let Some(v) = v {
                    if !router_ids.contains(v) {
                        self.push(&table, k, format!("no router with id `{v}`"));
                    }
                }
            }
            if a.is_some() && a == b {
                self.push(&table, "b", "a link must join two different routers");
            }
            let loss = match t.get("loss") {
                None => 0.0,
                Some(Value::Float(f)) if (0.0..=1.0).contains(f) => *f,
                Some(Value::Integer(n)) if (0..=1).contains(n) => *n as f64,
                Some(_) => {
                    self.push(&table, "loss", "must be a number in [0, 1]");
                    0.0
                }
            };
            let delay_ms = match t.get("delay_ms") {
                None => 0,
                Some(Value::Integer(n)) if *n >= 0 => *n as u64,
                Some(_) => {
                    self.push(&table, "delay_ms", "must be a non-negative integer");
                    0
                }
            };
            if let (Some(a), Some(b)) = (a, b) {
                links.push(LinkSpec { a, b, loss, delay_ms });
            }
        }
        let bench = match self.table(root, "bench", false) {
            Some(t) => {
                self.unknown_keys(t, "bench", &["client", "server", "key_ref"]);
                let proxy_ids: HashSet<&str> = proxies.iter().map(|p| p.id.as_str()).collect();
                let client = self.string(t, "bench", "client", true);
                let server = self.string(t, "bench", "server", true);
                for (k, v) in [("client", &client), ("server", &server)] {
                    if let Some(v) = v {
                        if !proxy_ids.contains(v.as_str()) {
                            self.push("bench", k, format!("no proxy with id `{v}`"));
                        }
                    }
                }
                if client.is_some() && client == server {
                    self.push("bench", "server", "client and server must be different proxies");
                }
                let key_ref = self.string(t, "bench", "key_ref", true);
                if let Some(r) = &key_ref {
                    if keys.key_dir.is_dir() && !self.psk_exists(&keys, r) {
                        self.push("bench", "key_ref", format!("pre-shared key `{r}` not found in {}", keys.key_dir.display()));
                    }
                }
                match (client, server, key_ref) {
                    (Some(client), Some(server), Some(key_ref)) => Some(BenchSpec { client, server, key_ref }),
                    _ => None,
                }
            }
            None => None,
        };
        TopologyFile { routers, proxies, links, bench, keys }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::fixture_dir;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn keys_block() -> String {
        format!("[keys]\nkey_dir = {:?}\n", fixture_dir().display().to_string())
    }

    #[test]
    fn valid_router_config() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "[router]\nlisten_tcp = \"0.0.0.0:7400\"\nttl_default = 16\n\n[[peer]]\naddress = \"10.0.0.2:7400\"\ntransport = \"udp\"\nmode = \"dedicated\"\npsk_ref = \"tunnel\"\n\n{}",
            keys_block()
        );
        let r = load_router(&write(dir.path(), "r.toml", &text)).unwrap();
        assert_eq!(r.ttl_default, 16);
        assert_eq!(r.peers[0].transport, Transport::Udp);
        assert_eq!(r.peers[0].mode, TunnelMode::Dedicated);
        assert!(r.settings().is_ok());
    }

    #[test]
    fn malformed_peer_address_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!("[router]\nlisten_tcp = \"0.0.0.0:7400\"\n[[peer]]\naddress = \"nope\"\n{}", keys_block());
        let err = load(&write(dir.path(), "r.toml", &text)).unwrap_err();
        let d = err.diagnostics();
        assert_eq!(d.len(), 1, "{d:?}");
        assert!(d[0].contains("r.toml") && d[0].contains("[peer[0]] address") && d[0].contains("malformed"), "{}", d[0]);
    }

    #[test]
    fn topic_missing_key_ref_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "[router_peer]\naddress = \"127.0.0.1:7400\"\n[[topic]]\nname = \"/camera\"\ntype = \"t\"\naction = \"publish\"\n{}identity = \"alice\"\n",
            keys_block()
        );
        let err = load(&write(dir.path(), "p.toml", &text)).unwrap_err();
        let d = err.diagnostics();
        assert_eq!(d.len(), 1, "{d:?}");
        assert!(d[0].contains("[topic[0]] key_ref"), "{}", d[0]);
    }

    #[test]
    fn valid_proxy_and_private_topic_without_key() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "[router_peer]\naddress = \"localhost:7400\"\nmode = \"dedicated\"\n[local_bus]\nlisten = \"127.0.0.1:7500\"\n\
             [[topic]]\nname = \"/camera\"\ntype = \"t\"\naction = \"subscribe\"\nkey_ref = \"camera\"\ncert_ref = \"alice\"\n\
             [[topic]]\nname = \"/joints\"\ntype = \"t\"\naction = \"publish\"\nvisibility = \"private\"\n{}identity = \"bob\"\n",
            keys_block()
        );
        let p = load_proxy(&write(dir.path(), "p.toml", &text)).unwrap();
        assert_eq!(p.topics.len(), 2);
        assert_eq!(p.topics[1].visibility, Visibility::Private);
        assert_eq!(p.settings().identity, "bob");
    }

    #[test]
    fn collects_every_problem() {
        let dir = tempfile::tempdir().unwrap();
        let text = "[router]\nlisten_tcp = \"x\"\nttl_default = 0\nbogus = 1\n[[peer]]\ntransport = \"sctp\"\n[keys]\nkey_dir = \"/does/not/exist\"\n";
        let err = load(&write(dir.path(), "r.toml", text)).unwrap_err();
        let d = err.diagnostics().join("\n");
        for needle in ["listen_tcp", "ttl_default", "bogus", "peer[0]] address", "peer[0]] transport", "key_dir"] {
            assert!(d.contains(needle), "missing {needle} in\n{d}");
        }
    }

    #[test]
    fn topology_links_and_loss() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "[[router]]\nid = \"r1\"\n[[router]]\nid = \"r2\"\ntransport = \"udp\"\n[[link]]\na = \"r1\"\nb = \"r2\"\nloss = 0.05\ndelay_ms = 3\n\
             [[proxy]]\nid = \"robot\"\nrouter = \"r1\"\nidentity = \"alice\"\n[[proxy.topic]]\nname = \"/c\"\ntype = \"t\"\naction = \"publish\"\nkey_ref = \"camera\"\n\
             [[proxy]]\nid = \"cloud\"\nrouter = \"r2\"\nidentity = \"bob\"\n[bench]\nclient = \"robot\"\nserver = \"cloud\"\nkey_ref = \"camera\"\n{}",
            keys_block()
        );
        let t = load_topology(&write(dir.path(), "t.toml", &text)).unwrap();
        assert_eq!(t.links[0].loss, 0.05);
        assert_eq!(t.proxies[0].topics.len(), 1);
        assert_eq!(t.bench.as_ref().unwrap().server, "cloud");

        let bad = text.replace("loss = 0.05", "loss = 1.5").replace("b = \"r2\"", "b = \"r9\"");
        let d = load(&write(dir.path(), "t2.toml", &bad)).unwrap_err().diagnostics().join("\n");
        assert!(d.contains("[link[0]] loss") && d.contains("[link[0]] b"), "{d}");
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = parse("[router\n", Path::new("x.toml")).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }));
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn address_forms() {
        for ok in ["127.0.0.1:1", "[::1]:7400", "router-2.lab:7400", "localhost:0"] {
            assert!(valid_address(ok), "{ok}");
        }
        for bad in ["", "nope", ":7400", "host:", "host:99999", "a b:1"] {
            assert!(!valid_address(bad), "{bad}");
        }
    }
}
