//! `sgc`: router, proxy, naming, benchmarks and key utilities.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 runtime error.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use sgc_core::config::{self, ConfigError, ConfigFile};
use sgc_core::crypto::{Certificate, KeyPair, SymmetricKey};
use sgc_core::keystore::{self, KeyStoreError};
use sgc_core::name::{derive_name, parse_metadata_json};
use sgc_core::proxy::{PayloadMode, Proxy};
use sgc_core::router::Router;
use sgc_core::testbed::{self, Topology};
use sgc_core::transport::LinkContext;
use tracing_subscriber::EnvFilter;

const OVERVIEW: &str = "\
Flags by command:
  router    --config <FILE> [--stats-every <SECS>]
  proxy     --config <FILE> [--stats-every <SECS>]
  name      [FILE|-] [--short]
  rib dump  --admin <ADDR> | --config <FILE>
  bench     rtt|throughput|rib --config <FILE> [--size <N>] [--count <N>]
            [--duration <SECS>] [--rate <HZ>] [--payload sealed|plain]
  keygen    <SUBJECT> [--out-dir <DIR>] [--init-anchor | --psk] [--anchor <ID>] [--force]
  validate  --config <FILE>
  verify    --cert <FILE> --anchor <FILE>

Environment:
  SGC_CONFIG  default for --config
  SGC_LOG     default for --log-level

Exit codes: 0 ok, 1 configuration or input error, 2 runtime error.";

#[derive(Parser)]
#[command(name = "sgc", version, about = "Secure global connectivity for pub/sub robot networks", after_help = OVERVIEW)]
struct Cli {
    /// Log filter (e.g. info, debug, sgc_core=trace). Logs are JSON lines on stderr.
    #[arg(long, global = true, env = "SGC_LOG", default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Config file (TOML).
    #[arg(long, short, env = "SGC_CONFIG")]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run a router until SIGINT.
    Router {
        #[command(flatten)]
        config: ConfigArg,
        /// Print router stats as a JSON line every N seconds.
        #[arg(long, value_name = "SECS")]
        stats_every: Option<u64>,
    },
    /// Run a proxy until SIGINT.
    Proxy {
        #[command(flatten)]
        config: ConfigArg,
        /// Print proxy stats as a JSON line every N seconds.
        #[arg(long, value_name = "SECS")]
        stats_every: Option<u64>,
    },
    /// Print the 64-hex name of a topic metadata JSON document.
    Name {
        /// Metadata document; `-` or omitted reads stdin.
        file: Option<PathBuf>,
        /// Print the abbreviated form instead.
        #[arg(long)]
        short: bool,
    },
    /// Inspect a running router.
    Rib {
        #[command(subcommand)]
        command: RibCommand,
    },
    /// Run a benchmark over an in-process topology.
    Bench {
        kind: BenchKind,
        #[command(flatten)]
        config: ConfigArg,
        /// Message size in bytes.
        #[arg(long, default_value_t = 1000)]
        size: usize,
        /// Messages for rtt; preloaded table records for rib.
        #[arg(long)]
        count: Option<usize>,
        /// Seconds of sustained publishing for throughput.
        #[arg(long, value_name = "SECS", default_value_t = 5.0)]
        duration: f64,
        /// Offered messages per second for throughput (default: as fast as delivered).
        #[arg(long, value_name = "HZ")]
        rate: Option<f64>,
        /// Payload handling: sealed, or plain forwarding as a baseline.
        #[arg(long, default_value = "sealed")]
        payload: PayloadMode,
    },
    /// Generate a key pair and certificate, a trust anchor, or a pre-shared key.
    Keygen {
        /// Identifier; files are named <subject>.key.pem, <subject>.cert.json, <subject>.psk.
        subject: String,
        /// Key directory to write into.
        #[arg(long, value_name = "DIR", default_value = ".")]
        out_dir: PathBuf,
        /// Create a new self-signed trust anchor instead of an anchor-issued identity.
        #[arg(long, conflicts_with = "psk")]
        init_anchor: bool,
        /// Generate a pre-shared symmetric key instead of a key pair.
        #[arg(long)]
        psk: bool,
        /// Identifier of the issuing anchor inside the key directory.
        #[arg(long, default_value = "anchor")]
        anchor: String,
        /// Overwrite existing files.
        #[arg(long)]
        force: bool,
    },
    /// Statically check a router, proxy or topology config.
    Validate {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Check that a certificate was issued by a trust anchor.
    Verify {
        /// Certificate to check.
        #[arg(long)]
        cert: PathBuf,
        /// Trust anchor certificate.
        #[arg(long)]
        anchor: PathBuf,
    },
}

#[derive(Subcommand)]
enum RibCommand {
    /// Print table entries as JSON lines.
    Dump {
        /// Router admin address; defaults to `admin` from the router config.
        #[arg(long, value_name = "ADDR")]
        admin: Option<String>,
        /// Router config to read the admin address from.
        #[arg(long, short, env = "SGC_CONFIG")]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchKind {
    Rtt,
    Throughput,
    Rib,
}

/// A failure caused by bad input rather than by the running system.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct InputError(String);

fn input(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let input = e.chain().any(|c| {
        c.is::<ConfigError>()
            || c.is::<InputError>()
            || c.is::<KeyStoreError>()
            || c.is::<sgc_core::name::NameError>()
            || matches!(c.downcast_ref::<testbed::TestbedError>(), Some(testbed::TestbedError::Invalid(_) | testbed::TestbedError::NoBench))
    });
    if input {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let filter = EnvFilter::try_new(&cli.log_level).unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt().json().with_env_filter(filter).with_writer(std::io::stderr).init();

    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(ConfigError::Invalid(diags)) = e.downcast_ref::<ConfigError>() {
                for d in diags {
                    eprintln!("error: {d}");
                }
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Name { file, short } => name(file.as_deref(), short),
        Command::Keygen { subject, out_dir, init_anchor, psk, anchor, force } => {
            keygen(&subject, &out_dir, init_anchor, psk, &anchor, force)
        }
        Command::Validate { config } => validate(&config.config),
        Command::Verify { cert, anchor } => verify(&cert, &anchor),
        Command::Rib { command: RibCommand::Dump { admin, config } } => rib_dump(admin, config.as_deref()),
        Command::Router { config, stats_every } => runtime()?.block_on(router(&config.config, stats_every)),
        Command::Proxy { config, stats_every } => runtime()?.block_on(proxy(&config.config, stats_every)),
        Command::Bench { kind, config, size, count, duration, rate, payload } => {
            runtime()?.block_on(bench(kind, &config.config, size, count, duration, rate, payload))
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().context("starting async runtime")
}

fn name(file: Option<&Path>, short: bool) -> Result<()> {
    let text = match file {
        None => read_stdin()?,
        Some(p) if p == Path::new("-") => read_stdin()?,
        Some(p) => std::fs::read_to_string(p).map_err(|e| input(format!("{}: {e}", p.display())))?,
    };
    let n = derive_name(&parse_metadata_json(&text)?)?;
    println!("{}", if short { n.short() } else { n.to_hex() });
    Ok(())
}

fn read_stdin() -> Result<String> {
    let mut s = String::new();
    std::io::stdin().read_to_string(&mut s).context("reading stdin")?;
    Ok(s)
}

fn keygen(subject: &str, dir: &Path, init_anchor: bool, psk: bool, anchor: &str, force: bool) -> Result<()> {
    if subject.is_empty() || subject.contains(['/', '\\']) {
        return Err(input(format!("invalid subject `{subject}`")));
    }
    std::fs::create_dir_all(dir).map_err(|e| input(format!("{}: {e}", dir.display())))?;
    if psk {
        let path = keystore::psk_path(dir, subject);
        keystore::write_new(&path, &SymmetricKey::generate(subject).to_pem(), force)?;
        println!("{}", json!({ "subject": subject, "files": [path] }));
        return Ok(());
    }
    let (key_path, cert_path) = (keystore::key_path(dir, subject), keystore::cert_path(dir, subject));
    for p in [&key_path, &cert_path] {
        if p.exists() && !force {
            return Err(KeyStoreError::Exists(p.clone()).into());
        }
    }
    let key = KeyPair::generate().context("generating key pair")?;
    let cert = if init_anchor {
        Certificate::self_signed(subject, &key)
    } else {
        let issuer = keystore::load_keypair(&keystore::key_path(dir, anchor))
            .with_context(|| format!("loading anchor `{anchor}` (create one with --init-anchor)"))?;
        Certificate::issue(subject, &key, &issuer)
    };
    keystore::write_new(&key_path, &key.to_pem(), force)?;
    keystore::write_new(&cert_path, &(cert.to_canonical_json() + "\n"), force)?;
    println!(
        "{}",
        json!({
            "subject": subject,
            "fingerprint": hex::encode(cert.fingerprint()),
            "files": [key_path, cert_path],
        })
    );
    Ok(())
}

fn validate(path: &Path) -> Result<()> {
    let file = match config::load(path) {
        Ok(f) => f,
        Err(e) => {
            let diags = e.diagnostics();
            for d in &diags {
                println!("{d}");
            }
            return Err(input(format!("{}: {} problem(s)", path.display(), diags.len())));
        }
    };
    let detail = match &file {
        ConfigFile::Router(r) => format!("{} peer(s)", r.peers.len()),
        ConfigFile::Proxy(p) => format!("{} topic(s)", p.topics.len()),
        ConfigFile::Topology(t) => format!("{} router(s), {} proxy(ies), {} link(s)", t.routers.len(), t.proxies.len(), t.links.len()),
    };
    println!("ok: {} {} config, {detail}", path.display(), file.kind());
    Ok(())
}

fn verify(cert: &Path, anchor: &Path) -> Result<()> {
    let c = keystore::load_certificate(cert)?;
    let a = keystore::load_anchor(anchor)?;
    a.verify(&c).map_err(|e| input(format!("{}: not issued by {}: {e}", cert.display(), anchor.display())))?;
    println!("ok: {} issued by {}", c.subject, a.certificate().subject);
    Ok(())
}

fn rib_dump(admin: Option<String>, config: Option<&Path>) -> Result<()> {
    let addr = match (admin, config) {
        (Some(a), _) => a,
        (None, Some(p)) => config::load_router(p)?
            .admin
            .ok_or_else(|| input(format!("{}: [router] has no admin address", p.display())))?,
        (None, None) => return Err(input("rib dump needs --admin or --config")),
    };
    let mut s = TcpStream::connect(&addr).with_context(|| format!("connecting to admin endpoint {addr}"))?;
    s.set_read_timeout(Some(Duration::from_secs(10)))?;
    s.write_all(b"rib dump\n")?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for line in BufReader::new(s).lines() {
        let line = line.context("reading from admin endpoint")?;
        if line.is_empty() {
            break;
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

async fn stats_loop<T: serde::Serialize>(every: Option<u64>, snapshot: impl Fn() -> T) {
    let Some(secs) = every.filter(|s| *s > 0) else {
        return std::future::pending().await;
    };
    let mut tick = tokio::time::interval(Duration::from_secs(secs));
    tick.tick().await;
    loop {
        tick.tick().await;
        if let Ok(line) = serde_json::to_string(&snapshot()) {
            println!("{line}");
        }
    }
}

async fn router(path: &Path, stats_every: Option<u64>) -> Result<()> {
    let file = config::load_router(path)?;
    let settings = file.settings()?;
    let r = Router::start(settings, LinkContext::new()).await.context("starting router")?;
    let stats = r.clone();
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = stats_loop(stats_every, move || stats.stats()) => {}
    }
    tracing::info!("shutting down");
    r.shutdown();
    tokio::time::sleep(Duration::from_millis(100)).await;
    Ok(())
}

async fn proxy(path: &Path, stats_every: Option<u64>) -> Result<()> {
    let file = config::load_proxy(path)?;
    let p = Proxy::start(file.settings(), LinkContext::new()).await.context("starting proxy")?;
    let stats = p.clone();
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = stats_loop(stats_every, move || stats.stats()) => {}
    }
    tracing::info!("shutting down");
    p.shutdown();
    tokio::time::sleep(Duration::from_millis(100)).await;
    Ok(())
}

async fn bench(
    kind: BenchKind,
    path: &Path,
    size: usize,
    count: Option<usize>,
    duration: f64,
    rate: Option<f64>,
    payload: PayloadMode,
) -> Result<()> {
    let file = config::load_topology(path)?;
    if file.bench.is_none() {
        return Err(input(format!("{}: benchmarks need a [bench] table naming client, server and key_ref", path.display())));
    }
    if !(duration.is_finite() && duration > 0.0) {
        return Err(input("--duration must be positive"));
    }
    if rate.is_some_and(|r| !(r.is_finite() && r > 0.0)) {
        return Err(input("--rate must be positive"));
    }
    let tb = testbed::run_topology(Topology::from_file(&file)?.with_payload(payload)).await?;
    let report = match kind {
        BenchKind::Rtt => serde_json::to_value(testbed::bench_rtt(&tb, size, count.unwrap_or(100)).await?)?,
        BenchKind::Throughput => {
            let d = Duration::from_secs_f64(duration);
            let r = match rate {
                Some(hz) => testbed::bench_throughput_paced(&tb, size, d, hz).await?,
                None => testbed::bench_throughput(&tb, size, d).await?,
            };
            serde_json::to_value(r)?
        }
        BenchKind::Rib => serde_json::to_value(testbed::bench_rib(&tb, count.unwrap_or(10_000)).await?)?,
    };
    tb.shutdown();
    println!("{report}");
    Ok(())
}
