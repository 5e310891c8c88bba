//! End-to-end acceptance checks. Runs the criteria one after another so the
//! timing checks do not compete for the CPU, printing one PASS/FAIL line each.

mod common;

use std::collections::{HashMap, HashSet};
use std::future::Future;
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::Bytes;
use common::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use sgc_core::config::BenchSpec;
use sgc_core::crypto::{self, CryptoError, Envelope};
use sgc_core::name::{derive_name, GdpName, TopicMetadata};
use sgc_core::packet::{self, PacketHeader, PacketType, FLAG_SEALED};
use sgc_core::proxy::{BusMessage, Origin, PayloadMode};
use sgc_core::router::{RouterEvent, DEFAULT_TTL};
use sgc_core::testbed::*;
use sgc_core::transport::{LinkContext, TunnelMode};

type Outcome = Result<String, String>;

const CAMERA: &str = "/camera";
const LIMIT: Duration = Duration::from_secs(240);

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

async fn criterion<F>(n: u32, title: &str, check: F) -> bool
where
    F: Future<Output = Outcome> + Send + 'static,
{
    let started = Instant::now();
    let outcome = match tokio::time::timeout(LIMIT, tokio::spawn(check)).await {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => Err(format!("panicked: {e}")),
        Err(_) => Err(format!("did not finish within {LIMIT:?}")),
    };
    let secs = started.elapsed().as_secs_f64();
    match &outcome {
        Ok(d) => println!("criterion {n:>2} [{title}]: PASS {d} ({secs:.1}s)"),
        Err(d) => println!("criterion {n:>2} [{title}]: FAIL {d} ({secs:.1}s)"),
    }
    outcome.is_ok()
}

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let passed = rt.block_on(async {
        vec![
            criterion(1, "six-step flow", six_step_flow()).await,
            criterion(2, "rib scale", rib_scale()).await,
            criterion(3, "throughput overhead", throughput_overhead()).await,
            criterion(4, "latency overhead", latency_overhead()).await,
            criterion(5, "name properties", name_properties()).await,
            criterion(6, "security envelope", security_envelope()).await,
            criterion(7, "isolation", isolation()).await,
            criterion(8, "churn resilience", churn()).await,
            criterion(9, "zero-copy forwarding", zero_copy()).await,
            criterion(10, "loop safety", loop_safety()).await,
        ]
    });
    let ok = passed.iter().filter(|p| **p).count();
    println!("acceptance: {ok}/{} criteria passed", passed.len());
    rt.shutdown_timeout(Duration::from_secs(1));
    if ok != passed.len() {
        std::process::exit(1);
    }
}

async fn six_step_flow() -> Outcome {
    let wait = Duration::from_secs(5);
    let a = router(&[]).await;
    let b = router(&[a.tcp_addr().unwrap()]).await;
    settle(&[&a, &b], 1).await;

    let robot = proxy(a.tcp_addr().unwrap(), "alice", vec![pub_topic(CAMERA)]).await;
    let n = robot.topic_name(CAMERA).unwrap();
    if !eventually(wait, || a.rib().lookup(&n).is_some() && b.rib().lookup(&n).is_some()).await {
        return Err("advertisement did not reach both routers".into());
    }
    let cloud = proxy(b.tcp_addr().unwrap(), "bob", vec![sub_topic(CAMERA)]).await;
    if !eventually(wait, || a.rib().lookup(&n).is_some_and(|e| !e.sinks.is_empty())).await {
        return Err("subscribe did not register a sink at the publisher's router".into());
    }

    let mut rx = cloud.bus().subscribe(CAMERA);
    let mut worst = Duration::ZERO;
    let mut first = None;
    for i in 0..20u8 {
        let t0 = Instant::now();
        robot.publish(CAMERA, vec![i; 1000]);
        let got = match tokio::time::timeout(Duration::from_secs(1), rx.recv()).await {
            Ok(Ok(m)) => m,
            _ => return Err(format!("message {i} was not delivered")),
        };
        let dt = t0.elapsed();
        if got.origin != Origin::Mesh || got.data[..] != [i; 1000][..] {
            return Err(format!("message {i} arrived altered"));
        }
        first.get_or_insert(dt);
        worst = worst.max(dt);
    }
    let first = first.unwrap();
    verdict(
        worst <= Duration::from_millis(100),
        format!("first delivery {:.2} ms, worst of 20 {:.2} ms (limit 100 ms)", ms(first), ms(worst)),
    )
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

async fn rib_scale() -> Outcome {
    let tb = run_topology(reference_topology()).await.map_err(|e| e.to_string())?;
    let r = bench_rib(&tb, 10_000).await.map_err(|e| e.to_string())?;
    tb.shutdown();
    let (adv, sub, start) = (r.advertise_p50 * 1e3, r.subscribe_p50 * 1e3, r.startup_to_first_message * 1e3);
    verdict(
        adv <= 4.0 && sub <= 2.0 && start <= 10.0,
        format!(
            "{} records: advertise p50 {adv:.3} ms (<= 4), subscribe p50 {sub:.3} ms (<= 2), startup to first message {start:.2} ms (<= 10)",
            r.records
        ),
    )
}

async fn bench_topology(mode: PayloadMode) -> Result<Testbed, String> {
    run_topology(reference_topology().with_payload(mode)).await.map_err(|e| e.to_string())
}

async fn throughput_overhead() -> Outcome {
    let started = Instant::now();
    let window = Duration::from_secs(5);
    let mut rates = HashMap::new();
    for mode in [PayloadMode::Plain, PayloadMode::Sealed] {
        let tb = bench_topology(mode).await?;
        let r = bench_throughput(&tb, 1000, window).await.map_err(|e| e.to_string())?;
        tb.shutdown();
        rates.insert(mode, r);
    }
    let runtime = started.elapsed();
    let (plain, sealed) = (&rates[&PayloadMode::Plain], &rates[&PayloadMode::Sealed]);
    let ratio = sealed.throughput / plain.throughput;

    // Not part of the verdict: both pipelines offered the same moderate rate.
    let mut paced = Vec::new();
    for mode in [PayloadMode::Plain, PayloadMode::Sealed] {
        let tb = bench_topology(mode).await?;
        let r = bench_throughput_paced(&tb, 1000, Duration::from_secs(3), 330.0).await.map_err(|e| e.to_string())?;
        tb.shutdown();
        paced.push(r.throughput);
    }
    verdict(
        ratio >= 0.85 && runtime < Duration::from_secs(60),
        format!(
            "saturated 1000 B: sealed {:.0} msg/s, plain {:.0} msg/s, ratio {ratio:.3} (need >= 0.85), measured in {:.1}s; \
             at an offered 330 msg/s: sealed {:.1}, plain {:.1}",
            sealed.throughput,
            plain.throughput,
            runtime.as_secs_f64(),
            paced[1],
            paced[0]
        ),
    )
}

async fn latency_overhead() -> Outcome {
    let mut p50 = HashMap::new();
    for mode in [PayloadMode::Plain, PayloadMode::Sealed] {
        let tb = bench_topology(mode).await?;
        let r = bench_rtt(&tb, 8000, 100).await.map_err(|e| e.to_string())?;
        tb.shutdown();
        if r.count - r.loss < 50 {
            return Err(format!("{mode:?}: only {} of {} echoes returned", r.count - r.loss, r.count));
        }
        p50.insert(mode, (r.rtt_p50.unwrap(), r.rtt_p99.unwrap()));
    }
    let (plain, sealed) = (p50[&PayloadMode::Plain], p50[&PayloadMode::Sealed]);
    let ratio = sealed.0 / plain.0;
    verdict(
        ratio <= 1.5,
        format!(
            "8000 B over 100 echoes: sealed p50 {:.3} ms (p99 {:.3}), plain p50 {:.3} ms (p99 {:.3}), ratio {ratio:.2} (need <= 1.5)",
            sealed.0 * 1e3,
            sealed.1 * 1e3,
            plain.0 * 1e3,
            plain.1 * 1e3
        ),
    )
}

fn random_text(rng: &mut StdRng, len: usize) -> String {
    (0..len).map(|_| rng.sample(rand::distributions::Alphanumeric) as char).collect()
}

fn random_meta(rng: &mut StdRng) -> TopicMetadata {
    let mut m = TopicMetadata::new(format!("/{}", random_text(rng, 8)), random_text(rng, 12), rng.gen());
    m.author = random_text(rng, 6);
    m.maintainer = random_text(rng, 6);
    m.description = random_text(rng, 20);
    m.unique_suffix = random_text(rng, 4);
    m
}

fn flip_one_char(rng: &mut StdRng, m: &TopicMetadata) -> TopicMetadata {
    let mut out = m.clone();
    let field = match rng.gen_range(0..6) {
        0 => &mut out.topic_name,
        1 => &mut out.topic_type,
        2 => &mut out.author,
        3 => &mut out.maintainer,
        4 => &mut out.description,
        _ => &mut out.unique_suffix,
    };
    let mut chars: Vec<char> = field.chars().collect();
    let i = rng.gen_range(0..chars.len());
    loop {
        let c = rng.sample(rand::distributions::Alphanumeric) as char;
        if c != chars[i] {
            chars[i] = c;
            break;
        }
    }
    *field = chars.into_iter().collect();
    out
}

fn name_in_subprocess(doc: &std::path::Path) -> Result<String, String> {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_sgc"))
        .args(["name", doc.to_str().unwrap()])
        .env("SGC_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
}

async fn name_properties() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let meta = random_meta(&mut rng);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let doc = dir.path().join("meta.json");
    let json = serde_json::json!({
        "topic_name": meta.topic_name, "topic_type": meta.topic_type, "author": meta.author,
        "maintainer": meta.maintainer, "description": meta.description, "unique_suffix": meta.unique_suffix,
        "cert_fingerprint": hex::encode(meta.cert_fingerprint),
    });
    std::fs::write(&doc, json.to_string()).map_err(|e| e.to_string())?;
    let (p1, p2) = (name_in_subprocess(&doc)?, name_in_subprocess(&doc)?);
    let here = derive_name(&meta).unwrap().to_hex();
    let deterministic = p1 == p2 && p1 == here;

    let trials = 1000;
    let mut total = 0u64;
    let mut min = u32::MAX;
    for _ in 0..trials {
        let base = random_meta(&mut rng);
        let d = derive_name(&base).unwrap().hamming_distance(&derive_name(&flip_one_char(&mut rng, &base)).unwrap());
        total += d as u64;
        min = min.min(d);
    }
    let mean = total as f64 / trials as f64;

    let count = 100_000;
    let mut metas = HashSet::with_capacity(count);
    while metas.len() < count {
        metas.insert(random_meta(&mut rng));
    }
    let names: HashSet<GdpName> = metas.iter().map(|m| derive_name(m).unwrap()).collect();

    verdict(
        deterministic && (112.0..=144.0).contains(&mean) && min >= 1 && names.len() == count,
        format!(
            "two processes agree: {deterministic}; avalanche mean {mean:.2} bits over {trials} flips (min {min}); {} distinct names from {count} metadata",
            names.len()
        ),
    )
}

async fn security_envelope() -> Outcome {
    let fake = FakeRouter::start().await;
    let robot = proxy(fake.addr, "alice", vec![pub_topic(CAMERA)]).await;
    let cloud = proxy(fake.addr, "bob", vec![sub_topic(CAMERA)]).await;
    let mut rng = StdRng::seed_from_u64(6);

    let payload: Vec<u8> = (0..1000).map(|_| rng.gen()).collect();
    let pkt = robot.local_to_global(&BusMessage::local(CAMERA, "sensor_msgs/CompressedImage", payload)).unwrap();
    let wire = pkt.encode().unwrap();
    if cloud.global_to_local(&packet::decode(Bytes::from(wire.clone())).unwrap()).is_err() {
        return Err("untampered packet was rejected".into());
    }
    // Every byte is covered except the hop counter, which routers rewrite.
    const TTL_BYTE: usize = 5;
    let trials = 10_000;
    let mut rejected = 0;
    for _ in 0..trials {
        let mut m = wire.clone();
        let pos = loop {
            let p = rng.gen_range(0..m.len());
            if p != TTL_BYTE {
                break p;
            }
        };
        m[pos] ^= rng.gen_range(1..=255u8);
        match packet::decode(Bytes::from(m)) {
            Err(_) => rejected += 1,
            Ok(p) if cloud.global_to_local(&p).is_err() => rejected += 1,
            Ok(_) => {}
        }
    }

    let mut roundtrips = 0;
    let sizes = [0usize, 1, 1000, 65_536, 1 << 20];
    for size in sizes {
        let data: Vec<u8> = (0..size).map(|_| rng.gen()).collect();
        let pkt = robot.local_to_global(&BusMessage::local(CAMERA, "sensor_msgs/CompressedImage", data.clone())).unwrap();
        let back = packet::decode(Bytes::from(pkt.encode().unwrap())).unwrap();
        if cloud.global_to_local(&back).is_ok_and(|m| m.data[..] == data[..]) {
            roundtrips += 1;
        }
    }

    let f = fixtures();
    let mut wrong_cert_rejections = 0;
    let wrong_trials = 100;
    for i in 0..wrong_trials {
        let n = GdpName::from_bytes(rng.gen());
        let mut h = PacketHeader::new(PacketType::Data, n, n, DEFAULT_TTL);
        h.flags = FLAG_SEALED;
        let body: Vec<u8> = (0..rng.gen_range(0..2000)).map(|_| rng.gen()).collect();
        let (signer, wrong) = if i % 2 == 0 { (&f.alice, [&f.bob_cert, &f.mallory_cert]) } else { (&f.mallory, [&f.alice_cert, &f.bob_cert]) };
        let env: Envelope = crypto::seal(&body, &f.camera_key, signer, &h.covered_bytes());
        if wrong.iter().all(|c| crypto::open(&env, &f.camera_key, c, &h.covered_bytes()) == Err(CryptoError::Authenticity)) {
            wrong_cert_rejections += 1;
        }
    }

    verdict(
        rejected == trials && roundtrips == sizes.len() && wrong_cert_rejections == wrong_trials,
        format!(
            "{rejected}/{trials} single-byte mutations rejected; {roundtrips}/{} round trips up to 1 MiB intact; \
             {wrong_cert_rejections}/{wrong_trials} envelopes rejected under the wrong certificates",
            sizes.len()
        ),
    )
}

async fn isolation() -> Outcome {
    let wait = Duration::from_secs(5);
    let tap = Arc::new(Tap::default());
    let a = router(&[]).await;
    let b = router(&[a.tcp_addr().unwrap()]).await;
    settle(&[&a, &b], 1).await;
    let ctx = LinkContext::new().with_shaper(tap.clone());
    let topics = vec![pub_topic(CAMERA), pub_topic("/joint_states").private()];
    let robot = proxy_with(a.tcp_addr().unwrap(), "alice", topics, TunnelMode::Dedicated, ctx).await;
    let cloud = proxy(b.tcp_addr().unwrap(), "bob", vec![sub_topic(CAMERA), sub_topic("/joint_states")]).await;
    let secret = robot.topic_name("/joint_states").unwrap();
    let public = robot.topic_name(CAMERA).unwrap();
    if !eventually(wait, || a.rib().lookup(&public).is_some_and(|e| !e.sinks.is_empty())).await {
        return Err("public topic never connected".into());
    }

    let mut local = robot.bus().subscribe("/joint_states");
    let mut remote_secret = cloud.bus().subscribe("/joint_states");
    let mut remote = cloud.bus().subscribe(CAMERA);
    let n = 200;
    for i in 0..n {
        robot.publish("/joint_states", vec![i as u8; 64]);
        robot.publish(CAMERA, vec![i as u8; 64]);
    }
    let mut local_seen = 0;
    let mut remote_seen = 0;
    for _ in 0..n {
        if matches!(local.recv().await, Ok(m) if m.origin == Origin::Local) {
            local_seen += 1;
        }
        if tokio::time::timeout(wait, remote.recv()).await.is_ok() {
            remote_seen += 1;
        }
    }
    tokio::time::sleep(Duration::from_millis(200)).await;
    robot.shutdown();
    cloud.shutdown();
    tokio::time::sleep(Duration::from_millis(100)).await;

    let headers = tap.headers.lock().clone();
    let leaked = headers.iter().filter(|(_, s, d)| *s == secret || *d == secret).count();
    let public_data = headers.iter().filter(|(t, s, _)| *t == PacketType::Data && *s == public).count();
    let known = a.rib().lookup(&secret).is_some() || b.rib().lookup(&secret).is_some();
    let crossed = remote_secret.try_recv().is_ok();
    verdict(
        leaked == 0 && !known && !crossed && local_seen == n && remote_seen == n,
        format!(
            "{} mesh packets captured ({public_data} public Data), {leaked} carried the private name; \
             private delivered locally {local_seen}/{n}, public delivered remotely {remote_seen}/{n}; routers know private name: {known}",
            headers.len()
        ),
    )
}

async fn churn() -> Outcome {
    let mut t = Topology::chain(keystore(), fixtures().anchor.clone(), 3);
    t.add_proxy("client", "r0", "alice", Vec::new());
    t.add_proxy("server", "r2", "bob", Vec::new());
    t.bench = Some(BenchSpec { client: "client".into(), server: "server".into(), key_ref: "camera".into() });
    let mut tb = run_topology(t).await.map_err(|e| e.to_string())?;
    if !delivered_within(&tb, Duration::from_secs(3)).await {
        return Err("chain never delivered".into());
    }
    tb.kill("r1").await.map_err(|e| e.to_string())?;
    let blocked = !delivered_within(&tb, Duration::from_millis(300)).await;
    tb.restart("r1").await.map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let resumed = delivered_within(&tb, Duration::from_secs(15)).await;
    let took = t0.elapsed();
    tb.shutdown();
    verdict(
        blocked && resumed,
        format!("delivery stopped while r1 was down: {blocked}; resumed {:.2}s after restart (limit 15 s)", took.as_secs_f64()),
    )
}

async fn delivered_within(tb: &Testbed, limit: Duration) -> bool {
    let mut rx = tb.proxy("server").unwrap().bus().subscribe(STREAM);
    let start = Instant::now();
    while start.elapsed() < limit {
        tb.inject("client", STREAM, b"ping".to_vec()).unwrap();
        if let Ok(Ok(m)) = tokio::time::timeout(Duration::from_millis(100), rx.recv()).await {
            if m.origin == Origin::Mesh {
                return true;
            }
        }
    }
    false
}

async fn zero_copy() -> Outcome {
    let wait = Duration::from_secs(5);
    let hub = router(&[]).await;
    let left = router(&[hub.tcp_addr().unwrap()]).await;
    let right = router(&[hub.tcp_addr().unwrap()]).await;
    settle(&[&hub], 2).await;
    let publisher = MockClient::connect(hub.tcp_addr().unwrap()).await;
    let s1 = MockClient::connect(left.tcp_addr().unwrap()).await;
    let s2 = MockClient::connect(right.tcp_addr().unwrap()).await;
    let n = name(0x42);
    publisher.send(advert(n, DEFAULT_TTL)).await;
    if !eventually(wait, || left.rib().lookup(&n).is_some() && right.rib().lookup(&n).is_some()).await {
        return Err("advertisement did not spread".into());
    }
    s1.send(subscribe(n)).await;
    s2.send(subscribe(n)).await;
    if !eventually(wait, || hub.rib().lookup(&n).is_some_and(|e| e.sinks.len() == 2)).await {
        return Err("fanout sinks not registered".into());
    }

    let routers = [&hub, &left, &right];
    let before: Vec<_> = routers.iter().map(|r| r.stats()).collect();
    let codec_before = packet::payload_copies();
    let messages = 1000u64;
    for i in 0..messages {
        publisher.send(data(n, vec![i as u8; 1000])).await;
    }
    let got = [
        s1.collect(PacketType::Data, Duration::from_secs(1)).await.len(),
        s2.collect(PacketType::Data, Duration::from_secs(1)).await.len(),
    ];
    let codec = packet::payload_copies() - codec_before;
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (id, (r, s0)) in ["hub", "left", "right"].iter().zip(routers.iter().zip(before)) {
        let s1 = r.stats();
        let copies = s1.payload_copy_count - s0.payload_copy_count;
        let per = (copies + codec) as f64 / messages as f64;
        worst = worst.max(per);
        parts.push(format!("{id} {copies} copies/{} sends", s1.packets_forwarded - s0.packets_forwarded));
    }
    verdict(
        worst <= 1.0 && got == [messages as usize; 2],
        format!(
            "{messages} messages fanned out to 2 sinks (received {}, {}); {}; codec copies {codec}; worst {worst:.3} copies per message (limit 1)",
            got[0],
            got[1],
            parts.join(", ")
        ),
    )
}

async fn loop_safety() -> Outcome {
    let r0 = router(&[]).await;
    let r1 = router(&[r0.tcp_addr().unwrap()]).await;
    let r2 = router(&[r1.tcp_addr().unwrap()]).await;
    let r3 = router(&[r2.tcp_addr().unwrap(), r0.tcp_addr().unwrap()]).await;
    let ring = [&r0, &r1, &r2, &r3];
    settle(&ring, 2).await;
    tokio::time::sleep(Duration::from_millis(300)).await;
    let mut rxs: Vec<_> = ring.iter().map(|r| r.events()).collect();
    let names: Vec<GdpName> = (100..120).map(name).collect();
    for (i, n) in names.iter().enumerate() {
        ring[i % 4].originate(advert(*n, DEFAULT_TTL));
    }
    tokio::time::sleep(Duration::from_millis(500)).await;

    let mut problems = Vec::new();
    let mut duplicates = 0;
    let mut max_hops = 0;
    for (i, rx) in rxs.iter_mut().enumerate() {
        let mut fresh: HashMap<(GdpName, u64), u32> = HashMap::new();
        while let Ok(e) = rx.try_recv() {
            if let RouterEvent::Advertisement { name, nonce, ttl, fresh: f, .. } = e {
                if !names.contains(&name) {
                    continue;
                }
                max_hops = max_hops.max(DEFAULT_TTL - ttl);
                if ttl == 0 {
                    problems.push(format!("r{i} saw ttl 0"));
                }
                if f {
                    *fresh.entry((name, nonce)).or_default() += 1;
                } else {
                    duplicates += 1;
                }
            }
        }
        let once = fresh.values().filter(|c| **c == 1).count();
        if fresh.len() != names.len() || once != names.len() {
            problems.push(format!("r{i}: {} names fresh, {once} exactly once", fresh.len()));
        }
        if ring[i].stats().packets_dropped_ttl != 0 {
            problems.push(format!("r{i} dropped packets for ttl"));
        }
    }
    verdict(
        problems.is_empty() && max_hops < 4,
        format!(
            "{} advertisements on a 4-router ring: each fresh exactly once per router: {}; {duplicates} duplicates suppressed; max hops {max_hops}{}",
            names.len(),
            problems.is_empty(),
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}
