mod common;

use std::sync::Arc;
use std::time::Duration;

use common::*;
use sgc_core::crypto;
use sgc_core::packet::{Packet, PacketHeader, PacketType, FLAG_SEALED};
use sgc_core::proxy::{BusMessage, Origin, UnifiedMessage};
use sgc_core::transport::{LinkContext, TunnelMode};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};

const WAIT: Duration = Duration::from_secs(5);
const CAMERA: &str = "/camera";

#[tokio::test]
async fn bytes_cross_the_mesh_unchanged() {
    let a = router(&[]).await;
    let b = router(&[a.tcp_addr().unwrap()]).await;
    settle(&[&a, &b], 1).await;
    let robot = proxy(a.tcp_addr().unwrap(), "alice", vec![pub_topic(CAMERA)]).await;
    let cloud = proxy(b.tcp_addr().unwrap(), "bob", vec![sub_topic(CAMERA)]).await;
    assert_eq!(robot.topic_name(CAMERA), cloud.topic_name(CAMERA));
    let n = robot.topic_name(CAMERA).unwrap();
    assert!(eventually(WAIT, || a.rib().lookup(&n).is_some_and(|e| !e.sinks.is_empty())).await);

    let mut rx = cloud.bus().subscribe(CAMERA);
    let sizes = [0usize, 1, 1000, 8000, 65_536, 1 << 20];
    for (i, size) in sizes.iter().enumerate() {
        let payload: Vec<u8> = (0..*size).map(|j| (j * 31 + i) as u8).collect();
        robot.publish(CAMERA, payload.clone());
        let got = tokio::time::timeout(WAIT, rx.recv()).await.unwrap().unwrap();
        assert_eq!(got.data.len(), *size);
        assert_eq!(&got.data[..], &payload[..]);
        assert_eq!(got.origin, Origin::Mesh);
        assert_eq!(got.msg_type, "sensor_msgs/CompressedImage");
    }
    assert_eq!(cloud.stats().delivered, sizes.len() as u64);
}

#[tokio::test]
async fn one_advertisement_per_connect() {
    let fake = FakeRouter::start().await;
    let p = proxy(fake.addr, "alice", vec![pub_topic(CAMERA)]).await;
    assert!(eventually(WAIT, || fake.packets(PacketType::Advertisement).len() == 1).await);
    tokio::time::sleep(Duration::from_millis(200)).await;
    let ads = fake.packets(PacketType::Advertisement);
    assert_eq!(ads.len(), 1);
    assert_eq!(ads[0].header.source, p.topic_name(CAMERA).unwrap());
    assert!(fake.packets(PacketType::Subscribe).is_empty());
}

#[tokio::test]
async fn private_topic_never_reaches_the_mesh() {
    let tap = Arc::new(Tap::default());
    let a = router(&[]).await;
    let b = router(&[a.tcp_addr().unwrap()]).await;
    settle(&[&a, &b], 1).await;
    let robot_ctx = LinkContext::new().with_shaper(tap.clone());
    let topics = vec![pub_topic(CAMERA), pub_topic("/joint_states").private()];
    let robot = proxy_with(a.tcp_addr().unwrap(), "alice", topics, TunnelMode::Shared, robot_ctx).await;
    let cloud = proxy(b.tcp_addr().unwrap(), "bob", vec![sub_topic(CAMERA), sub_topic("/joint_states")]).await;
    let secret = robot.topic_name("/joint_states").unwrap();
    let public = robot.topic_name(CAMERA).unwrap();
    assert!(eventually(WAIT, || a.rib().lookup(&public).is_some_and(|e| !e.sinks.is_empty())).await);

    let mut local = robot.bus().subscribe("/joint_states");
    let mut remote = cloud.bus().subscribe(CAMERA);
    for i in 0..20u8 {
        robot.publish("/joint_states", vec![i; 64]);
        robot.publish(CAMERA, vec![i; 64]);
    }
    for _ in 0..20 {
        assert_eq!(local.recv().await.unwrap().origin, Origin::Local);
        tokio::time::timeout(WAIT, remote.recv()).await.unwrap().unwrap();
    }
    tokio::time::sleep(Duration::from_millis(200)).await;
    let headers = tap.headers.lock().clone();
    assert!(headers.iter().any(|(t, s, _)| *t == PacketType::Data && *s == public));
    assert!(headers.iter().all(|(_, s, d)| *s != secret && *d != secret));
    assert!(a.rib().lookup(&secret).is_none() && b.rib().lookup(&secret).is_none());
}

fn sealed_with_type(p: &sgc_core::proxy::Proxy, msg_type: &str) -> Packet {
    let n = p.topic_name(CAMERA).unwrap();
    let mut h = PacketHeader::new(PacketType::Data, n, n, 8);
    h.flags = FLAG_SEALED;
    let json = UnifiedMessage::new(CAMERA, msg_type, 1, b"x").to_json();
    let f = fixtures();
    let env = crypto::seal(&json, &f.camera_key, &f.alice, &h.covered_bytes());
    Packet::new(h, env.into_bytes())
}

#[tokio::test]
async fn injected_faults_are_counted_and_dropped() {
    let fake = FakeRouter::start().await;
    let cloud = proxy(fake.addr, "bob", vec![sub_topic(CAMERA)]).await;
    assert!(eventually(WAIT, || fake.connections() == 1).await);
    let mut rx = cloud.bus().subscribe(CAMERA);

    let good = sealed_with_type(&cloud, "sensor_msgs/CompressedImage");
    fake.inject(good.clone()).await;
    assert_eq!(&tokio::time::timeout(WAIT, rx.recv()).await.unwrap().unwrap().data[..], b"x");

    fake.inject(sealed_with_type(&cloud, "std_msgs/String")).await;
    assert!(eventually(WAIT, || cloud.stats().dropped_type == 1).await);

    let mut bytes = good.payload.to_vec();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    fake.inject(Packet::new(good.header, bytes)).await;
    assert!(eventually(WAIT, || cloud.stats().dropped_tampered == 1).await);

    let mut plain = good.clone();
    plain.header.flags = 0;
    fake.inject(plain).await;
    assert!(eventually(WAIT, || cloud.stats().dropped_malformed == 1).await);

    assert!(rx.try_recv().is_err(), "nothing but the good message reached the bus");
    assert_eq!(cloud.stats().delivered, 1);
}

#[tokio::test]
async fn missing_key_drops_instead_of_sending_clear() {
    let fake = FakeRouter::start().await;
    let p = proxy(fake.addr, "alice", vec![pub_topic(CAMERA).key("no-such-key")]).await;
    assert!(eventually(WAIT, || fake.connections() == 1).await);
    for _ in 0..3 {
        p.publish(CAMERA, b"secret".to_vec());
    }
    assert!(eventually(WAIT, || p.stats().dropped_no_key == 3).await);
    assert!(fake.packets(PacketType::Data).is_empty());
}

#[tokio::test]
async fn tunnel_mode_sets_connection_count() {
    let topics = || vec![pub_topic(CAMERA), pub_topic("/lidar")];
    let shared = FakeRouter::start().await;
    let _p1 = proxy_with(shared.addr, "alice", topics(), TunnelMode::Shared, LinkContext::new()).await;
    let dedicated = FakeRouter::start().await;
    let _p2 = proxy_with(dedicated.addr, "alice", topics(), TunnelMode::Dedicated, LinkContext::new()).await;
    assert!(eventually(WAIT, || shared.packets(PacketType::Advertisement).len() == 2).await);
    assert!(eventually(WAIT, || dedicated.packets(PacketType::Advertisement).len() == 2).await);
    assert_eq!(shared.connections(), 1);
    assert_eq!(dedicated.connections(), 2);
}

#[tokio::test]
async fn conversion_roundtrip_without_network() {
    let fake = FakeRouter::start().await;
    let robot = proxy(fake.addr, "alice", vec![pub_topic(CAMERA)]).await;
    let cloud = proxy(fake.addr, "bob", vec![sub_topic(CAMERA)]).await;
    for data in [Vec::new(), vec![7u8; 1000]] {
        let msg = BusMessage::local(CAMERA, "sensor_msgs/CompressedImage", data.clone());
        let pkt = robot.local_to_global(&msg).unwrap();
        assert!(pkt.header.is_sealed());
        assert_eq!(pkt.header.source, robot.topic_name(CAMERA).unwrap());
        let back = cloud.global_to_local(&pkt).unwrap();
        assert_eq!(&back.data[..], &data[..]);
        assert_eq!(back.timestamp_ns, msg.timestamp_ns);
    }
}

#[tokio::test]
async fn local_bus_endpoints_bridge_non_native_clients() {
    let a = router(&[]).await;
    let mut s = sgc_core::proxy::ProxySettings::new(
        sgc_core::transport::PeerConfig::tcp(a.tcp_addr().unwrap().to_string()),
        "alice",
        keystore(),
    );
    s.topics = vec![pub_topic(CAMERA)];
    s.local_bus = Some("127.0.0.1:0".into());
    let robot = sgc_core::proxy::Proxy::start(s.clone(), LinkContext::new()).await.unwrap();
    s.identity = "bob".into();
    s.topics = vec![sub_topic(CAMERA)];
    let cloud = sgc_core::proxy::Proxy::start(s, LinkContext::new()).await.unwrap();
    let n = robot.topic_name(CAMERA).unwrap();
    assert!(eventually(WAIT, || a.rib().lookup(&n).is_some_and(|e| !e.sinks.is_empty())).await);

    let reader = tokio::net::TcpStream::connect(cloud.local_bus_addr().unwrap()).await.unwrap();
    let mut writer = tokio::net::TcpStream::connect(robot.local_bus_addr().unwrap()).await.unwrap();
    tokio::time::sleep(Duration::from_millis(50)).await;
    let line = UnifiedMessage::new(CAMERA, "sensor_msgs/CompressedImage", 0, b"from a script").to_json();
    writer.write_all(&line).await.unwrap();
    writer.write_all(b"\n").await.unwrap();
    let mut lines = BufReader::new(reader).lines();
    let got = tokio::time::timeout(WAIT, lines.next_line()).await.unwrap().unwrap().unwrap();
    let m = UnifiedMessage::from_json(got.as_bytes()).unwrap();
    assert_eq!(m.decode_data().unwrap(), b"from a script");
    assert_eq!(m.topic, CAMERA);
}
