use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::mpsc;
use std::time::Duration;

use gsv_core::config::EncodeConfig;
use gsv_core::container::{emit_manifest, write_container, ContainerIndex, Manifest};
use gsv_core::pipeline::encode_sequence;
use gsv_core::synth::{gen_synthetic_scene, Burst, SceneSpec};
use gsv_stream::policy::{add_sample, BandwidthEstimate, DEFAULT_SAFETY};
use gsv_stream::{client_play, client_play_blocking, select_layer, ClientConfig, Policy, SegmentServer};
use sha2::{Digest, Sha256};

struct Fixture {
    _dir: tempfile::TempDir,
    path: PathBuf,
    bytes: Vec<u8>,
    index: ContainerIndex,
}

fn fixture(frames: usize, bursts: &[usize]) -> Fixture {
    let spec = SceneSpec {
        count: 400,
        frames,
        motion_amplitude: 0.001,
        rotation_amplitude: 0.01,
        residual_amplitude: 0.005,
        bursts: bursts
            .iter()
            .map(|&frame| Burst {
                frame,
                amplitude: 0.01,
                residual_amplitude: 0.0,
            })
            .collect(),
        ..Default::default()
    };
    let cfg = EncodeConfig {
        fps_num: 2,
        estimate_rates: false,
        ..Default::default()
    };
    let enc = encode_sequence(&gen_synthetic_scene(&spec, 1).unwrap(), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clip.gsv");
    let index = write_container(&enc.data, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    Fixture {
        _dir: dir,
        path,
        bytes,
        index,
    }
}

fn local() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn get(url: &str) -> (u16, Vec<u8>, Option<String>) {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    rt.block_on(async {
        let r = reqwest::get(url).await.unwrap();
        let status = r.status().as_u16();
        let len = r
            .headers()
            .get("content-length")
            .map(|v| v.to_str().unwrap().to_string());
        (status, r.bytes().await.unwrap().to_vec(), len)
    })
}

fn sha(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[test]
fn endpoints_serve_manifest_and_verbatim_slices() {
    let f = fixture(6, &[3]);
    let server = SegmentServer::open(&f.path, local()).unwrap();
    let base = server.base_url();

    assert_eq!(get(&format!("{base}/health")).1, b"ok");

    let (status, body, _) = get(&format!("{base}/manifest"));
    assert_eq!(status, 200);
    assert_eq!(body, emit_manifest(&f.path, None).unwrap().to_json().into_bytes());

    let (_, body, _) = get(&format!("{base}/index"));
    assert_eq!(body, f.index.to_bytes());

    for g in 0..f.index.groups.len() {
        for l in 1..=6 {
            let (status, body, len) = get(&format!("{base}/segment?group={g}&layer={l}"));
            let (a, b) = f.index.segment_range(g, l).unwrap();
            assert_eq!(status, 200);
            assert_eq!(body, &f.bytes[a as usize..b as usize]);
            assert_eq!(len, Some((b - a).to_string()));
        }
    }

    for q in ["group=0&layer=7", "group=0&layer=0", "group=99&layer=1"] {
        let (status, body, _) = get(&format!("{base}/segment?{q}"));
        assert_eq!(status, 404, "{q}");
        assert!(String::from_utf8(body).unwrap().starts_with("error:"));
    }
    assert_eq!(get(&format!("{base}/segment?group=0")).0, 400);
}

#[test]
fn client_fetches_what_the_cap_allows() {
    let f = fixture(12, &[4, 8]);
    let manifest = Manifest::from_index(&f.index, "clip.gsv");
    assert!(manifest.groups.len() >= 3);
    let payload = f.index.payload_bytes();

    // unlimited: every layer of every group
    let server = SegmentServer::open(&f.path, local()).unwrap();
    let log = client_play_blocking(&server.base_url(), &ClientConfig::default()).unwrap();
    assert!(log.completed, "{:?}", log.error);
    assert!(log.groups.iter().all(|g| g.layers == 6));
    assert_eq!(log.total_bytes, payload);
    assert_eq!(server.segment_bytes_served(), log.total_bytes);
    drop(server);

    // mid: a cap that admits three layers of group 0
    let g0 = &manifest.groups[0];
    let cap = g0.cum_bytes_per_frame[2] * manifest.fps * 8.0 / DEFAULT_SAFETY * 1.05;
    let est = add_sample(&BandwidthEstimate::default(), cap);
    let predicted: Vec<usize> = (0..manifest.groups.len())
        .map(|g| select_layer(&manifest, g, &est, DEFAULT_SAFETY))
        .collect();
    assert_eq!(predicted[0], 3);
    let server = SegmentServer::open(&f.path, local()).unwrap();
    let cfg = ClientConfig {
        cap_bps: Some(cap),
        ..Default::default()
    };
    let log = client_play_blocking(&server.base_url(), &cfg).unwrap();
    assert!(log.completed);
    let chosen: Vec<usize> = log.groups.iter().map(|g| g.layers).collect();
    assert_eq!(chosen, predicted);
    let expected: u64 = predicted
        .iter()
        .zip(&manifest.groups)
        .map(|(&l, g)| g.cum_bytes[l - 1])
        .sum();
    assert_eq!(log.total_bytes, expected);
    assert_eq!(server.segment_bytes_served(), expected);
    drop(server);

    // zero: base layer only
    let server = SegmentServer::open(&f.path, local()).unwrap();
    let cfg = ClientConfig {
        cap_bps: Some(0.0),
        ..Default::default()
    };
    let log = client_play_blocking(&server.base_url(), &cfg).unwrap();
    assert!(log.completed);
    assert!(log.groups.iter().all(|g| g.layers == 1));
    let layer1: u64 = manifest.groups.iter().map(|g| g.layer_bytes[0]).sum();
    assert_eq!(log.total_bytes, layer1);
    for (g, entry) in log.groups.iter().zip(&f.index.groups) {
        assert_eq!(g.gaussians, entry.layer_counts[0] as usize);
    }
}

#[test]
fn concurrent_clients_get_their_own_payloads() {
    let f = fixture(8, &[4]);
    let server = SegmentServer::open(&f.path, local()).unwrap();
    let base = server.base_url();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap();
    let (a, b) = rt.block_on(async {
        let low = ClientConfig {
            policy: Policy::Fixed(2),
            ..Default::default()
        };
        let high = ClientConfig {
            policy: Policy::Fixed(6),
            ..Default::default()
        };
        let (a, b) = tokio::join!(
            tokio::spawn({
                let base = base.clone();
                async move { client_play(&base, &low).await }
            }),
            tokio::spawn({
                let base = base.clone();
                async move { client_play(&base, &high).await }
            })
        );
        (a.unwrap(), b.unwrap())
    });
    for (log, l) in [(&a, 2), (&b, 6)] {
        assert!(log.completed, "{:?}", log.error);
        assert_eq!(log.segments.len(), f.index.groups.len() * l);
        for s in &log.segments {
            let (x, y) = f.index.segment_range(s.group, s.layer).unwrap();
            assert_eq!(s.sha256, sha(&f.bytes[x as usize..y as usize]), "g{} l{}", s.group, s.layer);
        }
    }
    assert_eq!(server.segment_bytes_served(), a.total_bytes + b.total_bytes);
}

#[test]
fn killed_server_leaves_a_partial_log() {
    let f = fixture(16, &[2, 4, 6, 8, 10, 12, 14]);
    let groups = f.index.groups.len();
    let server = SegmentServer::open(&f.path, local()).unwrap();
    let base = server.base_url();
    let killer = std::thread::spawn(move || {
        while server.segments_served() < 6 {
            std::thread::sleep(Duration::from_millis(1));
        }
        server.kill();
    });
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let cfg = ClientConfig {
            group_interval: Duration::from_millis(100),
            retry_delay: Duration::from_millis(10),
            timeout: Duration::from_secs(2),
            ..Default::default()
        };
        tx.send(client_play_blocking(&base, &cfg).unwrap()).unwrap();
    });
    let log = rx.recv_timeout(Duration::from_secs(30)).expect("client hung");
    killer.join().unwrap();
    assert!(!log.completed);
    let err = log.error.as_deref().unwrap();
    assert!(err.contains("3 attempts"), "{err}");
    assert!(!log.groups.is_empty() && log.groups.len() < groups, "{} of {groups}", log.groups.len());
    assert_eq!(log.total_bytes, log.segments.iter().map(|s| s.bytes).sum::<u64>());
}

#[test]
fn unreachable_server_fails_cleanly() {
    let addr = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let cfg = ClientConfig {
        retry_delay: Duration::from_millis(1),
        ..Default::default()
    };
    let log = client_play_blocking(&format!("http://{addr}"), &cfg).unwrap();
    assert!(!log.completed && log.groups.is_empty());
    assert!(log.error.unwrap().contains("/manifest"));
}
