use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use gsv_core::container::{emit_manifest, ContainerIndex};
use gsv_core::render::{Camera, Image};

fn gsv() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gsv"));
    c.env_remove("GSV_PORT").env_remove("GSV_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    gsv().args(args).output().unwrap()
}

#[track_caller]
fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "gsv {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(format!("scene{seed}"));
    let mut args = vec!["synth", "--seed", seed, "--count", "600", "--frames", "6", "-o", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn encode(input: &Path, output: &Path, extra: &[&str]) -> Vec<u8> {
    let mut args = vec!["encode", "-i", s(input), "-o", s(output)];
    args.extend_from_slice(extra);
    ok(&args);
    std::fs::read(output).unwrap()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_is_deterministic_per_seed() {
    let d = tempfile::tempdir().unwrap();
    let a = synth(d.path(), "5", &[]);
    let b = d.path().join("again");
    ok(&["synth", "--seed", "5", "--count", "600", "--frames", "6", "-o", s(&b)]);
    let c = synth(d.path(), "6", &[]);
    assert_eq!(read_dir_sorted(&a), read_dir_sorted(&b));
    assert_ne!(read_dir_sorted(&a), read_dir_sorted(&c));
    assert_eq!(read_dir_sorted(&a).len(), 7);

    let missing = run(&["synth", "-o", s(&d.path().join("x"))]);
    assert!(!missing.status.success());
}

#[test]
fn encode_is_deterministic_and_writes_manifest_and_report() {
    let d = tempfile::tempdir().unwrap();
    let scene = synth(d.path(), "1", &[]);
    let first = encode(&scene, &d.path().join("a/clip.gsv"), &[]);
    let second = encode(&scene, &d.path().join("b/clip.gsv"), &[]);
    assert_eq!(first, second);

    let manifest = std::fs::read_to_string(d.path().join("a/manifest.json")).unwrap();
    assert_eq!(manifest, emit_manifest(d.path().join("a/clip.gsv"), None).unwrap().to_json());

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("a/clip.report.json")).unwrap()).unwrap();
    assert_eq!(report["frames"], 6);
    assert_eq!(report["layers"], 6);
    assert_eq!(report["layer_bytes"].as_array().unwrap().len(), 6);
    assert!(report["wall_ms"].is_number());
    let attrs = report["attributes"].as_array().unwrap();
    assert!(attrs.iter().any(|a| a["role"] == "key" && a["estimated_bits"].is_number()));
    assert!(attrs.iter().all(|a| a["actual_bits"].is_number()));
    let groups = report["groups"].as_array().unwrap();
    let frames: u64 = groups.iter().map(|g| g["frames"].as_u64().unwrap()).sum();
    assert_eq!(frames, 6);
}

#[test]
fn zero_motion_pair_codes_as_one_group_with_tiny_residuals() {
    let d = tempfile::tempdir().unwrap();
    let scene = d.path().join("still");
    ok(&["synth", "--seed", "2", "--count", "20000", "--frames", "1", "-o", s(&scene)]);
    std::fs::copy(scene.join("frame_0000.splat"), scene.join("frame_0001.splat")).unwrap();
    encode(&scene, &d.path().join("still.gsv"), &["--estimate-rates", "false"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("still.report.json")).unwrap()).unwrap();
    assert_eq!(report["groups"].as_array().unwrap().len(), 1);
    let bits = |role: &str| -> f64 {
        report["attributes"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|a| a["role"] == role)
            .map(|a| a["actual_bits"].as_f64().unwrap())
            .sum()
    };
    let ratio = bits("delta") / bits("key");
    assert!(ratio < 0.02, "residual/keyframe = {ratio}");
}

#[test]
fn full_layer_render_matches_decoded_set_render() {
    let d = tempfile::tempdir().unwrap();
    let scene = synth(d.path(), "3", &[]);
    let clip = d.path().join("clip.gsv");
    encode(&scene, &clip, &[]);
    let dec = d.path().join("dec");
    ok(&["decode", "-i", s(&clip), "-o", s(&dec)]);
    assert_eq!(std::fs::read_dir(&dec).unwrap().count(), 6);

    let cam = d.path().join("cam.json");
    std::fs::write(&cam, Camera::look_at([0.3, 0.4, -2.5], [0.0; 3], [0.0, -1.0, 0.0], 50.0, 96, 80).to_json()).unwrap();
    for t in [0usize, 4] {
        let a = d.path().join(format!("a{t}.ppm"));
        let b = d.path().join(format!("b{t}.ppm"));
        let tf = t.to_string();
        ok(&["render", "-i", s(&clip), "-f", &tf, "--camera", s(&cam), "-o", s(&a)]);
        let frame = dec.join(format!("frame_{t:04}.splat"));
        ok(&["render", "-i", s(&frame), "--camera", s(&cam), "-o", s(&b)]);
        let (ia, ib) = (Image::load(&a).unwrap(), Image::load(&b).unwrap());
        assert_eq!((ia.width, ia.height), (ib.width, ib.height));
        assert_eq!((ia.width, ia.height), (96, 80));
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap(), "frame {t}");
    }

    // fewer layers draw a different image
    let low = d.path().join("low.ppm");
    ok(&["render", "-i", s(&clip), "-l", "1", "--camera", s(&cam), "-o", s(&low)]);
    assert_ne!(std::fs::read(&low).unwrap(), std::fs::read(d.path().join("a0.ppm")).unwrap());
}

#[test]
fn analyze_curve_against_itself_is_zero() {
    let d = tempfile::tempdir().unwrap();
    let scene = synth(d.path(), "4", &[]);
    let clip = d.path().join("clip.gsv");
    encode(&scene, &clip, &[]);
    let curve_a = format!("a={}", s(&clip));
    let curve_b = format!("b={}", s(&clip));
    let out = d.path().join("rd");
    let table = ok(&[
        "analyze", "--curve", &curve_a, "--curve", &curve_b, "--gt", s(&scene), "--width", "64", "--height", "64",
        "-o", s(&out),
    ]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "anchor,test,bd_psnr_db,bdbr_percent");
    for row in &lines[1..] {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[0], "a");
        let dp: f64 = f[2].parse().unwrap();
        let br: f64 = f[3].parse().unwrap();
        assert!(dp.abs() < 1e-9 && br.abs() < 1e-9, "{row}");
    }
    let csv = std::fs::read_to_string(out.join("a.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert_eq!(std::fs::read_to_string(out.join("bd.csv")).unwrap(), table);

    // PSNR rises with layers
    let psnr: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(psnr.windows(2).all(|w| w[1] > w[0]), "{psnr:?}");
}

#[test]
fn decode_then_reencode_keeps_payload_sizes() {
    let d = tempfile::tempdir().unwrap();
    let scene = d.path().join("scene");
    ok(&["synth", "--seed", "9", "--count", "4000", "--frames", "6", "-o", s(&scene)]);
    let flags = ["--prune-fraction", "0", "--estimate-rates", "false"];
    let first = encode(&scene, &d.path().join("first.gsv"), &flags);
    let dec = d.path().join("dec");
    ok(&["decode", "-i", s(&d.path().join("first.gsv")), "-o", s(&dec)]);
    let second = encode(&dec, &d.path().join("second.gsv"), &flags);
    let a = ContainerIndex::from_bytes(&first).unwrap();
    let b = ContainerIndex::from_bytes(&second).unwrap();
    assert_eq!(a.groups.len(), b.groups.len());
    let (pa, pb) = (a.payload_bytes() as f64, b.payload_bytes() as f64);
    assert!((pb - pa).abs() <= 0.01 * pa, "payload {pa} -> {pb}");
    for (ga, gb) in a.groups.iter().zip(&b.groups) {
        for l in 0..6 {
            let (x, y) = (ga.layer_bytes(l) as f64, gb.layer_bytes(l) as f64);
            assert!((y - x).abs() <= 0.01 * x.max(1.0) + 64.0, "layer {l}: {x} -> {y}");
        }
    }
}

#[test]
fn corrupt_container_gives_one_line_located_error() {
    let d = tempfile::tempdir().unwrap();
    let scene = synth(d.path(), "8", &[]);
    let clip = d.path().join("clip.gsv");
    let mut bytes = encode(&scene, &clip, &[]);
    let index = ContainerIndex::from_bytes(&bytes).unwrap();
    let (a, b) = index.segment_range(0, 3).unwrap();
    bytes[((a + b) / 2) as usize] ^= 0x10;
    std::fs::write(&clip, &bytes).unwrap();

    let out = run(&["decode", "-i", s(&clip), "-o", s(&d.path().join("dec"))]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error module=plane-codec group=0 layer=3 channel="), "{err}");
    let msg = err.split_once(" message=").unwrap().1.trim();
    assert!(serde_json::from_str::<String>(msg).is_ok(), "{msg}");

    // layers 1..2 do not touch the damaged payload
    ok(&["decode", "-i", s(&clip), "-l", "2", "-o", s(&d.path().join("dec2"))]);

    let out = run(&["decode", "-i", s(&clip), "-l", "7", "-o", s(&d.path().join("dec3"))]);
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error module=container "), "{err}");
}

#[test]
fn help_lists_every_flag_and_unknown_flags_fail() {
    let help = ok(&["encode", "--help"]);
    for flag in [
        "--input", "--output", "--manifest", "--report", "--layers", "--layer-fractions", "--lambda-psi", "--tau-mu",
        "--sh-degree", "--pos-bits", "--wide-position-extent", "--codec", "--prune-fraction", "--grouping",
        "--flatten-order", "--fps-num", "--fps-den", "--seed", "--estimate-rates",
    ] {
        assert!(help.contains(flag), "{flag} missing from encode --help");
    }
    let top = ok(&["--help"]);
    for cmd in ["encode", "decode", "render", "serve", "play", "analyze", "synth"] {
        assert!(top.contains(cmd), "{cmd}");
    }
    for sub in ["decode", "render", "serve", "play", "analyze", "synth"] {
        assert!(ok(&[sub, "--help"]).contains("--output") || sub == "serve");
    }

    let out = run(&["encode", "--no-such-flag"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--no-such-flag"));
    assert!(!run(&["frobnicate"]).status.success());
    let d = tempfile::tempdir().unwrap();
    let out = run(&["encode", "-i", s(d.path()), "-o", s(&d.path().join("x.gsv")), "--grouping", "often"]);
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error module=cli "));
}

#[test]
fn thread_cap_does_not_change_output() {
    let d = tempfile::tempdir().unwrap();
    let scene = synth(d.path(), "11", &[]);
    let many = encode(&scene, &d.path().join("many.gsv"), &[]);
    let out = gsv()
        .env("GSV_THREADS", "1")
        .args(["encode", "-i", s(&scene), "-o", s(&d.path().join("one.gsv"))])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(d.path().join("one.gsv")).unwrap(), many);

    let out = gsv().env("GSV_THREADS", "0").args(["synth", "--seed", "1", "-o", s(d.path())]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("GSV_THREADS"));
}

#[test]
fn serve_honours_port_env_and_play_logs_the_session() {
    let d = tempfile::tempdir().unwrap();
    let scene = synth(d.path(), "12", &[]);
    let clip = d.path().join("clip.gsv");
    encode(&scene, &clip, &["--fps-num", "2"]);
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = gsv()
        .env("GSV_PORT", port.to_string())
        .args(["serve", "-i", s(&clip), "--port", "1"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    assert_eq!(line.trim(), format!("listening on http://127.0.0.1:{port}"));

    let mut conn = TcpStream::connect(("127.0.0.1", port)).unwrap();
    conn.write_all(b"GET /health HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    conn.read_to_string(&mut resp).unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.ends_with("ok"), "{resp}");

    let log_path = d.path().join("log.json");
    let url = format!("http://127.0.0.1:{port}");
    ok(&["play", "--url", &url, "--layers", "2", "-o", s(&log_path)]);
    child.kill().unwrap();
    child.wait().unwrap();

    let log: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&log_path).unwrap()).unwrap();
    assert_eq!(log["completed"], true);
    let index = ContainerIndex::from_bytes(&std::fs::read(&clip).unwrap()).unwrap();
    let expected: u64 = index.groups.iter().map(|g| g.layer_bytes(0) + g.layer_bytes(1)).sum();
    assert_eq!(log["total_bytes"].as_u64().unwrap(), expected);

    let out = run(&["play", "--url", &url, "-o", s(&log_path)]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error module=stream-svc "));
}
