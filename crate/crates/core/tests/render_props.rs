mod common;

use common::scene;
use gsv_core::config::EncodeConfig;
use gsv_core::gaussian::{partition_layers, equal_fractions, DEFAULT_LAMBDA_PSI};
use gsv_core::metrics::psnr;
use gsv_core::pipeline::{decode_bytes, encode_sequence};
use gsv_core::render::{render_progressive, render_set, Camera};

fn camera(k: u64) -> Camera {
    let a = k as f64 * 0.7;
    Camera::look_at([4.0 * a.cos(), 1.0, 4.0 * a.sin()], [0.0; 3], [0.0, -1.0, 0.0], 50.0, 96, 96)
}

#[test]
fn full_progressive_render_equals_flat_render() {
    for k in 0..3 {
        let frames = scene(800, 1, 0.0, k);
        let layered = partition_layers(&frames[0], 6, &equal_fractions(6), DEFAULT_LAMBDA_PSI).unwrap();
        let cam = camera(k);
        let prog = render_progressive(&layered, 6, &[], 0, &cam).unwrap();
        assert_eq!(prog, render_set(&layered.flatten(6), &cam));
        assert!(render_progressive(&layered, 0, &[], 0, &cam).is_err());
        assert!(render_progressive(&layered, 7, &[], 0, &cam).is_err());
    }
}

#[test]
fn decoded_group_renders_match_decoded_frames() {
    let frames = scene(500, 4, 0.001, 9);
    let enc = encode_sequence(&frames, &EncodeConfig::default()).unwrap();
    let seq = decode_bytes(&enc.to_bytes().unwrap(), 6).unwrap();
    let cam = camera(2);
    let g = &seq.groups[0];
    for t in 0..g.frame_count {
        let prog = render_progressive(&g.keyframe, 6, &g.deltas, t, &cam).unwrap();
        assert_eq!(prog, render_set(&seq.frame(g.start + t).unwrap(), &cam));
    }
}

#[test]
fn more_layers_render_closer_to_the_source() {
    let frames = scene(3000, 1, 0.0, 4);
    let enc = encode_sequence(&frames, &EncodeConfig { prune_fraction: 0.0, ..Default::default() }).unwrap();
    let bytes = enc.to_bytes().unwrap();
    let cam = camera(1);
    let gt = render_set(&frames[0], &cam);
    let scores: Vec<f64> = [1, 3, 6]
        .iter()
        .map(|&l| psnr(&gt, &render_set(&decode_bytes(&bytes, l).unwrap().frame(0).unwrap(), &cam)).unwrap())
        .collect();
    assert!(scores[0] < scores[1] && scores[1] < scores[2], "{scores:?}");
}
