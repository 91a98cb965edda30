#![allow(dead_code)]

use gsv_core::container::ContainerIndex;
use gsv_core::gaussian::GaussianSet;
use gsv_core::pipeline::{bits_for, quat_distance, CodedGroup};
use gsv_core::quant::{channel_list, channel_value, step, Attribute};
use gsv_core::synth::{gen_synthetic_scene, SceneSpec};

pub fn scene(count: usize, frames: usize, motion: f64, seed: u64) -> Vec<GaussianSet> {
    let spec = SceneSpec {
        count,
        frames,
        motion_amplitude: motion,
        motion_coherence: 0.5,
        rotation_amplitude: 0.01,
        residual_amplitude: 0.005,
        ..Default::default()
    };
    gen_synthetic_scene(&spec, seed).unwrap()
}

/// Largest `error / tolerance` over every decoded attribute, where the
/// tolerance is half the governing quantization step (the key step on a
/// group's first frame, the delta step after it) plus f32 rounding slack.
/// Rotations are compared up to sign against twice the cell half-diagonal.
pub fn worst_error_ratio(
    source: &[GaussianSet],
    groups: &[CodedGroup],
    index: &ContainerIndex,
    decoded: &[GaussianSet],
) -> f64 {
    let degree = index.header.sh_degree;
    let channels = channel_list(degree);
    let c = channels.len();
    let mut worst = 0.0f64;
    for (info, entry) in groups.iter().zip(&index.groups) {
        let mut layer_of = Vec::new();
        for (l, &n) in entry.layer_counts.iter().enumerate() {
            layer_of.extend(std::iter::repeat_n(l, n as usize));
        }
        for t in 0..info.frame_count {
            let src = source[info.start + t].gaussians();
            let dec = decoded[info.start + t].gaussians();
            assert_eq!(dec.len(), info.source_map.len());
            for (i, d) in dec.iter().enumerate() {
                let s = &src[info.source_map[i]];
                let slots = &entry.payloads[layer_of[i]][if t == 0 { 0 } else { c }..];
                let mut half_diag_sq = 0.0;
                for (k, &ch) in channels.iter().enumerate() {
                    let h = step(bits_for(ch, entry.pos_bits), slots[k].range_min, slots[k].range_max);
                    if ch.attribute == Attribute::Rotation {
                        half_diag_sq += (h / 2.0).powi(2);
                        continue;
                    }
                    let x = channel_value(s, ch) as f64;
                    let tol = h / 2.0 + 8.0 * f32::EPSILON as f64 * x.abs().max(1.0);
                    let err = (channel_value(d, ch) as f64 - x).abs();
                    worst = worst.max(err / tol);
                }
                let tol = 2.0 * half_diag_sq.sqrt() + 8.0 * f32::EPSILON as f64;
                worst = worst.max(quat_distance(d.rotation, s.rotation) / tol);
            }
        }
    }
    worst
}
