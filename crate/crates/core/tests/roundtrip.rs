mod common;

use common::{scene, worst_error_ratio};
use gsv_core::codec::CodecId;
use gsv_core::config::{EncodeConfig, Grouping};
use gsv_core::pipeline::{decode_bytes, encode_sequence};
use gsv_core::quant::FlattenOrder;

fn lossless_prune() -> EncodeConfig {
    EncodeConfig {
        prune_fraction: 0.0,
        estimate_rates: false,
        ..Default::default()
    }
}

#[test]
fn decoded_attributes_within_half_step() {
    for seed in 0..4 {
        let frames = scene(600, 12, 0.001 * (seed + 1) as f64, seed);
        let enc = encode_sequence(&frames, &lossless_prune()).unwrap();
        let bytes = enc.to_bytes().unwrap();
        let decoded = decode_bytes(&bytes, 6).unwrap().frames().unwrap();
        assert_eq!(decoded, enc.reconstruction);
        let r = worst_error_ratio(&frames, &enc.groups, &enc.index().unwrap(), &decoded);
        assert!(r <= 1.0, "seed {seed}: error {r} tolerances");
    }
}

#[test]
fn fidelity_holds_across_settings() {
    let frames = scene(400, 9, 0.004, 11);
    let settings = [
        EncodeConfig { codec: CodecId::Raw, ..lossless_prune() },
        EncodeConfig { grouping: Grouping::Fixed(3), ..lossless_prune() },
        EncodeConfig { flatten_order: FlattenOrder::Morton, ..lossless_prune() },
        EncodeConfig { layers: 1, loss: gsv_core::rate::LossWeights::with_layers(1), ..lossless_prune() },
        EncodeConfig { pos_bits: 32, ..lossless_prune() },
    ];
    for cfg in settings {
        let enc = encode_sequence(&frames, &cfg).unwrap();
        let decoded = decode_bytes(&enc.to_bytes().unwrap(), cfg.layers).unwrap().frames().unwrap();
        let r = worst_error_ratio(&frames, &enc.groups, &enc.index().unwrap(), &decoded);
        assert!(r <= 1.0, "{cfg:?}: {r}");
    }
}

#[test]
fn pruned_encode_keeps_the_most_opaque() {
    let frames = scene(500, 3, 0.001, 5);
    let enc = encode_sequence(&frames, &EncodeConfig::default()).unwrap();
    let g = &enc.groups[0];
    assert_eq!(g.source_map.len(), 300);
    let kept: std::collections::HashSet<_> = g.source_map.iter().copied().collect();
    let src = frames[0].gaussians();
    let min_kept = kept.iter().map(|&i| src[i].opacity).fold(f32::INFINITY, f32::min);
    let max_dropped = (0..src.len())
        .filter(|i| !kept.contains(i))
        .map(|i| src[i].opacity)
        .fold(f32::NEG_INFINITY, f32::max);
    assert!(max_dropped <= min_kept);
}

#[test]
fn same_config_same_bytes() {
    let frames = scene(300, 6, 0.002, 3);
    let cfg = EncodeConfig::default();
    let a = encode_sequence(&frames, &cfg).unwrap().to_bytes().unwrap();
    let b = encode_sequence(&frames, &cfg).unwrap().to_bytes().unwrap();
    assert_eq!(a, b);
}
