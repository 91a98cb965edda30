//! Fixed-width attribute quantization, 2D plane flattening and the
//! (group, layer, channel, frame) plane ordering.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::gaussian::{Aabb, Gaussian};
use crate::math::sh_coeff_count;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("empty input")]
    Empty,
    #[error("unsupported bit width {0}")]
    BadBits(u8),
    #[error("non-finite value")]
    NonFinite,
    #[error("invalid range [{0}, {1}]")]
    BadRange(f32, f32),
    #[error("inconsistent plane geometry in group {group} layer {layer}: {detail}")]
    Inconsistent {
        group: u32,
        layer: u8,
        detail: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Attribute {
    Position,
    Rotation,
    Scale,
    Opacity,
    Sh,
}

impl Attribute {
    pub fn name(self) -> &'static str {
        match self {
            Attribute::Position => "position",
            Attribute::Rotation => "rotation",
            Attribute::Scale => "scale",
            Attribute::Opacity => "opacity",
            Attribute::Sh => "sh",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelId {
    pub attribute: Attribute,
    pub component: u8,
}

impl std::fmt::Display for ChannelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}[{}]", self.attribute.name(), self.component)
    }
}

/// Scalar channels of one Gaussian in canonical order:
/// position(3), rotation(4), scale(3), opacity(1), sh(3·(deg+1)²).
pub fn channel_list(sh_degree: u8) -> Vec<ChannelId> {
    let mut out = Vec::with_capacity(11 + sh_coeff_count(sh_degree));
    let mut push = |attribute, n: usize| {
        for component in 0..n {
            out.push(ChannelId {
                attribute,
                component: component as u8,
            });
        }
    };
    push(Attribute::Position, 3);
    push(Attribute::Rotation, 4);
    push(Attribute::Scale, 3);
    push(Attribute::Opacity, 1);
    push(Attribute::Sh, sh_coeff_count(sh_degree));
    out
}

pub fn channel_value(g: &Gaussian, ch: ChannelId) -> f32 {
    let c = ch.component as usize;
    match ch.attribute {
        Attribute::Position => g.position[c],
        Attribute::Rotation => g.rotation[c],
        Attribute::Scale => g.scales[c],
        Attribute::Opacity => g.opacity,
        Attribute::Sh => g.sh[c],
    }
}

pub fn set_channel_value(g: &mut Gaussian, ch: ChannelId, v: f32) {
    let c = ch.component as usize;
    match ch.attribute {
        Attribute::Position => g.position[c] = v,
        Attribute::Rotation => g.rotation[c] = v,
        Attribute::Scale => g.scales[c] = v,
        Attribute::Opacity => g.opacity = v,
        Attribute::Sh => g.sh[c] = v,
    }
}

pub fn channel_values(gs: &[Gaussian], ch: ChannelId) -> Vec<f32> {
    gs.iter().map(|g| channel_value(g, ch)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedChannel {
    pub codes: Vec<u32>,
    pub bits: u8,
    pub range_min: f32,
    pub range_max: f32,
    pub channel: ChannelId,
}

pub fn check_bits(bits: u8) -> Result<(), QuantError> {
    match bits {
        8 | 16 | 32 => Ok(()),
        b => Err(QuantError::BadBits(b)),
    }
}

pub fn max_code(bits: u8) -> u32 {
    if bits >= 32 {
        u32::MAX
    } else {
        (1u32 << bits) - 1
    }
}

/// Smallest f32 strictly above `min` that is at least `min + 1e-6`.
fn widen_degenerate(min: f32) -> f32 {
    let w = (min as f64 + 1e-6) as f32;
    if w > min {
        w
    } else {
        min.next_up()
    }
}

/// Per-channel range `[min, max]` (widened when degenerate) and codes
/// `round((v − min)/(max − min)·(2^bits − 1))`, halves away from zero.
pub fn quantize_channel(values: &[f32], bits: u8, channel: ChannelId) -> Result<QuantizedChannel, QuantError> {
    check_bits(bits)?;
    if values.is_empty() {
        return Err(QuantError::Empty);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite);
    }
    let (min, mut max) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if max <= min {
        max = widen_degenerate(min);
    }
    quantize_with_range(values, bits, min, max, channel)
}

/// Quantizes against a caller-chosen range; values outside it clamp to the
/// end codes.
pub fn quantize_with_range(
    values: &[f32],
    bits: u8,
    range_min: f32,
    range_max: f32,
    channel: ChannelId,
) -> Result<QuantizedChannel, QuantError> {
    check_bits(bits)?;
    if !(range_min.is_finite() && range_max.is_finite() && range_max > range_min) {
        return Err(QuantError::BadRange(range_min, range_max));
    }
    let codes = values
        .iter()
        .map(|&v| quantize_value(v as f64, bits, range_min, range_max))
        .collect::<Result<_, _>>()?;
    Ok(QuantizedChannel {
        codes,
        bits,
        range_min,
        range_max,
        channel,
    })
}

pub fn quantize_value(v: f64, bits: u8, range_min: f32, range_max: f32) -> Result<u32, QuantError> {
    if !v.is_finite() {
        return Err(QuantError::NonFinite);
    }
    let top = max_code(bits) as f64;
    let (lo, hi) = (range_min as f64, range_max as f64);
    let x = (v - lo) / (hi - lo) * top;
    Ok(x.round().clamp(0.0, top) as u32)
}

/// `min + (max − min)·code / (2^bits − 1)`, evaluated in f64 so that
/// power-of-two steps dequantize exactly.
pub fn dequantize_value(code: u32, bits: u8, range_min: f32, range_max: f32) -> f64 {
    let top = max_code(bits);
    if code >= top {
        return range_max as f64;
    }
    let (lo, hi) = (range_min as f64, range_max as f64);
    lo + (hi - lo) * code as f64 / top as f64
}

pub fn dequantize_channel(ch: &QuantizedChannel) -> Vec<f32> {
    ch.codes
        .iter()
        .map(|&c| dequantize_value(c, ch.bits, ch.range_min, ch.range_max) as f32)
        .collect()
}

/// Quantization step `(max − min)/(2^bits − 1)`.
pub fn step(bits: u8, range_min: f32, range_max: f32) -> f64 {
    (range_max as f64 - range_min as f64) / max_code(bits) as f64
}

/// Row-major 2D arrangement of one channel's codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub bits: u8,
    pub samples: Vec<u32>,
    pub valid_count: usize,
}

/// `W = ⌈√N⌉`, `H = ⌈N/W⌉`; zero samples give a 0x0 plane.
pub fn plane_geometry(n: usize) -> (usize, usize) {
    if n == 0 {
        return (0, 0);
    }
    let mut w = n.isqrt();
    if w * w < n {
        w += 1;
    }
    (w, n.div_ceil(w))
}

pub fn flatten_codes(codes: &[u32], bits: u8) -> Plane {
    let (width, height) = plane_geometry(codes.len());
    let mut samples = Vec::with_capacity(width * height);
    samples.extend_from_slice(codes);
    if let Some(&last) = codes.last() {
        samples.resize(width * height, last);
    }
    Plane {
        width,
        height,
        bits,
        samples,
        valid_count: codes.len(),
    }
}

pub fn flatten_to_plane(ch: &QuantizedChannel) -> Plane {
    flatten_codes(&ch.codes, ch.bits)
}

pub fn unflatten(plane: &Plane) -> Vec<u32> {
    plane.samples[..plane.valid_count].to_vec()
}

/// Gaussian order inside a layer before flattening.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlattenOrder {
    /// Keep the layer's significance order.
    #[default]
    Significance,
    /// Z-order curve over positions quantized to 10 bits per axis.
    Morton,
}

fn spread_bits(mut v: u32) -> u32 {
    v &= 0x3ff;
    v = (v | (v << 16)) & 0x030000ff;
    v = (v | (v << 8)) & 0x0300f00f;
    v = (v | (v << 4)) & 0x030c30c3;
    v = (v | (v << 2)) & 0x09249249;
    v
}

pub fn morton_code(p: [f32; 3], bounds: &Aabb) -> u32 {
    let mut out = 0;
    for k in 0..3 {
        let ext = (bounds.max[k] - bounds.min[k]) as f64;
        let t = if ext > 0.0 {
            ((p[k] - bounds.min[k]) as f64 / ext).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out |= spread_bits((t * 1023.0).round() as u32) << k;
    }
    out
}

/// Stable permutation of `gaussians` sorted by Morton code.
pub fn morton_order(gaussians: &[Gaussian]) -> Vec<usize> {
    let bounds = Aabb::from_points(gaussians.iter().map(|g| &g.position));
    let codes: Vec<u32> = gaussians.iter().map(|g| morton_code(g.position, &bounds)).collect();
    let mut idx: Vec<usize> = (0..gaussians.len()).collect();
    idx.sort_by_key(|&i| codes[i]);
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PlaneKey {
    pub group: u32,
    pub layer: u8,
    pub channel: ChannelId,
    pub frame: u32,
}

/// Planes in (group, layer, channel, frame) order.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneSequence {
    pub entries: Vec<(PlaneKey, Plane)>,
}

impl PlaneSequence {
    /// Consecutive planes sharing (group, layer, channel): one temporal run each.
    pub fn runs(&self) -> Vec<((u32, u8, ChannelId), Vec<&Plane>)> {
        let mut out: Vec<((u32, u8, ChannelId), Vec<&Plane>)> = Vec::new();
        for (k, p) in &self.entries {
            let id = (k.group, k.layer, k.channel);
            match out.last_mut() {
                Some((last, planes)) if *last == id => planes.push(p),
                _ => out.push((id, vec![p])),
            }
        }
        out
    }
}

/// Sorts planes into their total order and checks that every plane of a
/// (group, layer) has the same valid count and every run a single geometry.
pub fn arrange_sequences(planes: Vec<(PlaneKey, Plane)>) -> Result<PlaneSequence, QuantError> {
    let mut counts: BTreeMap<(u32, u8), usize> = BTreeMap::new();
    let mut bits: BTreeMap<(u32, u8, ChannelId), u8> = BTreeMap::new();
    for (k, p) in &planes {
        let c = *counts.entry((k.group, k.layer)).or_insert(p.valid_count);
        if c != p.valid_count {
            return Err(QuantError::Inconsistent {
                group: k.group,
                layer: k.layer,
                detail: format!("valid counts {c} and {}", p.valid_count),
            });
        }
        let b = *bits.entry((k.group, k.layer, k.channel)).or_insert(p.bits);
        if b != p.bits {
            return Err(QuantError::Inconsistent {
                group: k.group,
                layer: k.layer,
                detail: format!("channel {} mixes {b}- and {}-bit planes", k.channel, p.bits),
            });
        }
    }
    let mut entries = planes;
    entries.sort_by_key(|(k, _)| *k);
    if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(QuantError::Inconsistent {
            group: w[0].0.group,
            layer: w[0].0.layer,
            detail: format!("duplicate plane for frame {}", w[0].0.frame),
        });
    }
    Ok(PlaneSequence { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CH: ChannelId = ChannelId {
        attribute: Attribute::Opacity,
        component: 0,
    };

    #[test]
    fn constant_input() {
        let q = quantize_channel(&[0.25; 4], 8, CH).unwrap();
        assert_eq!(q.codes, vec![0; 4]);
        assert!(q.range_max > q.range_min);
        let big = quantize_channel(&[1.0e6; 2], 8, CH).unwrap();
        assert!(big.range_max > big.range_min);
    }

    #[test]
    fn half_rounds_away_from_zero() {
        let q = quantize_with_range(&[0.5], 8, 0.0, 1.0, CH).unwrap();
        assert_eq!(q.codes, vec![128]);
    }

    #[test]
    fn dequantize_examples() {
        let mk = |code| QuantizedChannel {
            codes: vec![code],
            bits: 8,
            range_min: -0.3,
            range_max: 0.7,
            channel: CH,
        };
        assert_eq!(dequantize_channel(&mk(0)), vec![-0.3]);
        assert_eq!(dequantize_channel(&mk(255)), vec![0.7]);
        let v = dequantize_value(128, 8, 0.0, 1.0);
        assert!((v - 128.0 / 255.0).abs() < 1e-15);
        assert!((v - 0.501_960_8).abs() < 1e-7);
    }

    #[test]
    fn errors() {
        assert_eq!(quantize_channel(&[], 8, CH), Err(QuantError::Empty));
        assert_eq!(quantize_channel(&[1.0], 12, CH), Err(QuantError::BadBits(12)));
        assert_eq!(quantize_channel(&[f32::NAN], 8, CH), Err(QuantError::NonFinite));
    }

    #[test]
    fn flatten_examples() {
        let p = flatten_codes(&[1, 2, 3, 4, 5], 8);
        assert_eq!((p.width, p.height), (3, 2));
        assert_eq!(p.samples, vec![1, 2, 3, 4, 5, 5]);
        assert_eq!(unflatten(&p), vec![1, 2, 3, 4, 5]);
        let one = flatten_codes(&[7], 8);
        assert_eq!((one.width, one.height, one.samples.clone()), (1, 1, vec![7]));
        assert_eq!(unflatten(&one), vec![7]);
        assert_eq!(plane_geometry(0), (0, 0));
        assert_eq!(plane_geometry(16), (4, 4));
        assert_eq!(plane_geometry(17), (5, 4));
    }

    #[test]
    fn channel_list_layout() {
        let c = channel_list(1);
        assert_eq!(c.len(), 23);
        assert_eq!(c[0], ChannelId { attribute: Attribute::Position, component: 0 });
        assert_eq!(c[10], ChannelId { attribute: Attribute::Opacity, component: 0 });
        assert!(c.windows(2).all(|w| w[0] < w[1]));
    }

    fn key(frame: u32, layer: u8) -> PlaneKey {
        PlaneKey { group: 0, layer, channel: CH, frame }
    }

    #[test]
    fn arrange_orders_layer_then_frame() {
        let p = flatten_codes(&[1, 2], 8);
        let input = vec![
            (key(1, 1), p.clone()),
            (key(0, 0), p.clone()),
            (key(0, 1), p.clone()),
            (key(1, 0), p.clone()),
        ];
        let seq = arrange_sequences(input.clone()).unwrap();
        let order: Vec<(u8, u32)> = seq.entries.iter().map(|(k, _)| (k.layer, k.frame)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(seq.runs().len(), 2);
        let mut rev = input;
        rev.reverse();
        assert_eq!(arrange_sequences(rev).unwrap(), seq);
    }

    #[test]
    fn arrange_rejects_inconsistent_counts() {
        let input = vec![(key(0, 0), flatten_codes(&[1, 2], 8)), (key(1, 0), flatten_codes(&[1], 8))];
        assert!(matches!(arrange_sequences(input), Err(QuantError::Inconsistent { .. })));
    }

    #[test]
    fn morton_order_is_permutation() {
        let gs: Vec<Gaussian> = (0..20)
            .map(|i| Gaussian {
                position: [(i % 4) as f32, (i / 4) as f32, 0.0],
                rotation: [1.0, 0.0, 0.0, 0.0],
                scales: [0.1; 3],
                opacity: 0.5,
                sh: vec![0.0; 3],
            })
            .collect();
        let mut o = morton_order(&gs);
        assert_eq!(o[0], 0);
        o.sort();
        assert_eq!(o, (0..20).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn quantizer_error_bound(v in prop::collection::vec(-1e3f32..1e3, 1..200), b in prop::sample::select(vec![8u8, 16, 32])) {
            let q = quantize_channel(&v, b, CH).unwrap();
            let plane = flatten_to_plane(&q);
            let codes = unflatten(&plane);
            prop_assert_eq!(&codes, &q.codes);
            let back = dequantize_channel(&q);
            let half = step(b, q.range_min, q.range_max) / 2.0;
            for (a, r) in v.iter().zip(&back) {
                let slack = 8.0 * f32::EPSILON as f64 * (a.abs() as f64).max(1.0);
                prop_assert!(((*a as f64) - (*r as f64)).abs() <= half + slack);
                prop_assert!(codes.iter().all(|&c| c <= max_code(b)));
            }
        }

        #[test]
        fn plane_geometry_is_tight(n in 1usize..100_000) {
            let (w, h) = plane_geometry(n);
            prop_assert!(w * h >= n);
            prop_assert!((w - 1) * (w - 1) < n && w * w >= n);
            prop_assert!(w * (h - 1) < n);
        }

        #[test]
        fn flatten_round_trip(codes in prop::collection::vec(0u32..256, 1..500)) {
            let p = flatten_codes(&codes, 8);
            prop_assert_eq!(unflatten(&p), codes.clone());
            let last = *codes.last().unwrap();
            prop_assert!(p.samples[codes.len()..].iter().all(|&s| s == last));
        }
    }
}
