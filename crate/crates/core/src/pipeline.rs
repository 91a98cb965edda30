//! Sequence encoder and progressive decoder.
//!
//! Each group is coded as a quantized keyframe plus closed-loop deltas: the
//! encoder applies every quantized delta to its own reconstruction, exactly as
//! the decoder will, so errors never accumulate across frames.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::codec::{decode_planes, encode_planes, CodecError, CodedPayload};
use crate::config::{EncodeConfig, Grouping};
use crate::container::{
    read_layers_from, slot_list, ContainerData, ContainerError, ContainerIndex, GroupPayloads, GsvHeader, LayerData,
    SlotId, SlotPayload, FLAG_MORTON,
};
use crate::error::{Error, Result};
use crate::gaussian::{layer_order, prune_indices, Aabb, Gaussian, GaussianSet, LayeredFrame, DEFAULT_LAMBDA_PSI};
use crate::math::{quat_inverse, quat_mul, quat_normalize_f32, sh_coeff_count, to_f64x4, QUAT_IDENTITY};
use crate::motion::{
    apply_frame_delta, fixed_groups, mean_translation, plan_groups, reconstruct_frame, rigid_between, FrameDelta,
    GroupPlan, ResidualDelta, RigidDelta, SCALE_FLOOR,
};
use crate::quant::{
    channel_list, channel_values, dequantize_value, flatten_codes, max_code, morton_order, quantize_channel,
    quantize_value, set_channel_value, step, unflatten, Attribute, ChannelId, FlattenOrder, Plane,
};
use crate::rate::{fit_gaussian, gaussian_code_length, kde_pmf, symbol_of};

/// Delta ranges keep this many steps of headroom beyond the open-loop
/// extremes (closed-loop deltas differ from open-loop ones by the previous
/// frame's reconstruction error).
const SCALAR_MARGIN: f64 = 1.0;
/// Rotation error after renormalization is up to twice the cell half-diagonal.
const ROTATION_MARGIN: f64 = 2.2;
const F32_EXACT: f64 = (1u64 << 24) as f64;

pub fn bits_for(ch: ChannelId, pos_bits: u8) -> u8 {
    if ch.attribute == Attribute::Position {
        pos_bits
    } else {
        8
    }
}

// ---------------------------------------------------------------------------
// Grouping

/// Mean translation of each frame after the first; a change in Gaussian
/// count reads as infinite motion so it always opens a group.
pub fn motion_profile(frames: &[GaussianSet]) -> Result<Vec<f64>> {
    frames
        .windows(2)
        .map(|w| {
            if w[0].len() != w[1].len() {
                Ok(f64::INFINITY)
            } else {
                Ok(mean_translation(&rigid_between(&w[0], &w[1])?)?)
            }
        })
        .collect()
}

/// `(start, frame_count)` per group.
pub fn group_plan(frames: &[GaussianSet], cfg: &EncodeConfig) -> Result<Vec<(usize, usize)>> {
    let n = frames.len();
    let motion = motion_profile(frames)?;
    let plan = match cfg.grouping {
        Grouping::Adaptive => plan_groups(&motion, cfg.tau_mu)?,
        Grouping::Fixed(len) => {
            let mut b = fixed_groups(n, len).boundaries;
            b.extend(motion.iter().enumerate().filter(|(_, m)| m.is_infinite()).map(|(i, _)| i + 1));
            b.sort_unstable();
            b.dedup();
            GroupPlan {
                boundaries: b,
                tau_mu: f64::INFINITY,
            }
        }
    };
    let mut out = Vec::new();
    for (start, count) in plan.groups(n) {
        let mut s = start;
        while s < start + count {
            let c = (start + count - s).min(u16::MAX as usize);
            out.push((s, c));
            s += c;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Shared value assembly (encoder reconstruction and decoder use the same code)

fn empty_gaussian(degree: u8) -> Gaussian {
    Gaussian {
        position: [0.0; 3],
        rotation: [0.0; 4],
        scales: [0.0; 3],
        opacity: 0.0,
        sh: vec![0.0; sh_coeff_count(degree)],
    }
}

#[derive(Debug, Clone, Copy)]
struct ChannelCoding {
    bits: u8,
    min: f32,
    max: f32,
}

fn key_from_codes(n: usize, degree: u8, channels: &[ChannelId], codes: &[&[u32]], coding: &[ChannelCoding]) -> Vec<Gaussian> {
    let mut gs = vec![empty_gaussian(degree); n];
    for ((&ch, c), q) in channels.iter().zip(codes).zip(coding) {
        for (g, &code) in gs.iter_mut().zip(c.iter()) {
            set_channel_value(g, ch, dequantize_value(code, q.bits, q.min, q.max) as f32);
        }
    }
    for g in &mut gs {
        g.rotation = quat_normalize_f32(to_f64x4(g.rotation));
        for s in &mut g.scales {
            *s = s.max(SCALE_FLOOR);
        }
        g.opacity = g.opacity.clamp(0.0, 1.0);
    }
    gs
}

fn delta_from_codes(
    n: usize,
    degree: u8,
    channels: &[ChannelId],
    codes: &[&[u32]],
    coding: &[ChannelCoding],
) -> FrameDelta {
    let mut rigid = RigidDelta::identity(n);
    let mut residual = ResidualDelta::zero(n, degree);
    for ((&ch, c), q) in channels.iter().zip(codes).zip(coding) {
        let k = ch.component as usize;
        for (i, &code) in c.iter().enumerate() {
            let v = dequantize_value(code, q.bits, q.min, q.max) as f32;
            match ch.attribute {
                Attribute::Position => rigid.translations[i][k] = v,
                Attribute::Rotation => rigid.rotations[i][k] = v,
                Attribute::Scale => residual.d_scales[i][k] = v,
                Attribute::Opacity => residual.d_opacity[i] = v,
                Attribute::Sh => residual.d_sh[i][k] = v,
            }
        }
    }
    FrameDelta {
        rigid,
        residual,
        frame_index: 0,
    }
}

fn concat_deltas(parts: Vec<FrameDelta>, frame_index: usize) -> FrameDelta {
    let mut out = FrameDelta {
        frame_index,
        ..Default::default()
    };
    for p in parts {
        out.rigid.translations.extend(p.rigid.translations);
        out.rigid.rotations.extend(p.rigid.rotations);
        out.residual.d_scales.extend(p.residual.d_scales);
        out.residual.d_opacity.extend(p.residual.d_opacity);
        out.residual.d_sh.extend(p.residual.d_sh);
    }
    out
}

/// `R_next · R_prev⁻¹` with a non-negative scalar part; identical rotations
/// give the exact identity.
fn rotation_delta(prev: [f32; 4], next: [f32; 4]) -> [f64; 4] {
    if prev == next {
        return to_f64x4(QUAT_IDENTITY);
    }
    let d = quat_mul(to_f64x4(next), quat_inverse(to_f64x4(prev)));
    if d[0] < 0.0 {
        d.map(|v| -v)
    } else {
        d
    }
}

/// Euclidean distance between quaternions, up to sign.
pub fn quat_distance(a: [f32; 4], b: [f32; 4]) -> f64 {
    let (a, b) = (to_f64x4(a), to_f64x4(b));
    let minus: f64 = (0..4).map(|k| (a[k] - b[k]).powi(2)).sum();
    let plus: f64 = (0..4).map(|k| (a[k] + b[k]).powi(2)).sum();
    minus.min(plus).sqrt()
}

/// Half-diagonal of the rotation quantization cell. Rotations already this
/// close to their target are left unchanged instead of corrected.
fn rotation_half_diagonal(channels: &[ChannelId], coding: &[ChannelCoding]) -> f64 {
    channels
        .iter()
        .zip(coding)
        .filter(|(c, _)| c.attribute == Attribute::Rotation)
        .map(|(_, q)| (step(q.bits, q.min, q.max) / 2.0).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn channel_delta(prev: &Gaussian, next: &Gaussian, rot: &[f64; 4], ch: ChannelId) -> f64 {
    let k = ch.component as usize;
    match ch.attribute {
        Attribute::Position => next.position[k] as f64 - prev.position[k] as f64,
        Attribute::Rotation => rot[k],
        Attribute::Scale => next.scales[k] as f64 - prev.scales[k] as f64,
        Attribute::Opacity => next.opacity as f64 - prev.opacity as f64,
        Attribute::Sh => next.sh[k] as f64 - prev.sh[k] as f64,
    }
}

fn pow2_at_least(x: f64) -> f64 {
    let mut h = 2f64.powi(x.log2().ceil() as i32);
    while h < x {
        h *= 2.0;
    }
    while h / 2.0 >= x {
        h /= 2.0;
    }
    h
}

/// Quantization range of a delta channel.
///
/// For 8/16-bit channels the step is a power of two no smaller than `h_ref`
/// and the range is `[-k·h, (2^b − 1 − k)·h]`, so every code dequantizes to an
/// exact multiple of `h` (zero included when in range). `margin` steps of
/// headroom sit beyond `[dmin, dmax]` on both sides.
fn delta_range(dmin: f64, dmax: f64, bits: u8, h_ref: f64, margin: f64) -> (f32, f32) {
    let top = max_code(bits) as f64;
    let spread = dmax - dmin;
    let h_req = (spread / (top - 2.0 - 2.0 * margin)).max(h_ref).max(2f64.powi(-100));
    if bits == 32 {
        let lo = dmin - (margin + 1.0) * h_req;
        let hi = lo + top * h_req;
        let mut lo32 = lo as f32;
        if lo32 as f64 > lo {
            lo32 = lo32.next_down();
        }
        let mut hi32 = hi as f32;
        if (hi32 as f64) < hi {
            hi32 = hi32.next_up();
        }
        return (lo32, hi32);
    }
    let mut h = pow2_at_least(h_req);
    loop {
        let k = (margin - dmin / h).ceil();
        if k.abs() + top + 1.0 <= F32_EXACT {
            return ((-k * h) as f32, ((top - k) * h) as f32);
        }
        h *= 2.0;
    }
}

/// Step that governs `channel` in the rotation block: the largest of the four.
fn rotation_reference(channels: &[ChannelId], per_channel: &[f64]) -> f64 {
    channels
        .iter()
        .zip(per_channel)
        .filter(|(c, _)| c.attribute == Attribute::Rotation)
        .map(|(_, &h)| h)
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Encoder

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributeRate {
    pub attribute: &'static str,
    pub role: &'static str,
    pub symbols: u64,
    /// KDE model for keyframe channels, fitted Gaussian for deltas.
    pub estimated_bits: Option<f64>,
    pub actual_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub start: usize,
    pub frames: usize,
    pub layer_counts: Vec<usize>,
    pub layer_bytes: Vec<u64>,
    pub pos_bits: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EncodeReport {
    pub frames: usize,
    pub groups: Vec<GroupReport>,
    /// Payload bytes of each layer summed over groups.
    pub layer_bytes: Vec<u64>,
    pub payload_bytes: u64,
    pub file_bytes: u64,
    pub attributes: Vec<AttributeRate>,
    pub wall_ms: f64,
}

/// Per-group bookkeeping the decoder does not need.
#[derive(Debug, Clone, PartialEq)]
pub struct CodedGroup {
    pub start: usize,
    pub frame_count: usize,
    pub layer_counts: Vec<usize>,
    /// For each coded Gaussian, its index in the group's input frames.
    pub source_map: Vec<usize>,
    pub pos_bits: u8,
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub data: ContainerData,
    pub groups: Vec<CodedGroup>,
    /// Encoder-side reconstruction of every frame (all layers, coded order);
    /// the decoder reproduces it bit-exactly.
    pub reconstruction: Vec<GaussianSet>,
    pub report: EncodeReport,
}

impl Encoded {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.data.to_bytes()?)
    }

    pub fn index(&self) -> Result<ContainerIndex> {
        Ok(self.data.index()?)
    }
}

struct GroupOut {
    payloads: GroupPayloads,
    info: CodedGroup,
    recon: Vec<GaussianSet>,
    rates: Vec<(SlotId, u64, Option<f64>, u64)>,
}

fn reduce_degree(set: &GaussianSet, degree: u8) -> GaussianSet {
    if set.sh_degree() == degree {
        return set.clone();
    }
    let n = sh_coeff_count(degree);
    let gs = set
        .gaussians()
        .iter()
        .map(|g| Gaussian {
            sh: g.sh[..n].to_vec(),
            ..g.clone()
        })
        .collect();
    GaussianSet::from_valid(gs, degree)
}

pub fn encode_sequence(frames: &[GaussianSet], cfg: &EncodeConfig) -> Result<Encoded> {
    let t0 = Instant::now();
    cfg.validate().map_err(Error::Config)?;
    let first = frames.first().ok_or_else(|| Error::Input("no frames".into()))?;
    let in_degree = first.sh_degree();
    if let Some(i) = frames.iter().position(|f| f.sh_degree() != in_degree) {
        return Err(Error::Input(format!("frame {i} has a different sh degree")));
    }
    if let Some(i) = frames.iter().position(|f| f.is_empty()) {
        return Err(Error::Input(format!("frame {i} is empty")));
    }
    let degree = cfg.sh_degree.unwrap_or(in_degree);
    if degree > in_degree {
        return Err(Error::Config(format!("sh degree {degree} above the input's {in_degree}")));
    }
    if frames.len() > u32::MAX as usize {
        return Err(Error::Input("too many frames".into()));
    }
    let frames: Vec<GaussianSet> = frames.iter().map(|f| reduce_degree(f, degree)).collect();
    let bounds = frames.iter().fold(Aabb::EMPTY, |b, f| b.union(&f.bounds()));
    let pos_bits = match cfg.wide_position_extent {
        Some(e) if bounds.extent() > e => 32,
        _ => cfg.pos_bits,
    };
    let plan = group_plan(&frames, cfg)?;
    let mut groups = Vec::with_capacity(plan.len());
    for &(start, count) in &plan {
        groups.push(encode_group(&frames[start..start + count], start, degree, pos_bits, cfg)?);
    }

    let layers = cfg.layers;
    let mut layer_bytes = vec![0u64; layers];
    let mut group_reports = Vec::with_capacity(groups.len());
    for g in &groups {
        let per_layer: Vec<u64> = g
            .payloads
            .layers
            .iter()
            .map(|l| l.iter().map(|p| p.bytes.len() as u64).sum())
            .collect();
        for (acc, b) in layer_bytes.iter_mut().zip(&per_layer) {
            *acc += b;
        }
        group_reports.push(GroupReport {
            start: g.info.start,
            frames: g.info.frame_count,
            layer_counts: g.info.layer_counts.clone(),
            layer_bytes: per_layer,
            pos_bits,
        });
    }
    let attributes = aggregate_rates(groups.iter().flat_map(|g| g.rates.iter()));

    let data = ContainerData {
        layers: layers as u8,
        sh_degree: degree,
        fps_num: cfg.fps_num,
        fps_den: cfg.fps_den,
        bounds: [bounds.min[0], bounds.min[1], bounds.min[2], bounds.max[0], bounds.max[1], bounds.max[2]],
        flags: if cfg.flatten_order == FlattenOrder::Morton { FLAG_MORTON } else { 0 },
        groups: Vec::with_capacity(groups.len()),
    };
    let mut data = data;
    let mut infos = Vec::with_capacity(groups.len());
    let mut reconstruction = Vec::with_capacity(frames.len());
    for g in groups {
        data.groups.push(g.payloads);
        infos.push(g.info);
        reconstruction.extend(g.recon);
    }
    let index = data.index()?;
    let payload_bytes = index.payload_bytes();
    let report = EncodeReport {
        frames: frames.len(),
        groups: group_reports,
        layer_bytes,
        payload_bytes,
        file_bytes: index.file_len(),
        attributes,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
    };
    Ok(Encoded {
        data,
        groups: infos,
        reconstruction,
        report,
    })
}

fn aggregate_rates<'a>(rows: impl Iterator<Item = &'a (SlotId, u64, Option<f64>, u64)>) -> Vec<AttributeRate> {
    let mut out: Vec<AttributeRate> = Vec::new();
    for (slot, symbols, est, actual) in rows {
        let attribute = slot.channel.attribute.name();
        let role = if slot.delta { "delta" } else { "key" };
        let row = match out.iter_mut().find(|r| r.attribute == attribute && r.role == role) {
            Some(r) => r,
            None => {
                out.push(AttributeRate {
                    attribute,
                    role,
                    symbols: 0,
                    estimated_bits: Some(0.0),
                    actual_bits: 0,
                });
                out.last_mut().unwrap()
            }
        };
        row.symbols += symbols;
        row.actual_bits += actual;
        row.estimated_bits = match (row.estimated_bits, est) {
            (Some(a), Some(b)) => Some(a + b),
            _ => None,
        };
    }
    out.sort_by_key(|r| (r.role, r.attribute));
    out
}

fn estimate_bits(codes: &[u32], delta: bool) -> Option<f64> {
    if codes.is_empty() {
        return Some(0.0);
    }
    let v: Vec<f64> = codes.iter().map(|&c| c as f64).collect();
    if delta {
        let (m, s) = fit_gaussian(&v);
        Some(v.iter().map(|&x| gaussian_code_length(m, s, symbol_of(x))).sum())
    } else {
        // A KDE table over a 32-bit support is not tractable.
        let (lo, hi) = codes.iter().fold((u32::MAX, 0), |(a, b), &c| (a.min(c), b.max(c)));
        if hi - lo > 1 << 20 {
            return None;
        }
        let pmf = kde_pmf(&v).ok()?;
        Some(pmf.mean_code_length(&v) * v.len() as f64)
    }
}

fn encode_group(frames: &[GaussianSet], start: usize, degree: u8, pos_bits: u8, cfg: &EncodeConfig) -> Result<GroupOut> {
    let key = &frames[0];
    let keep: Vec<usize> = if cfg.prune_fraction > 0.0 {
        prune_indices(key, cfg.prune_fraction)?
    } else {
        (0..key.len()).collect()
    };
    if keep.is_empty() {
        return Err(Error::Input(format!("group at frame {start} is empty after pruning")));
    }
    let pruned = key.select(&keep);
    let (order, sizes) = layer_order(&pruned, cfg.layers, &cfg.fractions(), cfg.lambda_psi)?;
    let mut map: Vec<usize> = order.iter().map(|&i| keep[i]).collect();
    let mut offsets = Vec::with_capacity(sizes.len() + 1);
    offsets.push(0);
    for s in &sizes {
        offsets.push(offsets.last().unwrap() + s);
    }
    if cfg.flatten_order == FlattenOrder::Morton {
        for l in 0..sizes.len() {
            let slice = map[offsets[l]..offsets[l + 1]].to_vec();
            let sub = key.select(&slice);
            for (dst, j) in morton_order(sub.gaussians()).into_iter().enumerate() {
                map[offsets[l] + dst] = slice[j];
            }
        }
    }
    let src: Vec<GaussianSet> = frames.iter().map(|f| f.select(&map)).collect();
    let channels = channel_list(degree);
    let bits: Vec<u8> = channels.iter().map(|&c| bits_for(c, pos_bits)).collect();
    let layers = sizes.len();
    let n_frames = frames.len();

    // Keyframe.
    let mut key_codes: Vec<Vec<Vec<u32>>> = Vec::with_capacity(layers);
    let mut key_coding: Vec<Vec<ChannelCoding>> = Vec::with_capacity(layers);
    let mut recon0 = Vec::with_capacity(map.len());
    for l in 0..layers {
        let slice = &src[0].gaussians()[offsets[l]..offsets[l + 1]];
        let mut codes = Vec::with_capacity(channels.len());
        let mut coding = Vec::with_capacity(channels.len());
        for (&ch, &b) in channels.iter().zip(&bits) {
            if slice.is_empty() {
                codes.push(Vec::new());
                coding.push(ChannelCoding { bits: b, min: 0.0, max: 0.0 });
                continue;
            }
            let q = quantize_channel(&channel_values(slice, ch), b, ch)?;
            coding.push(ChannelCoding {
                bits: b,
                min: q.range_min,
                max: q.range_max,
            });
            codes.push(q.codes);
        }
        let refs: Vec<&[u32]> = codes.iter().map(Vec::as_slice).collect();
        recon0.extend(key_from_codes(slice.len(), degree, &channels, &refs, &coding));
        key_codes.push(codes);
        key_coding.push(coding);
    }
    let mut recon = vec![GaussianSet::from_valid(recon0, degree)];

    // Delta ranges from open-loop deltas over the whole group.
    let mut delta_coding: Vec<Vec<ChannelCoding>> = (0..layers)
        .map(|_| bits.iter().map(|&b| ChannelCoding { bits: b, min: 0.0, max: 0.0 }).collect())
        .collect();
    if n_frames > 1 {
        for l in 0..layers {
            let (a, b) = (offsets[l], offsets[l + 1]);
            if a == b {
                continue;
            }
            let mut lo = vec![f64::INFINITY; channels.len()];
            let mut hi = vec![f64::NEG_INFINITY; channels.len()];
            let mut mag = vec![0f64; channels.len()];
            for t in 1..n_frames {
                let (p, q) = (&src[t - 1].gaussians()[a..b], &src[t].gaussians()[a..b]);
                for (gp, gq) in p.iter().zip(q) {
                    let rot = rotation_delta(gp.rotation, gq.rotation);
                    for (c, &ch) in channels.iter().enumerate() {
                        let d = channel_delta(gp, gq, &rot, ch);
                        lo[c] = lo[c].min(d);
                        hi[c] = hi[c].max(d);
                        let v = crate::quant::channel_value(gq, ch).abs() as f64;
                        mag[c] = mag[c].max(v);
                    }
                }
            }
            let key_steps: Vec<f64> = key_coding[l].iter().map(|k| step(k.bits, k.min, k.max)).collect();
            let top_rot = max_code(8) as f64 - 2.0 - 2.0 * ROTATION_MARGIN;
            let rot_req = channels
                .iter()
                .enumerate()
                .filter(|(_, c)| c.attribute == Attribute::Rotation)
                .map(|(i, _)| (hi[i] - lo[i]) / top_rot)
                .fold(rotation_reference(&channels, &key_steps), f64::max);
            // The identity rotation must stay representable for skipped updates.
            for (c, ch) in channels.iter().enumerate() {
                if ch.attribute == Attribute::Rotation {
                    let id = QUAT_IDENTITY[ch.component as usize] as f64;
                    lo[c] = lo[c].min(id);
                    hi[c] = hi[c].max(id);
                }
            }
            for (c, &ch) in channels.iter().enumerate() {
                // f32 rounding of the reconstructed value adds up to an ulp.
                let slack = mag[c] * f32::EPSILON as f64 * 2.0;
                let (dmin, dmax) = (lo[c] - slack, hi[c] + slack);
                let (h_ref, margin) = if ch.attribute == Attribute::Rotation {
                    (rot_req, ROTATION_MARGIN)
                } else {
                    (key_steps[c], SCALAR_MARGIN)
                };
                let (min, max) = delta_range(dmin, dmax, bits[c], h_ref, margin);
                delta_coding[l][c] = ChannelCoding { bits: bits[c], min, max };
            }
        }
    }

    // Closed loop: `delta_codes[l][c][t - 1]`.
    let mut delta_codes: Vec<Vec<Vec<Vec<u32>>>> = vec![vec![Vec::with_capacity(n_frames.saturating_sub(1)); channels.len()]; layers];
    for t in 1..n_frames {
        let prev = recon.last().unwrap();
        let target = &src[t];
        let mut parts = Vec::with_capacity(layers);
        for l in 0..layers {
            let (a, b) = (offsets[l], offsets[l + 1]);
            let (p, q) = (&prev.gaussians()[a..b], &target.gaussians()[a..b]);
            let skip = rotation_half_diagonal(&channels, &delta_coding[l]);
            let rots: Vec<[f64; 4]> = p
                .iter()
                .zip(q)
                .map(|(gp, gq)| {
                    if quat_distance(gp.rotation, gq.rotation) <= skip {
                        to_f64x4(QUAT_IDENTITY)
                    } else {
                        rotation_delta(gp.rotation, gq.rotation)
                    }
                })
                .collect();
            let mut codes = Vec::with_capacity(channels.len());
            for (c, &ch) in channels.iter().enumerate() {
                let cc = delta_coding[l][c];
                let col = p
                    .iter()
                    .zip(q)
                    .zip(&rots)
                    .map(|((gp, gq), r)| quantize_value(channel_delta(gp, gq, r, ch), cc.bits, cc.min, cc.max))
                    .collect::<std::result::Result<Vec<u32>, _>>();
                codes.push(if a == b { Vec::new() } else { col? });
            }
            let refs: Vec<&[u32]> = codes.iter().map(Vec::as_slice).collect();
            parts.push(delta_from_codes(b - a, degree, &channels, &refs, &delta_coding[l]));
            for (c, v) in codes.into_iter().enumerate() {
                delta_codes[l][c].push(v);
            }
        }
        let fd = concat_deltas(parts, t);
        let next = apply_frame_delta(prev, &fd)?;
        recon.push(next);
    }

    // Payloads, in parallel over (layer, slot).
    let slots = slot_list(degree);
    let jobs: Vec<(usize, usize)> = (0..layers).flat_map(|l| (0..slots.len()).map(move |s| (l, s))).collect();
    let c_count = channels.len();
    let results: Vec<std::result::Result<(SlotPayload, (SlotId, u64, Option<f64>, u64)), CodecError>> = jobs
        .par_iter()
        .map(|&(l, s)| {
            let n = sizes[l];
            let delta = s >= c_count;
            let c = s % c_count;
            let (cc, payload, flat): (ChannelCoding, CodedPayload, Vec<u32>) = if !delta {
                let cc = key_coding[l][c];
                if n == 0 {
                    (cc, CodedPayload::empty(cfg.codec, cc.bits, 0)?, Vec::new())
                } else {
                    let plane = flatten_codes(&key_codes[l][c], cc.bits);
                    (cc, encode_planes(&[plane], cfg.codec)?, key_codes[l][c].clone())
                }
            } else {
                let cc = delta_coding[l][c];
                if n == 0 || n_frames == 1 {
                    (cc, CodedPayload::empty(cfg.codec, cc.bits, n)?, Vec::new())
                } else {
                    let planes: Vec<Plane> = delta_codes[l][c].iter().map(|v| flatten_codes(v, cc.bits)).collect();
                    (cc, encode_planes(&planes, cfg.codec)?, delta_codes[l][c].concat())
                }
            };
            let bytes = payload.to_bytes();
            let est = if cfg.estimate_rates { estimate_bits(&flat, delta) } else { None };
            let rate = (slots[s], flat.len() as u64, est, bytes.len() as u64 * 8);
            Ok((
                SlotPayload {
                    range_min: cc.min,
                    range_max: cc.max,
                    bytes,
                },
                rate,
            ))
        })
        .collect();
    let mut layer_payloads: Vec<Vec<SlotPayload>> = (0..layers).map(|_| Vec::with_capacity(slots.len())).collect();
    let mut rates = Vec::with_capacity(jobs.len());
    for ((l, _), r) in jobs.iter().zip(results) {
        let (p, rate) = r?;
        layer_payloads[*l].push(p);
        rates.push(rate);
    }
    Ok(GroupOut {
        payloads: GroupPayloads {
            start: start as u32,
            frame_count: n_frames as u16,
            layer_counts: sizes.iter().map(|&s| s as u32).collect(),
            pos_bits,
            layers: layer_payloads,
        },
        info: CodedGroup {
            start,
            frame_count: n_frames,
            layer_counts: sizes,
            source_map: map,
            pos_bits,
        },
        recon,
        rates,
    })
}

// ---------------------------------------------------------------------------
// Decoder

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedGroup {
    pub start: usize,
    pub frame_count: usize,
    pub keyframe: LayeredFrame,
    /// `deltas[t - 1]` takes local frame `t − 1` to `t`.
    pub deltas: Vec<FrameDelta>,
}

impl DecodedGroup {
    pub fn frame(&self, t: usize) -> Result<GaussianSet> {
        Ok(reconstruct_frame(&self.keyframe, &self.deltas, t)?)
    }

    pub fn frames(&self) -> Result<Vec<GaussianSet>> {
        let mut out = Vec::with_capacity(self.frame_count);
        out.push(self.keyframe.flatten(self.keyframe.num_layers()));
        for d in &self.deltas {
            let next = apply_frame_delta(out.last().unwrap(), d)?;
            out.push(next);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedSequence {
    pub header: GsvHeader,
    pub layers_read: usize,
    pub groups: Vec<DecodedGroup>,
}

impl DecodedSequence {
    pub fn frame_count(&self) -> usize {
        self.groups.iter().map(|g| g.frame_count).sum()
    }

    /// `(group, local frame)` of global frame `t`.
    pub fn locate(&self, t: usize) -> Option<(usize, usize)> {
        self.groups
            .iter()
            .position(|g| g.start <= t && t < g.start + g.frame_count)
            .map(|i| (i, t - self.groups[i].start))
    }

    pub fn frame(&self, t: usize) -> Result<GaussianSet> {
        let (g, local) = self
            .locate(t)
            .ok_or_else(|| Error::Input(format!("frame {t} beyond {} frames", self.frame_count())))?;
        self.groups[g].frame(local)
    }

    pub fn frames(&self) -> Result<Vec<GaussianSet>> {
        let mut out = Vec::with_capacity(self.frame_count());
        for g in &self.groups {
            out.extend(g.frames()?);
        }
        Ok(out)
    }
}

fn payload_err(group: usize, layer: usize, slot: SlotId, source: CodecError) -> Error {
    Error::Container(ContainerError::Payload {
        group,
        layer: layer + 1,
        slot,
        source,
    })
}

/// Decodes one payload and checks its plane count and bit width.
fn decode_slot(bytes: &[u8], valid: usize, planes: usize, bits: u8) -> std::result::Result<Vec<Plane>, CodecError> {
    let p = CodedPayload::from_bytes(bytes)?;
    if p.bits != bits {
        return Err(CodecError::Corrupt(format!("{}-bit payload where {bits} bits expected", p.bits)));
    }
    if p.count as usize != planes {
        return Err(CodecError::Corrupt(format!("{} planes where {planes} expected", p.count)));
    }
    decode_planes(&p, valid)
}

/// Decodes layers `1..=data.layers_read` of every group.
pub fn decode_layer_data(data: &LayerData) -> Result<DecodedSequence> {
    let index = &data.index;
    let degree = index.header.sh_degree;
    let channels = channel_list(degree);
    let slots = slot_list(degree);
    let c_count = channels.len();
    let l_read = data.layers_read;
    let jobs: Vec<(usize, usize, usize)> = (0..index.groups.len())
        .flat_map(|g| (0..l_read).flat_map(move |l| (0..2 * c_count).map(move |s| (g, l, s))))
        .collect();
    let decoded: Vec<Result<Vec<Plane>>> = jobs
        .par_iter()
        .map(|&(g, l, s)| {
            let entry = &index.groups[g];
            let n = entry.layer_counts[l] as usize;
            let delta = s >= c_count;
            let planes = match (n, delta) {
                (0, _) => 0,
                (_, false) => 1,
                (_, true) => entry.frame_count as usize - 1,
            };
            let bits = bits_for(channels[s % c_count], entry.pos_bits);
            decode_slot(&data.payloads[g][l][s], n, planes, bits).map_err(|e| payload_err(g, l, slots[s], e))
        })
        .collect();
    let mut decoded = decoded.into_iter();

    let mut groups = Vec::with_capacity(index.groups.len());
    for entry in &index.groups {
        let total: usize = entry.layer_counts.iter().map(|&c| c as usize).sum();
        let frames = entry.frame_count as usize;
        let mut key_layers = Vec::with_capacity(l_read);
        let mut delta_parts: Vec<Vec<FrameDelta>> = vec![Vec::with_capacity(l_read); frames.saturating_sub(1)];
        for l in 0..l_read {
            let n = entry.layer_counts[l] as usize;
            let mut slot_planes: Vec<Vec<Plane>> = Vec::with_capacity(2 * c_count);
            for _ in 0..2 * c_count {
                slot_planes.push(decoded.next().expect("one result per job")?);
            }
            let coding: Vec<ChannelCoding> = entry.payloads[l]
                .iter()
                .zip(channels.iter().chain(channels.iter()))
                .map(|(p, &ch)| ChannelCoding {
                    bits: bits_for(ch, entry.pos_bits),
                    min: p.range_min,
                    max: p.range_max,
                })
                .collect();
            let key_codes: Vec<Vec<u32>> = slot_planes[..c_count]
                .iter()
                .map(|p| p.first().map(unflatten).unwrap_or_default())
                .collect();
            let refs: Vec<&[u32]> = key_codes.iter().map(Vec::as_slice).collect();
            key_layers.push(GaussianSet::from_valid(
                key_from_codes(n, degree, &channels, &refs, &coding[..c_count]),
                degree,
            ));
            for (t, part) in delta_parts.iter_mut().enumerate() {
                let codes: Vec<Vec<u32>> = slot_planes[c_count..]
                    .iter()
                    .map(|p| p.get(t).map(unflatten).unwrap_or_default())
                    .collect();
                let refs: Vec<&[u32]> = codes.iter().map(Vec::as_slice).collect();
                part.push(delta_from_codes(n, degree, &channels, &refs, &coding[c_count..]));
            }
        }
        let fractions = entry
            .layer_counts
            .iter()
            .map(|&c| c as f64 / total.max(1) as f64)
            .collect();
        let keyframe = LayeredFrame::from_layers(key_layers, fractions, DEFAULT_LAMBDA_PSI)?;
        let deltas = delta_parts
            .into_iter()
            .enumerate()
            .map(|(t, parts)| concat_deltas(parts, t + 1))
            .collect();
        groups.push(DecodedGroup {
            start: entry.start as usize,
            frame_count: frames,
            keyframe,
            deltas,
        });
    }
    Ok(DecodedSequence {
        header: index.header.clone(),
        layers_read: l_read,
        groups,
    })
}

pub fn decode_bytes(bytes: &[u8], l: usize) -> Result<DecodedSequence> {
    let data = read_layers_from(&mut std::io::Cursor::new(bytes), l)?;
    decode_layer_data(&data)
}

pub fn decode_file(path: impl AsRef<Path>, l: usize) -> Result<DecodedSequence> {
    let data = crate::container::read_layers(path, l)?;
    decode_layer_data(&data)
}
