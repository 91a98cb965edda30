//! Plane-sequence codecs: raw little-endian passthrough and a lossless
//! predictive range coder, plus a static multi-symbol coder used to check
//! rate estimates against real code lengths.
//!
//! Payload layout (little-endian): codec_id u8, bits u8, W u16, H u16,
//! count u16, flags u16, body length u32, body, CRC-32 u32. The CRC covers
//! the 16 header bytes, the body and the decoded valid samples.
//!
//! Flags (reference codec only): bit 0 marks a raw fallback body, bit 1 a
//! constant run whose body is the single repeated sample.

use thiserror::Error;

use crate::quant::{check_bits, max_code, plane_geometry, Plane};
use crate::rate::PmfTable;

pub const PAYLOAD_HEADER_LEN: usize = 16;
pub const PAYLOAD_OVERHEAD: usize = PAYLOAD_HEADER_LEN + 4;
/// Set in the flags field when a reference-coded run fell back to raw samples.
pub const FLAG_RAW_FALLBACK: u16 = 1;
/// Every valid sample of every plane equals the one sample stored in the body.
pub const FLAG_CONSTANT: u16 = 2;

const PROB_BITS: u32 = 16;
const PROB_INIT: u16 = 1 << (PROB_BITS - 1);
/// Adaptation shift after `n` observations is `min(⌊log2(n + 2)⌋, 5)`: fast
/// while a context is young, then a fixed 1/32 rate.
const ADAPT_SHIFT_MAX: u32 = 5;
const ADAPT_COUNT_CAP: u8 = 30;
const TOP: u32 = 1 << 24;
/// Total of the frequency table used by the static coder.
pub const FREQ_TOTAL: u32 = 1 << 16;
const MAX_OVERRUN: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("unknown codec id {0}")]
    UnknownCodec(u8),
    #[error("codec {0:?} is an external plugin slot and has no built-in implementation")]
    Unsupported(CodecId),
    #[error("mixed plane geometry in one run")]
    MixedGeometry,
    #[error("empty run")]
    EmptyRun,
    #[error("geometry out of range: {0}")]
    Geometry(String),
    #[error("truncated payload: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("range decoder read past the end of the body")]
    Underrun,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("corrupt stream: {0}")]
    Corrupt(String),
    #[error("symbol {0} outside the probability table")]
    SymbolOutOfTable(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CodecId {
    Raw = 0,
    Reference = 1,
    /// Reserved for an external AVC elementary stream.
    ExternalAvc = 2,
}

impl CodecId {
    pub fn from_u8(v: u8) -> Result<Self, CodecError> {
        match v {
            0 => Ok(CodecId::Raw),
            1 => Ok(CodecId::Reference),
            2 => Ok(CodecId::ExternalAvc),
            other => Err(CodecError::UnknownCodec(other)),
        }
    }
}

// ---------------------------------------------------------------------------
// Range coder

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Codes `bit` under `p`, then adapts `p`.
    pub fn encode_bit(&mut self, p: &mut BitProb, bit: u32) {
        let bound = (self.range >> PROB_BITS) * p.p as u32;
        if bit == 0 {
            self.range = bound;
        } else {
            self.low += bound as u64;
            self.range -= bound;
        }
        p.update(bit);
        self.normalize();
    }

    /// Codes the interval `[start, start + size)` of a `2^16` total.
    pub fn encode_freq(&mut self, start: u32, size: u32) {
        let r = self.range >> PROB_BITS;
        self.low += (r * start) as u64;
        self.range = r * size;
        self.normalize();
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    data: &'a [u8],
    pos: usize,
    overrun: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = Self {
            code: 0,
            range: u32::MAX,
            data,
            pos: 0,
            overrun: 0,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        match self.data.get(self.pos) {
            Some(&b) => {
                self.pos += 1;
                b
            }
            None => {
                self.overrun += 1;
                0
            }
        }
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte() as u32;
        }
    }

    pub fn decode_bit(&mut self, p: &mut BitProb) -> u32 {
        let bound = (self.range >> PROB_BITS) * p.p as u32;
        let bit = if self.code < bound {
            self.range = bound;
            0
        } else {
            self.code -= bound;
            self.range -= bound;
            1
        };
        p.update(bit);
        self.normalize();
        bit
    }

    /// Cumulative count in `[0, 2^16)` of the next symbol; follow with [`Self::consume`].
    pub fn peek_freq(&mut self) -> u32 {
        let r = self.range >> PROB_BITS;
        (self.code / r).min(FREQ_TOTAL - 1)
    }

    pub fn consume(&mut self, start: u32, size: u32) {
        let r = self.range >> PROB_BITS;
        self.code = self.code.wrapping_sub(r * start);
        self.range = r * size;
        self.normalize();
    }

    pub fn check_overrun(&self) -> Result<(), CodecError> {
        if self.overrun > MAX_OVERRUN {
            Err(CodecError::Underrun)
        } else {
            Ok(())
        }
    }
}

/// 16-bit probability of a zero bit plus an observation count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitProb {
    p: u16,
    n: u8,
}

impl Default for BitProb {
    fn default() -> Self {
        Self { p: PROB_INIT, n: 0 }
    }
}

impl BitProb {
    pub fn p_zero(&self) -> u16 {
        self.p
    }

    fn update(&mut self, bit: u32) {
        let shift = (u8::BITS - 1 - (self.n + 2).leading_zeros()).min(ADAPT_SHIFT_MAX);
        if bit == 0 {
            self.p += (((1u32 << PROB_BITS) - self.p as u32) >> shift) as u16;
        } else {
            self.p -= self.p >> shift;
        }
        self.n = (self.n + 1).min(ADAPT_COUNT_CAP);
    }
}

/// Adaptive order-0 model of one byte: a 255-node binary tree of bit probabilities.
#[derive(Clone)]
struct ByteModel {
    probs: [BitProb; 256],
}

impl ByteModel {
    fn new() -> Self {
        Self {
            probs: [BitProb::default(); 256],
        }
    }

    fn encode(&mut self, enc: &mut RangeEncoder, byte: u8) {
        let mut m = 1usize;
        for i in (0..8).rev() {
            let bit = ((byte >> i) & 1) as u32;
            enc.encode_bit(&mut self.probs[m], bit);
            m = (m << 1) | bit as usize;
        }
    }

    fn decode(&mut self, dec: &mut RangeDecoder) -> u8 {
        let mut m = 1usize;
        for _ in 0..8 {
            let bit = dec.decode_bit(&mut self.probs[m]);
            m = (m << 1) | bit as usize;
        }
        (m - 256) as u8
    }
}

// ---------------------------------------------------------------------------
// Prediction

fn zigzag(residual: u32, bits: u8) -> u32 {
    // Wrapped difference reinterpreted as signed `bits`-wide integer.
    let shift = 32 - bits as u32;
    let s = ((residual << shift) as i32) >> shift;
    ((s << 1) ^ (s >> 31)) as u32 & max_code(bits)
}

fn unzigzag(z: u32, bits: u8) -> u32 {
    let v = (z >> 1) ^ (z & 1).wrapping_neg();
    v & max_code(bits)
}

fn predict(planes_prev: Option<&[u32]>, cur: &[u32], i: usize, w: usize, bits: u8) -> u32 {
    if let Some(prev) = planes_prev {
        return prev[i];
    }
    if i % w > 0 {
        return cur[i - 1];
    }
    if i >= w {
        return cur[i - w];
    }
    128u32 << (bits - 8)
}

fn pad_plane(samples: &mut Vec<u32>, n: usize) {
    if let Some(&last) = samples.last() {
        samples.resize(n, last);
    }
}

fn reference_body(planes: &[Plane], bits: u8, valid: usize) -> Vec<u8> {
    let nbytes = bits as usize / 8;
    let mut models = vec![ByteModel::new(); nbytes];
    let mut enc = RangeEncoder::new();
    let mask = max_code(bits);
    for (f, plane) in planes.iter().enumerate() {
        let prev = if f > 0 { Some(&planes[f - 1].samples[..]) } else { None };
        for i in 0..valid {
            let pred = predict(prev, &plane.samples, i, plane.width, bits);
            let z = zigzag(plane.samples[i].wrapping_sub(pred) & mask, bits);
            for (b, model) in models.iter_mut().enumerate() {
                model.encode(&mut enc, (z >> (8 * b)) as u8);
            }
        }
    }
    enc.finish()
}

fn decode_reference_body(
    body: &[u8],
    bits: u8,
    w: usize,
    h: usize,
    count: usize,
    valid: usize,
) -> Result<Vec<Plane>, CodecError> {
    let nbytes = bits as usize / 8;
    let mut models = vec![ByteModel::new(); nbytes];
    let mut dec = RangeDecoder::new(body);
    let mask = max_code(bits);
    let mut planes: Vec<Plane> = Vec::with_capacity(count);
    for f in 0..count {
        let mut cur = Vec::with_capacity(w * h);
        for i in 0..valid {
            let mut z = 0u32;
            for (b, model) in models.iter_mut().enumerate() {
                z |= (model.decode(&mut dec) as u32) << (8 * b);
            }
            let prev = if f > 0 { Some(&planes[f - 1].samples[..]) } else { None };
            let pred = predict(prev, &cur, i, w, bits);
            cur.push(pred.wrapping_add(unzigzag(z, bits)) & mask);
        }
        dec.check_overrun()?;
        pad_plane(&mut cur, w * h);
        planes.push(Plane {
            width: w,
            height: h,
            bits,
            samples: cur,
            valid_count: valid,
        });
    }
    dec.check_overrun()?;
    Ok(planes)
}

fn raw_body(planes: &[Plane], bits: u8) -> Vec<u8> {
    let nbytes = bits as usize / 8;
    let mut out = Vec::with_capacity(planes.iter().map(|p| p.samples.len()).sum::<usize>() * nbytes);
    for p in planes {
        for &s in &p.samples {
            out.extend_from_slice(&s.to_le_bytes()[..nbytes]);
        }
    }
    out
}

fn decode_raw_body(body: &[u8], bits: u8, w: usize, h: usize, count: usize, valid: usize) -> Result<Vec<Plane>, CodecError> {
    let nbytes = bits as usize / 8;
    let need = count * w * h * nbytes;
    if body.len() != need {
        return Err(CodecError::Truncated {
            need,
            have: body.len(),
        });
    }
    let mut planes = Vec::with_capacity(count);
    for chunk in body.chunks_exact((w * h * nbytes).max(1)).take(count) {
        let samples = chunk
            .chunks_exact(nbytes)
            .map(|c| {
                let mut b = [0u8; 4];
                b[..nbytes].copy_from_slice(c);
                u32::from_le_bytes(b)
            })
            .collect();
        planes.push(Plane {
            width: w,
            height: h,
            bits,
            samples,
            valid_count: valid,
        });
    }
    while planes.len() < count {
        planes.push(Plane {
            width: w,
            height: h,
            bits,
            samples: Vec::new(),
            valid_count: valid,
        });
    }
    Ok(planes)
}

/// The shared value when every valid sample of the run is equal.
fn constant_value(planes: &[Plane]) -> Option<u32> {
    let first = *planes.first()?.samples.first()?;
    planes
        .iter()
        .all(|p| p.samples[..p.valid_count].iter().all(|&s| s == first))
        .then_some(first)
}

fn decode_constant_body(body: &[u8], bits: u8, w: usize, h: usize, count: usize, valid: usize) -> Result<Vec<Plane>, CodecError> {
    let nbytes = bits as usize / 8;
    if body.len() != nbytes {
        return Err(CodecError::Corrupt(format!("constant run body of {} bytes", body.len())));
    }
    let mut b = [0u8; 4];
    b[..nbytes].copy_from_slice(body);
    let v = u32::from_le_bytes(b);
    let plane = Plane {
        width: w,
        height: h,
        bits,
        samples: vec![v; w * h],
        valid_count: valid,
    };
    Ok(vec![plane; count])
}

// ---------------------------------------------------------------------------
// Payload framing

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodedPayload {
    pub codec: CodecId,
    pub bits: u8,
    pub width: u16,
    pub height: u16,
    pub count: u16,
    pub flags: u16,
    pub body: Vec<u8>,
    pub checksum: u32,
}

impl CodedPayload {
    fn header_bytes(&self) -> [u8; PAYLOAD_HEADER_LEN] {
        let mut h = [0u8; PAYLOAD_HEADER_LEN];
        h[0] = self.codec as u8;
        h[1] = self.bits;
        h[2..4].copy_from_slice(&self.width.to_le_bytes());
        h[4..6].copy_from_slice(&self.height.to_le_bytes());
        h[6..8].copy_from_slice(&self.count.to_le_bytes());
        h[8..10].copy_from_slice(&self.flags.to_le_bytes());
        h[10..14].copy_from_slice(&(self.body.len() as u32).to_le_bytes());
        h
    }

    pub fn encoded_len(&self) -> usize {
        PAYLOAD_OVERHEAD + self.body.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.header_bytes());
        out.extend_from_slice(&self.body);
        out.extend_from_slice(&self.checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < PAYLOAD_OVERHEAD {
            return Err(CodecError::Truncated {
                need: PAYLOAD_OVERHEAD,
                have: bytes.len(),
            });
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let codec = CodecId::from_u8(bytes[0])?;
        let len = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let need = PAYLOAD_OVERHEAD + len;
        if bytes.len() != need {
            return Err(CodecError::Truncated {
                need,
                have: bytes.len(),
            });
        }
        if bytes[14] != 0 || bytes[15] != 0 {
            return Err(CodecError::Corrupt("nonzero header padding".into()));
        }
        Ok(Self {
            codec,
            bits: bytes[1],
            width: u16_at(2),
            height: u16_at(4),
            count: u16_at(6),
            flags: u16_at(8),
            body: bytes[PAYLOAD_HEADER_LEN..PAYLOAD_HEADER_LEN + len].to_vec(),
            checksum: u32::from_le_bytes(bytes[need - 4..].try_into().unwrap()),
        })
    }

    fn compute_checksum(&self, planes: &[Plane]) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&self.header_bytes());
        h.update(&self.body);
        for p in planes {
            for &s in &p.samples[..p.valid_count.min(p.samples.len())] {
                h.update(&s.to_le_bytes());
            }
        }
        h.finalize()
    }

    /// A zero-plane run (used for channels with no frames to carry).
    pub fn empty(codec: CodecId, bits: u8, valid_count: usize) -> Result<Self, CodecError> {
        let (w, h) = geometry_u16(valid_count)?;
        let mut p = Self {
            codec,
            bits,
            width: w,
            height: h,
            count: 0,
            flags: 0,
            body: Vec::new(),
            checksum: 0,
        };
        p.checksum = p.compute_checksum(&[]);
        Ok(p)
    }
}

fn geometry_u16(valid: usize) -> Result<(u16, u16), CodecError> {
    let (w, h) = plane_geometry(valid);
    let w = u16::try_from(w).map_err(|_| CodecError::Geometry(format!("width {w} exceeds u16")))?;
    let h = u16::try_from(h).map_err(|_| CodecError::Geometry(format!("height {h} exceeds u16")))?;
    Ok((w, h))
}

/// Codes one temporal run of planes sharing geometry and bit width.
pub fn encode_planes(planes: &[Plane], codec: CodecId) -> Result<CodedPayload, CodecError> {
    let first = planes.first().ok_or(CodecError::EmptyRun)?;
    let (bits, w, h, valid) = (first.bits, first.width, first.height, first.valid_count);
    check_bits(bits).map_err(|_| CodecError::Geometry(format!("bit width {bits}")))?;
    if planes
        .iter()
        .any(|p| p.bits != bits || p.width != w || p.height != h || p.valid_count != valid || p.samples.len() != w * h)
    {
        return Err(CodecError::MixedGeometry);
    }
    if plane_geometry(valid) != (w, h) {
        return Err(CodecError::Geometry(format!("{w}x{h} does not match {valid} samples")));
    }
    let count = u16::try_from(planes.len()).map_err(|_| CodecError::Geometry("more than 65535 planes".into()))?;
    let (w16, h16) = geometry_u16(valid)?;
    let (body, flags) = match codec {
        CodecId::Raw => (raw_body(planes, bits), 0),
        CodecId::Reference if constant_value(planes).is_some() => {
            let v = constant_value(planes).unwrap();
            (v.to_le_bytes()[..bits as usize / 8].to_vec(), FLAG_CONSTANT)
        }
        CodecId::Reference => {
            let coded = reference_body(planes, bits, valid);
            let raw_len = planes.len() * w * h * bits as usize / 8;
            if coded.len() > raw_len {
                (raw_body(planes, bits), FLAG_RAW_FALLBACK)
            } else {
                (coded, 0)
            }
        }
        CodecId::ExternalAvc => return Err(CodecError::Unsupported(codec)),
    };
    let mut p = CodedPayload {
        codec,
        bits,
        width: w16,
        height: h16,
        count,
        flags,
        body,
        checksum: 0,
    };
    p.checksum = p.compute_checksum(planes);
    Ok(p)
}

/// Inverse of [`encode_planes`]; `valid_count` comes from the container directory.
pub fn decode_planes(payload: &CodedPayload, valid_count: usize) -> Result<Vec<Plane>, CodecError> {
    check_bits(payload.bits).map_err(|_| CodecError::Corrupt(format!("bit width {}", payload.bits)))?;
    let (w, h) = plane_geometry(valid_count);
    if (w, h) != (payload.width as usize, payload.height as usize) {
        return Err(CodecError::Corrupt(format!(
            "geometry {}x{} does not match {valid_count} samples",
            payload.width, payload.height
        )));
    }
    let count = payload.count as usize;
    let bits = payload.bits;
    let allowed = match payload.codec {
        CodecId::Reference => [0, FLAG_RAW_FALLBACK, FLAG_CONSTANT].contains(&payload.flags),
        _ => payload.flags == 0,
    };
    if !allowed {
        return Err(CodecError::Corrupt(format!("bad flags {:#06x}", payload.flags)));
    }
    let planes = match payload.codec {
        CodecId::Raw => decode_raw_body(&payload.body, bits, w, h, count, valid_count)?,
        CodecId::Reference if payload.flags == FLAG_RAW_FALLBACK => {
            decode_raw_body(&payload.body, bits, w, h, count, valid_count)?
        }
        CodecId::Reference if payload.flags == FLAG_CONSTANT => {
            decode_constant_body(&payload.body, bits, w, h, count, valid_count)?
        }
        CodecId::Reference => decode_reference_body(&payload.body, bits, w, h, count, valid_count)?,
        CodecId::ExternalAvc => return Err(CodecError::Unsupported(payload.codec)),
    };
    let computed = payload.compute_checksum(&planes);
    if computed != payload.checksum {
        return Err(CodecError::Checksum {
            stored: payload.checksum,
            computed,
        });
    }
    Ok(planes)
}

pub fn decode_planes_bytes(bytes: &[u8], valid_count: usize) -> Result<Vec<Plane>, CodecError> {
    decode_planes(&CodedPayload::from_bytes(bytes)?, valid_count)
}

// ---------------------------------------------------------------------------
// Static coder driven by a frozen probability table

/// Integer frequencies summing to [`FREQ_TOTAL`], every symbol at least 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqTable {
    pub support_min: i64,
    pub freqs: Vec<u32>,
    cum: Vec<u32>,
}

impl FreqTable {
    pub fn from_pmf(pmf: &PmfTable) -> Result<Self, CodecError> {
        Self::from_probs(pmf.support_min, &pmf.probs)
    }

    pub fn from_probs(support_min: i64, probs: &[f64]) -> Result<Self, CodecError> {
        let n = probs.len();
        if n == 0 || n as u32 > FREQ_TOTAL {
            return Err(CodecError::Corrupt(format!("table of {n} symbols")));
        }
        let mass: f64 = probs.iter().map(|p| p.max(0.0)).sum();
        let spare = (FREQ_TOTAL - n as u32) as f64;
        let mut freqs: Vec<u32> = probs
            .iter()
            .map(|p| 1 + (p.max(0.0) / mass.max(f64::MIN_POSITIVE) * spare).floor() as u32)
            .collect();
        let mut total: i64 = freqs.iter().map(|&f| f as i64).sum();
        // Hand the rounding remainder to the most probable symbols.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let mut k = 0;
        while total != FREQ_TOTAL as i64 {
            let i = order[k % n];
            if total < FREQ_TOTAL as i64 {
                freqs[i] += 1;
                total += 1;
            } else if freqs[i] > 1 {
                freqs[i] -= 1;
                total -= 1;
            }
            k += 1;
        }
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0;
        cum.push(0);
        for &f in &freqs {
            acc += f;
            cum.push(acc);
        }
        Ok(Self {
            support_min,
            freqs,
            cum,
        })
    }

    fn index(&self, symbol: i64) -> Result<usize, CodecError> {
        let i = symbol - self.support_min;
        if i < 0 || i as usize >= self.freqs.len() {
            return Err(CodecError::SymbolOutOfTable(symbol));
        }
        Ok(i as usize)
    }

    /// Ideal code length in bits of `symbols` under this table.
    pub fn cost_bits(&self, symbols: &[i64]) -> Result<f64, CodecError> {
        let mut bits = 0.0;
        for &s in symbols {
            let f = self.freqs[self.index(s)?] as f64;
            bits -= (f / FREQ_TOTAL as f64).log2();
        }
        Ok(bits)
    }
}

pub fn encode_static(symbols: &[i64], table: &FreqTable) -> Result<Vec<u8>, CodecError> {
    let mut enc = RangeEncoder::new();
    for &s in symbols {
        let i = table.index(s)?;
        enc.encode_freq(table.cum[i], table.freqs[i]);
    }
    Ok(enc.finish())
}

pub fn decode_static(bytes: &[u8], table: &FreqTable, n: usize) -> Result<Vec<i64>, CodecError> {
    let mut dec = RangeDecoder::new(bytes);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let v = dec.peek_freq();
        let i = table.cum.partition_point(|&c| c <= v) - 1;
        dec.consume(table.cum[i], table.freqs[i]);
        out.push(table.support_min + i as i64);
    }
    dec.check_overrun()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::flatten_codes;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane_of(codes: &[u32], bits: u8) -> Plane {
        flatten_codes(codes, bits)
    }

    #[test]
    fn zigzag_maps_small_magnitudes_first() {
        let m = max_code(8);
        let z: Vec<u32> = [0u32, m, 1, m - 1, 2].iter().map(|&r| zigzag(r, 8)).collect();
        assert_eq!(z, vec![0, 1, 2, 3, 4]);
        for bits in [8u8, 16, 32] {
            for r in [0u32, 1, 5, max_code(bits), max_code(bits) / 2, max_code(bits) / 2 + 1] {
                assert_eq!(unzigzag(zigzag(r, bits), bits), r);
            }
        }
    }

    #[test]
    fn constant_plane_compresses() {
        let p = plane_of(&vec![77; 256 * 256], 8);
        let c = encode_planes(std::slice::from_ref(&p), CodecId::Reference).unwrap();
        assert!(c.encoded_len() * 100 <= 3 * 256 * 256, "{}", c.encoded_len());
        assert_eq!(decode_planes(&c, p.valid_count).unwrap(), vec![p]);
    }

    #[test]
    fn raw_size_and_round_trip() {
        let p = plane_of(&(0..1000u32).map(|i| i * 7 % 65536).collect::<Vec<_>>(), 16);
        let c = encode_planes(&[p.clone(), p.clone()], CodecId::Raw).unwrap();
        assert_eq!(c.body.len(), 2 * p.width * p.height * 2);
        assert_eq!(c.encoded_len(), c.body.len() + PAYLOAD_OVERHEAD);
        let back = decode_planes_bytes(&c.to_bytes(), 1000).unwrap();
        assert_eq!(back, vec![p.clone(), p]);
    }

    #[test]
    fn identical_planes_have_zero_temporal_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let codes: Vec<u32> = (0..4096).map(|_| rng.random_range(0..256)).collect();
        let p = plane_of(&codes, 8);
        let one = encode_planes(std::slice::from_ref(&p), CodecId::Reference).unwrap();
        let two = encode_planes(&[p.clone(), p.clone()], CodecId::Reference).unwrap();
        // The second plane is all-zero residuals and costs almost nothing.
        assert!(two.body.len() < one.body.len() + one.body.len() / 20, "{} vs {}", two.body.len(), one.body.len());
        assert_eq!(decode_planes(&two, 4096).unwrap().len(), 2);
    }

    #[test]
    fn incompressible_data_stays_near_raw() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let codes: Vec<u32> = (0..1_000_000).map(|_| rng.random_range(0..256)).collect();
        let p = plane_of(&codes, 8);
        let c = encode_planes(std::slice::from_ref(&p), CodecId::Reference).unwrap();
        let raw = p.width * p.height;
        assert!((c.encoded_len() as f64) <= raw as f64 * 1.02);
        assert!(c.encoded_len() <= raw + 64);
        assert_eq!(decode_planes(&c, codes.len()).unwrap()[0], p);
    }

    #[test]
    fn truncation_and_corruption_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let codes: Vec<u32> = (0..500).map(|i| (i / 10 + rng.random_range(0..3)) as u32).collect();
        let p = plane_of(&codes, 8);
        let bytes = encode_planes(&[p.clone(), p], CodecId::Reference).unwrap().to_bytes();
        for cut in [1, 5, bytes.len() / 2] {
            assert!(decode_planes_bytes(&bytes[..bytes.len() - cut], 500).is_err());
        }
        for bit in 0..bytes.len() * 8 {
            let mut bad = bytes.clone();
            bad[bit / 8] ^= 1 << (bit % 8);
            assert!(decode_planes_bytes(&bad, 500).is_err(), "flip at bit {bit} undetected");
        }
    }

    #[test]
    fn external_codec_is_reserved() {
        let p = plane_of(&[1, 2, 3], 8);
        assert_eq!(encode_planes(&[p], CodecId::ExternalAvc), Err(CodecError::Unsupported(CodecId::ExternalAvc)));
        assert!(CodecId::from_u8(9).is_err());
    }

    #[test]
    fn empty_run_payload() {
        let e = CodedPayload::empty(CodecId::Reference, 8, 10).unwrap();
        assert_eq!(e.encoded_len(), PAYLOAD_OVERHEAD);
        assert!(decode_planes(&e, 10).unwrap().is_empty());
        assert!(decode_planes(&e, 17).is_err());
        let z = CodedPayload::empty(CodecId::Reference, 8, 0).unwrap();
        assert!(decode_planes(&z, 0).unwrap().is_empty());
    }

    #[test]
    fn mixed_geometry_rejected() {
        let a = plane_of(&[1, 2, 3], 8);
        let b = plane_of(&[1, 2, 3, 4], 8);
        assert_eq!(encode_planes(&[a, b], CodecId::Raw), Err(CodecError::MixedGeometry));
        assert_eq!(encode_planes(&[], CodecId::Raw), Err(CodecError::EmptyRun));
    }

    #[test]
    fn static_coder_round_trip() {
        let pmf = PmfTable {
            support_min: -2,
            support_max: 2,
            probs: vec![0.05, 0.2, 0.5, 0.2, 0.05],
        };
        let t = FreqTable::from_pmf(&pmf).unwrap();
        assert_eq!(t.freqs.iter().sum::<u32>(), FREQ_TOTAL);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let syms: Vec<i64> = (0..20_000).map(|_| rng.random_range(-2..=2)).collect();
        let bytes = encode_static(&syms, &t).unwrap();
        assert_eq!(decode_static(&bytes, &t, syms.len()).unwrap(), syms);
        let ideal = t.cost_bits(&syms).unwrap();
        assert!((bytes.len() as f64 * 8.0 - ideal).abs() < 64.0);
        assert_eq!(encode_static(&[3], &t), Err(CodecError::SymbolOutOfTable(3)));
    }

    proptest! {
        #[test]
        fn lossless_any_input(
            bits in prop::sample::select(vec![8u8, 16, 32]),
            n in 1usize..300,
            frames in 1usize..4,
            seed in any::<u64>(),
            codec in prop::sample::select(vec![CodecId::Raw, CodecId::Reference]),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let planes: Vec<Plane> = (0..frames)
                .map(|_| {
                    let codes: Vec<u32> = (0..n).map(|_| rng.random::<u32>() & max_code(bits)).collect();
                    plane_of(&codes, bits)
                })
                .collect();
            let c = encode_planes(&planes, codec).unwrap();
            prop_assert_eq!(decode_planes_bytes(&c.to_bytes(), n).unwrap(), planes);
        }

        #[test]
        fn reference_never_much_larger_than_raw(n in 4096usize..6000, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let codes: Vec<u32> = (0..n).map(|_| rng.random_range(0..256)).collect();
            let p = plane_of(&codes, 8);
            let c = encode_planes(std::slice::from_ref(&p), CodecId::Reference).unwrap();
            prop_assert!(c.encoded_len() <= p.width * p.height + 64);
        }
    }
}
