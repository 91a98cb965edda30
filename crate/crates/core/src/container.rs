//! The `.gsv` progressive container and its streaming manifest.
//!
//! Layout (little-endian): a 42-byte header, a fixed-size directory entry per
//! group, then every payload in (group, layer, slot) order. Each layer has
//! `2C` slots: the `C` keyframe channels followed by the `C` delta channels,
//! where `C = channel_list(sh_degree).len()`. Because payloads are layer-major
//! inside a group, layers `1..=l` of a group are one contiguous byte range.

use std::fs::File;
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, PAYLOAD_OVERHEAD};
use crate::quant::{channel_list, ChannelId};

pub const MAGIC: &[u8; 4] = b"GSV1";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 42;
pub const MANIFEST_VERSION: u16 = 1;
/// Header flag: Gaussians inside each layer are in Morton order.
pub const FLAG_MORTON: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u16),
    #[error("corrupt header: {0}")]
    Header(String),
    #[error("inconsistent directory: {0}")]
    Directory(String),
    #[error("layer {l} out of range 1..={max}")]
    LayerOutOfRange { l: usize, max: usize },
    #[error("group {0} out of range")]
    GroupOutOfRange(usize),
    #[error("payload group {group} layer {layer} channel {slot}: {source}")]
    Payload {
        group: usize,
        layer: usize,
        slot: SlotId,
        #[source]
        source: CodecError,
    },
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One of the `2C` per-layer payload slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SlotId {
    pub channel: ChannelId,
    pub delta: bool,
}

impl std::fmt::Display for SlotId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let role = if self.delta { "delta" } else { "key" };
        write!(f, "{}/{role}", self.channel)
    }
}

/// Slots of one layer in payload order.
pub fn slot_list(sh_degree: u8) -> Vec<SlotId> {
    let channels = channel_list(sh_degree);
    let key = channels.iter().map(|&channel| SlotId { channel, delta: false });
    let delta = channels.iter().map(|&channel| SlotId { channel, delta: true });
    key.chain(delta).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GsvHeader {
    pub version: u16,
    pub layers: u8,
    pub sh_degree: u8,
    pub group_count: u16,
    pub fps_num: u16,
    pub fps_den: u16,
    /// min xyz then max xyz over every encoded frame.
    pub bounds: [f32; 6],
    pub flags: u32,
}

impl GsvHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6] = self.layers;
        b[7] = self.sh_degree;
        b[8..10].copy_from_slice(&self.group_count.to_le_bytes());
        b[10..12].copy_from_slice(&self.fps_num.to_le_bytes());
        b[12..14].copy_from_slice(&self.fps_den.to_le_bytes());
        for (i, v) in self.bounds.iter().enumerate() {
            b[14 + 4 * i..18 + 4 * i].copy_from_slice(&v.to_le_bytes());
        }
        b[38..42].copy_from_slice(&self.flags.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, ContainerError> {
        if b.len() < HEADER_LEN {
            return Err(ContainerError::Header(format!("{} bytes", b.len())));
        }
        if &b[0..4] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let u16_at = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
        let version = u16_at(4);
        if version != FORMAT_VERSION {
            return Err(ContainerError::BadVersion(version));
        }
        let mut bounds = [0f32; 6];
        for (i, v) in bounds.iter_mut().enumerate() {
            *v = f32::from_le_bytes(b[14 + 4 * i..18 + 4 * i].try_into().unwrap());
        }
        let h = Self {
            version,
            layers: b[6],
            sh_degree: b[7],
            group_count: u16_at(8),
            fps_num: u16_at(10),
            fps_den: u16_at(12),
            bounds,
            flags: u32::from_le_bytes(b[38..42].try_into().unwrap()),
        };
        h.validate()?;
        Ok(h)
    }

    fn validate(&self) -> Result<(), ContainerError> {
        if self.layers == 0 {
            return Err(ContainerError::Header("zero layers".into()));
        }
        if self.sh_degree > 3 {
            return Err(ContainerError::Header(format!("sh degree {}", self.sh_degree)));
        }
        if self.group_count == 0 {
            return Err(ContainerError::Header("zero groups".into()));
        }
        if self.fps_num == 0 || self.fps_den == 0 {
            return Err(ContainerError::Header("zero frame rate".into()));
        }
        Ok(())
    }

    pub fn fps(&self) -> f64 {
        self.fps_num as f64 / self.fps_den as f64
    }

    pub fn slots_per_layer(&self) -> usize {
        2 * channel_list(self.sh_degree).len()
    }

    pub fn group_entry_len(&self) -> usize {
        let (l, s) = (self.layers as usize, self.slots_per_layer());
        4 + 2 + 4 * l + 24 * l * s + 1
    }

    /// Header plus directory.
    pub fn index_len(&self) -> usize {
        HEADER_LEN + self.group_count as usize * self.group_entry_len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PayloadEntry {
    pub offset: u64,
    pub size: u64,
    pub range_min: f32,
    pub range_max: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupEntry {
    pub start: u32,
    pub frame_count: u16,
    /// Keyframe Gaussians per layer.
    pub layer_counts: Vec<u32>,
    /// `[layer][slot]`.
    pub payloads: Vec<Vec<PayloadEntry>>,
    pub pos_bits: u8,
}

impl GroupEntry {
    pub fn layer_bytes(&self, layer: usize) -> u64 {
        self.payloads[layer].iter().map(|p| p.size).sum()
    }

    /// Byte range `[start, end)` of one layer's payloads.
    pub fn layer_range(&self, layer: usize) -> (u64, u64) {
        let p = &self.payloads[layer];
        let start = p.first().map_or(0, |e| e.offset);
        (start, start + self.layer_bytes(layer))
    }
}

/// Parsed header and directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ContainerIndex {
    pub header: GsvHeader,
    pub groups: Vec<GroupEntry>,
}

impl ContainerIndex {
    pub fn slots(&self) -> Vec<SlotId> {
        slot_list(self.header.sh_degree)
    }

    pub fn layers(&self) -> usize {
        self.header.layers as usize
    }

    pub fn total_frames(&self) -> usize {
        self.groups.iter().map(|g| g.frame_count as usize).sum()
    }

    /// Byte range of segment `(group, layer)` with a 1-based layer.
    pub fn segment_range(&self, group: usize, layer: usize) -> Result<(u64, u64), ContainerError> {
        let g = self.groups.get(group).ok_or(ContainerError::GroupOutOfRange(group))?;
        self.check_layer(layer)?;
        Ok(g.layer_range(layer - 1))
    }

    pub fn check_layer(&self, l: usize) -> Result<(), ContainerError> {
        if l == 0 || l > self.layers() {
            return Err(ContainerError::LayerOutOfRange { l, max: self.layers() });
        }
        Ok(())
    }

    pub fn payload_bytes(&self) -> u64 {
        self.groups
            .iter()
            .map(|g| (0..g.payloads.len()).map(|l| g.layer_bytes(l)).sum::<u64>())
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header.index_len());
        out.extend_from_slice(&self.header.to_bytes());
        for g in &self.groups {
            out.extend_from_slice(&g.start.to_le_bytes());
            out.extend_from_slice(&g.frame_count.to_le_bytes());
            for c in &g.layer_counts {
                out.extend_from_slice(&c.to_le_bytes());
            }
            for p in g.payloads.iter().flatten() {
                out.extend_from_slice(&p.offset.to_le_bytes());
                out.extend_from_slice(&p.size.to_le_bytes());
            }
            for p in g.payloads.iter().flatten() {
                out.extend_from_slice(&p.range_min.to_le_bytes());
                out.extend_from_slice(&p.range_max.to_le_bytes());
            }
            out.push(g.pos_bits);
        }
        out
    }

    /// Parses header and directory from the start of `bytes`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let header = GsvHeader::from_bytes(bytes)?;
        let need = header.index_len();
        if bytes.len() < need {
            return Err(ContainerError::Directory(format!(
                "directory truncated: need {need} bytes, have {}",
                bytes.len()
            )));
        }
        let (l, s) = (header.layers as usize, header.slots_per_layer());
        let mut pos = HEADER_LEN;
        let mut take = |n: usize| {
            let out = &bytes[pos..pos + n];
            pos += n;
            out
        };
        let mut groups = Vec::with_capacity(header.group_count as usize);
        for _ in 0..header.group_count {
            let start = u32::from_le_bytes(take(4).try_into().unwrap());
            let frame_count = u16::from_le_bytes(take(2).try_into().unwrap());
            let layer_counts = (0..l)
                .map(|_| u32::from_le_bytes(take(4).try_into().unwrap()))
                .collect();
            let mut payloads = vec![Vec::with_capacity(s); l];
            for layer in payloads.iter_mut() {
                for _ in 0..s {
                    let offset = u64::from_le_bytes(take(8).try_into().unwrap());
                    let size = u64::from_le_bytes(take(8).try_into().unwrap());
                    layer.push(PayloadEntry {
                        offset,
                        size,
                        range_min: 0.0,
                        range_max: 0.0,
                    });
                }
            }
            for p in payloads.iter_mut().flatten() {
                p.range_min = f32::from_le_bytes(take(4).try_into().unwrap());
                p.range_max = f32::from_le_bytes(take(4).try_into().unwrap());
            }
            let pos_bits = take(1)[0];
            groups.push(GroupEntry {
                start,
                frame_count,
                layer_counts,
                payloads,
                pos_bits,
            });
        }
        let index = Self { header, groups };
        index.validate()?;
        Ok(index)
    }

    /// Reads header then directory, touching exactly `index_len` bytes.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, ContainerError> {
        let mut head = [0u8; HEADER_LEN];
        r.read_exact(&mut head)?;
        let header = GsvHeader::from_bytes(&head)?;
        let mut buf = vec![0u8; header.index_len()];
        buf[..HEADER_LEN].copy_from_slice(&head);
        r.read_exact(&mut buf[HEADER_LEN..])?;
        Self::from_bytes(&buf)
    }

    fn validate(&self) -> Result<(), ContainerError> {
        let dir = |m: String| Err(ContainerError::Directory(m));
        let (l, s) = (self.layers(), self.header.slots_per_layer());
        let mut next_offset = self.header.index_len() as u64;
        let mut next_start: Option<u32> = None;
        for (gi, g) in self.groups.iter().enumerate() {
            if g.layer_counts.len() != l || g.payloads.len() != l || g.payloads.iter().any(|p| p.len() != s) {
                return dir(format!("group {gi}: shape does not match {l} layers x {s} slots"));
            }
            if g.frame_count == 0 {
                return dir(format!("group {gi}: zero frames"));
            }
            if g.pos_bits != 16 && g.pos_bits != 32 {
                return dir(format!("group {gi}: position bit width {}", g.pos_bits));
            }
            if let Some(expected) = next_start {
                if g.start != expected {
                    return dir(format!("group {gi}: starts at frame {} instead of {expected}", g.start));
                }
            }
            next_start = g.start.checked_add(g.frame_count as u32);
            for (li, layer) in g.payloads.iter().enumerate() {
                for (si, p) in layer.iter().enumerate() {
                    if p.offset != next_offset {
                        return dir(format!(
                            "group {gi} layer {} slot {si}: offset {} where {next_offset} expected",
                            li + 1,
                            p.offset
                        ));
                    }
                    if p.size < PAYLOAD_OVERHEAD as u64 {
                        return dir(format!("group {gi} layer {} slot {si}: size {}", li + 1, p.size));
                    }
                    if !(p.range_min.is_finite() && p.range_max.is_finite()) {
                        return dir(format!("group {gi} layer {} slot {si}: non-finite range", li + 1));
                    }
                    next_offset += p.size;
                }
            }
        }
        Ok(())
    }

    pub fn file_len(&self) -> u64 {
        self.header.index_len() as u64 + self.payload_bytes()
    }
}

/// One payload to be written, with its quantization range.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotPayload {
    pub range_min: f32,
    pub range_max: f32,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupPayloads {
    pub start: u32,
    pub frame_count: u16,
    pub layer_counts: Vec<u32>,
    pub pos_bits: u8,
    /// `[layer][slot]`.
    pub layers: Vec<Vec<SlotPayload>>,
}

/// Everything needed to serialize a container.
#[derive(Debug, Clone, PartialEq)]
pub struct ContainerData {
    pub layers: u8,
    pub sh_degree: u8,
    pub fps_num: u16,
    pub fps_den: u16,
    pub bounds: [f32; 6],
    pub flags: u32,
    pub groups: Vec<GroupPayloads>,
}

impl ContainerData {
    pub fn index(&self) -> Result<ContainerIndex, ContainerError> {
        if self.groups.is_empty() {
            return Err(ContainerError::Directory("no groups".into()));
        }
        let group_count = u16::try_from(self.groups.len())
            .map_err(|_| ContainerError::Directory(format!("{} groups exceed u16", self.groups.len())))?;
        let header = GsvHeader {
            version: FORMAT_VERSION,
            layers: self.layers,
            sh_degree: self.sh_degree,
            group_count,
            fps_num: self.fps_num,
            fps_den: self.fps_den,
            bounds: self.bounds,
            flags: self.flags,
        };
        header.validate()?;
        let mut offset = header.index_len() as u64;
        let mut groups = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            let payloads = g
                .layers
                .iter()
                .map(|layer| {
                    layer
                        .iter()
                        .map(|p| {
                            let e = PayloadEntry {
                                offset,
                                size: p.bytes.len() as u64,
                                range_min: p.range_min,
                                range_max: p.range_max,
                            };
                            offset += e.size;
                            e
                        })
                        .collect()
                })
                .collect();
            groups.push(GroupEntry {
                start: g.start,
                frame_count: g.frame_count,
                layer_counts: g.layer_counts.clone(),
                payloads,
                pos_bits: g.pos_bits,
            });
        }
        let index = ContainerIndex { header, groups };
        index.validate()?;
        Ok(index)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ContainerError> {
        let index = self.index()?;
        let mut out = index.to_bytes();
        out.reserve(index.payload_bytes() as usize);
        for p in self.groups.iter().flat_map(|g| g.layers.iter().flatten()) {
            out.extend_from_slice(&p.bytes);
        }
        Ok(out)
    }
}

/// Writes atomically: a sibling temp file renamed over `path`.
pub fn write_container(data: &ContainerData, path: impl AsRef<Path>) -> Result<ContainerIndex, ContainerError> {
    let index = data.index()?;
    let bytes = data.to_bytes()?;
    write_atomic(path.as_ref(), &bytes)?;
    Ok(index)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result
}

/// Records every byte range read through it.
pub struct CountingReader<R> {
    inner: R,
    pos: u64,
    ranges: Vec<(u64, u64)>,
}

impl<R: Read + Seek> CountingReader<R> {
    pub fn new(mut inner: R) -> io::Result<Self> {
        let pos = inner.stream_position()?;
        Ok(Self {
            inner,
            pos,
            ranges: Vec::new(),
        })
    }

    /// Touched `[start, end)` ranges in read order.
    pub fn ranges(&self) -> &[(u64, u64)] {
        &self.ranges
    }

    pub fn bytes_read(&self) -> u64 {
        self.ranges.iter().map(|(a, b)| b - a).sum()
    }

    pub fn into_ranges(self) -> Vec<(u64, u64)> {
        self.ranges
    }
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        if n > 0 {
            match self.ranges.last_mut() {
                Some(last) if last.1 == self.pos => last.1 += n as u64,
                _ => self.ranges.push((self.pos, self.pos + n as u64)),
            }
            self.pos += n as u64;
        }
        Ok(n)
    }
}

impl<R: Seek> Seek for CountingReader<R> {
    fn seek(&mut self, to: SeekFrom) -> io::Result<u64> {
        self.pos = self.inner.seek(to)?;
        Ok(self.pos)
    }
}

/// Raw payload bytes of layers `1..=l` of every group.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerData {
    pub index: ContainerIndex,
    pub layers_read: usize,
    /// `[group][layer][slot]`, layers limited to `layers_read`.
    pub payloads: Vec<Vec<Vec<Vec<u8>>>>,
}

/// Reads the index then, per group, the single contiguous range of layers
/// `1..=l`. No byte of a higher layer's payload is requested.
pub fn read_layers_from<R: Read + Seek>(r: &mut R, l: usize) -> Result<LayerData, ContainerError> {
    r.seek(SeekFrom::Start(0))?;
    let index = ContainerIndex::read_from(r)?;
    index.check_layer(l)?;
    let mut payloads = Vec::with_capacity(index.groups.len());
    for g in &index.groups {
        let (start, _) = g.layer_range(0);
        let (_, end) = g.layer_range(l - 1);
        let mut buf = vec![0u8; (end - start) as usize];
        r.seek(SeekFrom::Start(start))?;
        r.read_exact(&mut buf)?;
        let mut layers = Vec::with_capacity(l);
        for layer in &g.payloads[..l] {
            let slots = layer
                .iter()
                .map(|p| {
                    let a = (p.offset - start) as usize;
                    buf[a..a + p.size as usize].to_vec()
                })
                .collect();
            layers.push(slots);
        }
        payloads.push(layers);
    }
    Ok(LayerData {
        index,
        layers_read: l,
        payloads,
    })
}

pub fn read_layers(path: impl AsRef<Path>, l: usize) -> Result<LayerData, ContainerError> {
    let mut f = File::open(path)?;
    read_layers_from(&mut f, l)
}

/// As [`read_layers_from`], also returning the byte ranges it touched.
pub fn read_layers_instrumented<R: Read + Seek>(
    r: R,
    l: usize,
) -> Result<(LayerData, Vec<(u64, u64)>), ContainerError> {
    let mut cr = CountingReader::new(r)?;
    let data = read_layers_from(&mut cr, l)?;
    Ok((data, cr.into_ranges()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestGroup {
    pub start: u32,
    pub frames: u16,
    /// Payload bytes of each layer.
    pub layer_bytes: Vec<u64>,
    /// Payload bytes of layers `1..=l`.
    pub cum_bytes: Vec<u64>,
    pub cum_bytes_per_frame: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u16,
    pub layers: u8,
    pub fps: f64,
    pub groups: Vec<ManifestGroup>,
    pub url: String,
}

impl Manifest {
    pub fn from_index(index: &ContainerIndex, url: &str) -> Self {
        let groups = index
            .groups
            .iter()
            .map(|g| {
                let layer_bytes: Vec<u64> = (0..g.payloads.len()).map(|l| g.layer_bytes(l)).collect();
                let cum_bytes: Vec<u64> = layer_bytes
                    .iter()
                    .scan(0u64, |acc, &b| {
                        *acc += b;
                        Some(*acc)
                    })
                    .collect();
                let cum_bytes_per_frame = cum_bytes
                    .iter()
                    .map(|&c| c as f64 / g.frame_count as f64)
                    .collect();
                ManifestGroup {
                    start: g.start,
                    frames: g.frame_count,
                    layer_bytes,
                    cum_bytes,
                    cum_bytes_per_frame,
                }
            })
            .collect();
        Self {
            version: MANIFEST_VERSION,
            layers: index.header.layers,
            fps: index.header.fps(),
            groups,
            url: url.to_string(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ContainerError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn total_bytes(&self) -> u64 {
        self.groups.iter().map(|g| g.cum_bytes.last().copied().unwrap_or(0)).sum()
    }
}

/// Manifest of the container at `path`; `url` defaults to its file name.
pub fn emit_manifest(path: impl AsRef<Path>, url: Option<&str>) -> Result<Manifest, ContainerError> {
    let path = path.as_ref();
    let mut f = File::open(path)?;
    let index = ContainerIndex::read_from(&mut f)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Manifest::from_index(&index, url.unwrap_or(&name)))
}
