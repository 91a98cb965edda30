//! Conformance fixtures: small containers together with the arrays any
//! decoder must reproduce from them.
//!
//! A fixture directory holds
//!
//! - `stream.gsv` and `manifest.json` (url `stream.gsv`),
//! - `index.bin`: the header and group directory (the container's leading bytes),
//! - `segments/g{G}_l{L}.bin`: the slice served for group `G`, layer `L` (both as
//!   in the HTTP API: group 0-based, layer 1-based),
//! - `expected/codes.json`: decoded plane samples of every payload,
//! - `expected/frames_l{L}.json`: every frame decoded from layers `1..=L`, with
//!   each f32 written as its IEEE-754 bit pattern.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{decode_planes_bytes, CodecId};
use crate::config::EncodeConfig;
use crate::container::{read_layers_from, write_atomic, ContainerIndex, Manifest};
use crate::error::{Error, Result};
use crate::gaussian::GaussianSet;
use crate::pipeline::{decode_bytes, encode_sequence};
use crate::synth::{gen_synthetic_scene, Burst, SceneSpec};

pub const CONTAINER_FILE: &str = "stream.gsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotCodes {
    pub slot: String,
    pub bits: u8,
    pub range_min_bits: u32,
    pub range_max_bits: u32,
    /// Valid samples of each plane.
    pub planes: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCodes {
    pub start: u32,
    pub frames: u16,
    pub layer_counts: Vec<u32>,
    /// `layers[l][slot]`.
    pub layers: Vec<Vec<SlotCodes>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedCodes {
    pub codec: u8,
    pub groups: Vec<GroupCodes>,
}

/// One decoded frame as f32 bit patterns, attribute-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameBits {
    pub count: usize,
    pub position: Vec<u32>,
    pub rotation: Vec<u32>,
    pub scales: Vec<u32>,
    pub opacity: Vec<u32>,
    pub sh: Vec<u32>,
}

impl FrameBits {
    pub fn from_set(set: &GaussianSet) -> Self {
        let gs = set.gaussians();
        let bits = |it: &mut dyn Iterator<Item = f32>| it.map(f32::to_bits).collect::<Vec<_>>();
        Self {
            count: gs.len(),
            position: bits(&mut gs.iter().flat_map(|g| g.position)),
            rotation: bits(&mut gs.iter().flat_map(|g| g.rotation)),
            scales: bits(&mut gs.iter().flat_map(|g| g.scales)),
            opacity: bits(&mut gs.iter().map(|g| g.opacity)),
            sh: bits(&mut gs.iter().flat_map(|g| g.sh.iter().copied())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedFrames {
    pub layers_read: usize,
    pub sh_degree: u8,
    pub frames: Vec<FrameBits>,
}

/// The fixtures checked into the repository, by directory name.
pub fn standard_fixtures() -> Vec<(&'static str, CodecId)> {
    vec![("raw", CodecId::Raw), ("reference", CodecId::Reference)]
}

/// Scene behind every standard fixture: 48 Gaussians, 5 frames, a burst at
/// frame 3 so there are two groups.
pub fn fixture_scene() -> Vec<GaussianSet> {
    let spec = SceneSpec {
        count: 48,
        frames: 5,
        motion_amplitude: 0.0008,
        motion_coherence: 0.5,
        rotation_amplitude: 0.02,
        residual_amplitude: 0.01,
        bursts: vec![Burst {
            frame: 3,
            amplitude: 0.02,
            residual_amplitude: 0.01,
        }],
        ..Default::default()
    };
    gen_synthetic_scene(&spec, 7).expect("fixture spec is valid")
}

pub fn fixture_config(codec: CodecId) -> EncodeConfig {
    EncodeConfig {
        codec,
        estimate_rates: false,
        ..Default::default()
    }
}

/// Every file of a fixture, keyed by path relative to the fixture directory.
pub fn fixture_files(container: &[u8]) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let index = ContainerIndex::from_bytes(container)?;
    let mut files = BTreeMap::new();
    files.insert(PathBuf::from(CONTAINER_FILE), container.to_vec());
    let manifest = Manifest::from_index(&index, CONTAINER_FILE);
    files.insert(PathBuf::from("manifest.json"), manifest.to_json().into_bytes());
    files.insert(PathBuf::from("index.bin"), index.to_bytes());
    for g in 0..index.groups.len() {
        for l in 1..=index.layers() {
            let (a, b) = index.segment_range(g, l)?;
            files.insert(
                PathBuf::from(format!("segments/g{g}_l{l}.bin")),
                container[a as usize..b as usize].to_vec(),
            );
        }
    }

    let data = read_layers_from(&mut std::io::Cursor::new(container), index.layers())?;
    let slots = index.slots();
    let mut codec = None;
    let mut groups = Vec::new();
    for (g, entry) in index.groups.iter().enumerate() {
        let mut layers = Vec::new();
        for (l, entries) in entry.payloads.iter().enumerate() {
            let n = entry.layer_counts[l] as usize;
            let mut out = Vec::new();
            for (s, p) in entries.iter().enumerate() {
                let bytes = &data.payloads[g][l][s];
                codec.get_or_insert(bytes[0]);
                let planes = decode_planes_bytes(bytes, n)?;
                out.push(SlotCodes {
                    slot: slots[s].to_string(),
                    bits: bytes[1],
                    range_min_bits: p.range_min.to_bits(),
                    range_max_bits: p.range_max.to_bits(),
                    planes: planes.iter().map(|pl| pl.samples[..pl.valid_count].to_vec()).collect(),
                });
            }
            layers.push(out);
        }
        groups.push(GroupCodes {
            start: entry.start,
            frames: entry.frame_count,
            layer_counts: entry.layer_counts.clone(),
            layers,
        });
    }
    let codes = ExpectedCodes {
        codec: codec.unwrap_or(CodecId::Raw as u8),
        groups,
    };
    files.insert(PathBuf::from("expected/codes.json"), to_json(&codes));

    for l in 1..=index.layers() {
        let seq = decode_bytes(container, l)?;
        let expected = ExpectedFrames {
            layers_read: l,
            sh_degree: index.header.sh_degree,
            frames: seq.frames()?.iter().map(FrameBits::from_set).collect(),
        };
        files.insert(PathBuf::from(format!("expected/frames_l{l}.json")), to_json(&expected));
    }
    Ok(files)
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string(v).expect("fixture serializes");
    s.push('\n');
    s.into_bytes()
}

/// Encodes the standard scene with `codec` and returns the fixture files.
pub fn build_fixture(codec: CodecId) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let enc = encode_sequence(&fixture_scene(), &fixture_config(codec))?;
    fixture_files(&enc.to_bytes()?)
}

pub fn write_fixture(dir: &Path, files: &BTreeMap<PathBuf, Vec<u8>>) -> Result<()> {
    for (rel, bytes) in files {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(Error::Io)?;
        }
        write_atomic(&path, bytes)?;
    }
    Ok(())
}
