//! Binary splat point files.
//!
//! Layout (little-endian): 12-byte magic `GSPLATPT\0\0\0\0`, u32 version,
//! u32 count, u8 sh_degree, u8 flags, then `count` records of f32 fields in
//! the order position(3), rotation(4), scales(3), opacity(1), sh(3·(deg+1)²).
//! Flag bit 0 marks log-encoded scales, bit 1 pre-activation (logit) opacity.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::gaussian::{Gaussian, GaussianError, GaussianSet};
use crate::math::sh_coeff_count;

pub const SPLAT_MAGIC: &[u8; 12] = b"GSPLATPT\0\0\0\0";
pub const SPLAT_VERSION: u32 = 1;
pub const SPLAT_HEADER_LEN: usize = 22;

pub const FLAG_LOG_SCALES: u8 = 0b01;
pub const FLAG_LOGIT_OPACITY: u8 = 0b10;

#[derive(Debug, Error)]
pub enum SplatIoError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated records: expected {expected} bytes of records, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unknown field: flag bits {0:#04x}")]
    UnknownField(u8),
    #[error("empty set")]
    EmptySet,
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
}

fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-(x as f64)).exp())) as f32
}

fn logit(p: f32) -> f32 {
    let p = (p as f64).clamp(1e-7, 1.0 - 1e-7);
    (p / (1.0 - p)).ln() as f32
}

pub fn parse_splat_points(bytes: &[u8]) -> Result<GaussianSet, SplatIoError> {
    if bytes.len() < SPLAT_HEADER_LEN {
        return Err(SplatIoError::MalformedHeader(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..12] != SPLAT_MAGIC {
        return Err(SplatIoError::MalformedHeader("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if version != SPLAT_VERSION {
        return Err(SplatIoError::MalformedHeader(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let degree = bytes[20];
    let flags = bytes[21];
    if degree > 3 {
        return Err(SplatIoError::MalformedHeader(format!("sh degree {degree} > 3")));
    }
    if flags & !(FLAG_LOG_SCALES | FLAG_LOGIT_OPACITY) != 0 {
        return Err(SplatIoError::UnknownField(flags));
    }
    if count == 0 {
        return Err(SplatIoError::EmptySet);
    }
    let n_sh = sh_coeff_count(degree);
    let floats_per_record = 11 + n_sh;
    let expected = count * floats_per_record * 4;
    let body = &bytes[SPLAT_HEADER_LEN..];
    if body.len() != expected {
        return Err(SplatIoError::Truncated {
            expected,
            found: body.len(),
        });
    }
    let mut floats = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let next3 = |it: &mut dyn Iterator<Item = f32>| -> [f32; 3] {
        [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]
    };
    let mut gaussians = Vec::with_capacity(count);
    for _ in 0..count {
        let position = next3(&mut floats);
        let rotation = [
            floats.next().unwrap(),
            floats.next().unwrap(),
            floats.next().unwrap(),
            floats.next().unwrap(),
        ];
        let mut scales = next3(&mut floats);
        if flags & FLAG_LOG_SCALES != 0 {
            scales = scales.map(|s| (s as f64).exp() as f32);
        }
        let mut opacity = floats.next().unwrap();
        if flags & FLAG_LOGIT_OPACITY != 0 {
            opacity = sigmoid(opacity);
        }
        let sh = (&mut floats).take(n_sh).collect();
        gaussians.push(Gaussian {
            position,
            rotation,
            scales,
            opacity,
            sh,
        });
    }
    Ok(GaussianSet::new(gaussians, degree)?)
}

pub fn load_splat_points(path: impl AsRef<Path>) -> Result<GaussianSet, SplatIoError> {
    parse_splat_points(&fs::read(path)?)
}

/// Serializes with the given storage flags (0 stores linear scales and raw opacity).
pub fn encode_splat_points(set: &GaussianSet, flags: u8) -> Result<Vec<u8>, SplatIoError> {
    if flags & !(FLAG_LOG_SCALES | FLAG_LOGIT_OPACITY) != 0 {
        return Err(SplatIoError::UnknownField(flags));
    }
    if set.is_empty() {
        return Err(SplatIoError::EmptySet);
    }
    let n_sh = sh_coeff_count(set.sh_degree());
    let mut out = Vec::with_capacity(SPLAT_HEADER_LEN + set.len() * (11 + n_sh) * 4);
    out.extend_from_slice(SPLAT_MAGIC);
    out.extend_from_slice(&SPLAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    out.push(set.sh_degree());
    out.push(flags);
    for g in set.gaussians() {
        let scales = if flags & FLAG_LOG_SCALES != 0 {
            g.scales.map(|s| (s as f64).ln() as f32)
        } else {
            g.scales
        };
        let opacity = if flags & FLAG_LOGIT_OPACITY != 0 {
            logit(g.opacity)
        } else {
            g.opacity
        };
        let fields = g
            .position
            .iter()
            .chain(&g.rotation)
            .chain(&scales)
            .chain(std::iter::once(&opacity))
            .chain(&g.sh);
        for v in fields {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_splat_points(path: impl AsRef<Path>, set: &GaussianSet) -> Result<(), SplatIoError> {
    let bytes = encode_splat_points(set, 0)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}
