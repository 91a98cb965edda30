//! CPU reference splat rasterizer: EWA projection, depth-sorted front-to-back
//! compositing over 16x16 tiles, and image IO (binary PPM and raw f32 dumps).

use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{Gaussian, GaussianSet, LayeredFrame};
use crate::math::{eval_sh, mat3_mul, mat3_transpose, mat3_vec, quat_to_mat3, Mat3};
use crate::motion::{reconstruct_frame_layers, FrameDelta, MotionError};

/// Diagonal dilation added to every projected covariance, in pixels².
pub const COV2D_DILATION: f64 = 0.3;
pub const MAX_ALPHA: f32 = 0.99;
pub const MIN_TRANSMITTANCE: f32 = 1e-4;
pub const TILE: usize = 16;

const RAW_MAGIC: &[u8; 8] = b"GSVRAWF\0";

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("layer {l} out of range 1..={max}")]
    LayerOutOfRange { l: usize, max: usize },
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("malformed image file: {0}")]
    MalformedImage(String),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Pinhole camera. `rotation`/`translation` map world to camera space
/// (x right, y down, z forward).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub rotation: Mat3,
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_near")]
    pub near: f64,
}

fn default_near() -> f64 {
    0.01
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n == 0.0 {
        v
    } else {
        v.map(|c| c / n)
    }
}

impl Camera {
    /// Camera at `eye` looking at `target`, vertical field of view in degrees.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        fov_y_deg: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let z = normalize(sub(target, eye));
        let x = normalize(cross(z, up));
        let y = cross(z, x);
        let rotation = [x, y, z];
        let translation = mat3_vec(&rotation, eye).map(|v| -v);
        let fy = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Self {
            rotation,
            translation,
            fx: fy,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            near: default_near(),
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |m: &str| Err(RenderError::InvalidCamera(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be > 0");
        }
        if self.width == 0 || self.height == 0 {
            return bad("width and height must be >= 1");
        }
        if !(self.near > 0.0) {
            return bad("near must be > 0");
        }
        let finite = self.rotation.iter().flatten().chain(&self.translation).all(|v| v.is_finite())
            && self.cx.is_finite()
            && self.cy.is_finite();
        if !finite {
            return bad("non-finite extrinsics or principal point");
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        mat3_vec(&mat3_transpose(&self.rotation), self.translation).map(|v| -v)
    }

    pub fn from_json(text: &str) -> Result<Self, RenderError> {
        let cam: Camera = serde_json::from_str(text)
            .map_err(|e| RenderError::InvalidCamera(e.to_string()))?;
        cam.validate()?;
        Ok(cam)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("camera serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    /// Symmetric 2x2 covariance as (xx, xy, yy).
    pub cov2d: [f64; 3],
    pub depth: f64,
    pub color: [f32; 3],
    pub base_opacity: f32,
    conic: [f32; 3],
    rect: [usize; 4],
}

impl Splat2D {
    /// Builds a splat directly in screen space. Returns `None` when the
    /// covariance is not positive definite or the 3σ footprint misses the image.
    pub fn new(
        mean2d: [f64; 2],
        cov2d: [f64; 3],
        depth: f64,
        color: [f32; 3],
        base_opacity: f32,
        width: usize,
        height: usize,
    ) -> Option<Self> {
        let [a, b, c] = cov2d;
        let det = a * c - b * b;
        if !(det > 0.0 && a > 0.0) {
            return None;
        }
        let mid = 0.5 * (a + c);
        let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
        let radius = 3.0 * lambda_max.sqrt();
        let x0 = (mean2d[0] - radius).floor();
        let x1 = (mean2d[0] + radius).ceil();
        let y0 = (mean2d[1] - radius).floor();
        let y1 = (mean2d[1] + radius).ceil();
        if x1 < 0.0 || y1 < 0.0 || x0 >= width as f64 || y0 >= height as f64 {
            return None;
        }
        let clampx = |v: f64| v.clamp(0.0, width as f64 - 1.0) as usize;
        let clampy = |v: f64| v.clamp(0.0, height as f64 - 1.0) as usize;
        Some(Self {
            mean2d,
            cov2d,
            depth,
            color,
            base_opacity,
            conic: [(c / det) as f32, (-b / det) as f32, (a / det) as f32],
            rect: [clampx(x0), clampy(y0), clampx(x1), clampy(y1)],
        })
    }

    /// Composited opacity at pixel center `(px, py)`, before the ceiling.
    pub fn alpha_at(&self, px: f64, py: f64) -> f32 {
        let dx = (px - self.mean2d[0]) as f32;
        let dy = (py - self.mean2d[1]) as f32;
        let [ca, cb, cc] = self.conic;
        let power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy;
        if power > 0.0 {
            return 0.0;
        }
        (self.base_opacity * power.exp()).min(MAX_ALPHA)
    }
}

fn sh_degree_of(len: usize) -> u8 {
    match len {
        3 => 0,
        12 => 1,
        27 => 2,
        _ => 3,
    }
}

/// EWA projection of one Gaussian; `None` when culled.
pub fn project_gaussian(g: &Gaussian, cam: &Camera) -> Option<Splat2D> {
    let mu = g.position.map(|v| v as f64);
    let t = mat3_vec(&cam.rotation, mu);
    let t = [t[0] + cam.translation[0], t[1] + cam.translation[1], t[2] + cam.translation[2]];
    let z = t[2];
    if z <= cam.near {
        return None;
    }
    let limx = 1.3 * (0.5 * cam.width as f64 / cam.fx);
    let limy = 1.3 * (0.5 * cam.height as f64 / cam.fy);
    let tx = (t[0] / z).clamp(-limx, limx) * z;
    let ty = (t[1] / z).clamp(-limy, limy) * z;

    let r = quat_to_mat3(g.rotation);
    let s = g.scales.map(|v| v as f64);
    let mut m = r;
    for row in m.iter_mut() {
        for (k, v) in row.iter_mut().enumerate() {
            *v *= s[k];
        }
    }
    let sigma = mat3_mul(&m, &mat3_transpose(&m));
    let j: Mat3 = [
        [cam.fx / z, 0.0, -cam.fx * tx / (z * z)],
        [0.0, cam.fy / z, -cam.fy * ty / (z * z)],
        [0.0, 0.0, 0.0],
    ];
    let tw = mat3_mul(&j, &cam.rotation);
    let cov = mat3_mul(&mat3_mul(&tw, &sigma), &mat3_transpose(&tw));
    let cov2d = [
        cov[0][0] + COV2D_DILATION,
        cov[0][1],
        cov[1][1] + COV2D_DILATION,
    ];
    let mean2d = [cam.fx * t[0] / z + cam.cx, cam.fy * t[1] / z + cam.cy];
    let dir = normalize(sub(mu, cam.center()));
    let color = eval_sh(sh_degree_of(g.sh.len()), &g.sh, dir);
    Splat2D::new(mean2d, cov2d, z, color, g.opacity, cam.width, cam.height)
}

/// Projects every Gaussian, dropping culled ones; survivors keep input order.
pub fn project_set(set: &GaussianSet, cam: &Camera) -> Vec<Splat2D> {
    set.gaussians()
        .par_iter()
        .with_min_len(512)
        .filter_map(|g| project_gaussian(g, cam))
        .collect()
}

/// Linear RGB image with interleaved channels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_size(&self, other: &Image) -> Result<(), RenderError> {
        if self.width != other.width || self.height != other.height {
            return Err(RenderError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, RenderError> {
        let bad = |m: &str| RenderError::MalformedImage(m.to_string());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("expected 8-bit P6"));
        }
        let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
        let body = bytes.get(pos..pos + w * h * 3).ok_or_else(|| bad("truncated pixels"))?;
        Ok(Self {
            width: w,
            height: h,
            data: body.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    /// Lossless dump: 8-byte magic, u32 width, u32 height, f32 RGB samples.
    pub fn to_raw(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(RAW_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_raw(bytes: &[u8]) -> Result<Self, RenderError> {
        if bytes.len() < 16 || &bytes[..8] != RAW_MAGIC {
            return Err(RenderError::MalformedImage("bad raw float header".into()));
        }
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() != w * h * 12 {
            return Err(RenderError::MalformedImage("raw float size mismatch".into()));
        }
        Ok(Self {
            width: w,
            height: h,
            data: body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        })
    }

    /// Reads either format, chosen by the leading magic.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RenderError> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(RAW_MAGIC) {
            Self::from_raw(&bytes)
        } else {
            Self::from_ppm(&bytes)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub background: [f32; 3],
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { background: [0.0; 3] }
    }
}

pub fn render(splats: &[Splat2D], cam: &Camera) -> Image {
    render_with(splats, cam, &RenderOptions::default())
}

/// Front-to-back compositing. Splats are sorted by depth (ties keep input
/// order); each pixel accumulates in that fixed order, so the result does
/// not depend on the worker count.
pub fn render_with(splats: &[Splat2D], cam: &Camera, opts: &RenderOptions) -> Image {
    let (w, h) = (cam.width, cam.height);
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| splats[a].depth.total_cmp(&splats[b].depth));

    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        let s = &splats[i];
        if s.base_opacity <= 0.0 {
            continue;
        }
        for ty in s.rect[1] / TILE..=s.rect[3] / TILE {
            for tx in s.rect[0] / TILE..=s.rect[2] / TILE {
                bins[ty * tiles_x + tx].push(i as u32);
            }
        }
    }

    let tiles: Vec<Vec<f32>> = bins
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let x0 = tx * TILE;
            let y0 = ty * TILE;
            let x1 = (x0 + TILE).min(w);
            let y1 = (y0 + TILE).min(h);
            let mut buf = Vec::with_capacity((x1 - x0) * (y1 - y0) * 3);
            for y in y0..y1 {
                for x in x0..x1 {
                    buf.extend_from_slice(&shade(splats, list, x, y, opts.background));
                }
            }
            buf
        })
        .collect();

    let mut img = Image::new(w, h);
    for (t, buf) in tiles.iter().enumerate() {
        let (tx, ty) = (t % tiles_x, t / tiles_x);
        let x0 = tx * TILE;
        let x1 = (x0 + TILE).min(w);
        let tw = x1 - x0;
        for (row, chunk) in buf.chunks_exact(tw * 3).enumerate() {
            let y = ty * TILE + row;
            let start = 3 * (y * w + x0);
            img.data[start..start + tw * 3].copy_from_slice(chunk);
        }
    }
    img
}

fn shade(splats: &[Splat2D], list: &[u32], x: usize, y: usize, bg: [f32; 3]) -> [f32; 3] {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let mut t = 1.0f32;
    let mut c = [0.0f32; 3];
    for &i in list {
        let s = &splats[i as usize];
        if x < s.rect[0] || x > s.rect[2] || y < s.rect[1] || y > s.rect[3] {
            continue;
        }
        let a = s.alpha_at(px, py);
        if a <= 0.0 {
            continue;
        }
        let wgt = a * t;
        for k in 0..3 {
            c[k] += s.color[k] * wgt;
        }
        t *= 1.0 - a;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    [0, 1, 2].map(|k| (c[k] + t * bg[k]).clamp(0.0, 1.0))
}

/// Projects and renders a whole set.
pub fn render_set(set: &GaussianSet, cam: &Camera) -> Image {
    render(&project_set(set, cam), cam)
}

/// Renders frame `t` of a group using only layers `1..=l`.
pub fn render_progressive(
    frame: &LayeredFrame,
    l: usize,
    deltas: &[FrameDelta],
    t: usize,
    cam: &Camera,
) -> Result<Image, RenderError> {
    if l == 0 || l > frame.num_layers() {
        return Err(RenderError::LayerOutOfRange {
            l,
            max: frame.num_layers(),
        });
    }
    cam.validate()?;
    let set = reconstruct_frame_layers(frame, deltas, t, l)?;
    Ok(render_set(&set, cam))
}
