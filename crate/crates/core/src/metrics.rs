//! Image quality (PSNR, SSIM) and Bjøntegaard rate-distortion deltas.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::render::Image;

pub const PSNR_CAP: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("image {0}x{1} is smaller than the 11x11 SSIM window")]
    TooSmall(usize, usize),
    #[error("invalid RD curve: {0}")]
    InvalidCurve(String),
    #[error("RD curves do not overlap")]
    NoOverlap,
}

fn check_dims(a: &Image, b: &Image) -> Result<(), MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

pub fn mse(gt: &Image, pred: &Image) -> Result<f64, MetricsError> {
    check_dims(gt, pred)?;
    let sum: f64 = gt
        .data
        .iter()
        .zip(&pred.data)
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum();
    Ok(sum / gt.data.len().max(1) as f64)
}

/// `10·log10(1 / MSE)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(gt: &Image, pred: &Image) -> Result<f64, MetricsError> {
    let m = mse(gt, pred)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Mean absolute channel difference.
pub fn l1(gt: &Image, pred: &Image) -> Result<f64, MetricsError> {
    check_dims(gt, pred)?;
    let sum: f64 = gt
        .data
        .iter()
        .zip(&pred.data)
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum();
    Ok(sum / gt.data.len().max(1) as f64)
}

fn gray(img: &Image) -> Vec<f64> {
    img.data
        .chunks_exact(3)
        .map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0)
        .collect()
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" filtering: output is (w-10) x (h-10).
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                s += kv * tmp[(y + j) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// SSIM of the channel-mean grayscale images with an 11x11 Gaussian window
/// (σ = 1.5), averaged over valid window positions.
pub fn ssim(gt: &Image, pred: &Image) -> Result<f64, MetricsError> {
    check_dims(gt, pred)?;
    let (w, h) = (gt.width, gt.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::TooSmall(w, h));
    }
    let x = gray(gt);
    let y = gray(pred);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let k = gaussian_window();
    let mx = filter_valid(&x, w, h, &k);
    let my = filter_valid(&y, w, h, &k);
    let sxx = filter_valid(&xx, w, h, &k);
    let syy = filter_valid(&yy, w, h, &k);
    let sxy = filter_valid(&xy, w, h, &k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(total / mx.len() as f64)
}

pub fn d_ssim(gt: &Image, pred: &Image) -> Result<f64, MetricsError> {
    Ok((1.0 - ssim(gt, pred)?) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateUnit {
    MegabytesPerFrame,
    BytesPerFrame,
    Kbps,
}

impl RateUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            RateUnit::MegabytesPerFrame => "MB/frame",
            RateUnit::BytesPerFrame => "bytes/frame",
            RateUnit::Kbps => "kbps",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    pub rate: f64,
    pub psnr: f64,
}

/// At least two points with strictly increasing positive rates.
#[derive(Debug, Clone, PartialEq)]
pub struct RdCurve {
    points: Vec<RdPoint>,
    unit: RateUnit,
}

impl RdCurve {
    pub fn new(points: Vec<RdPoint>, unit: RateUnit) -> Result<Self, MetricsError> {
        if points.len() < 2 {
            return Err(MetricsError::InvalidCurve("need at least 2 points".into()));
        }
        if points.iter().any(|p| !(p.rate > 0.0) || !p.rate.is_finite() || !p.psnr.is_finite()) {
            return Err(MetricsError::InvalidCurve("rates must be finite and > 0".into()));
        }
        if points.windows(2).any(|w| w[1].rate <= w[0].rate) {
            return Err(MetricsError::InvalidCurve("rates must strictly increase".into()));
        }
        Ok(Self { points, unit })
    }

    pub fn from_pairs(pairs: &[(f64, f64)], unit: RateUnit) -> Result<Self, MetricsError> {
        Self::new(
            pairs.iter().map(|&(rate, psnr)| RdPoint { rate, psnr }).collect(),
            unit,
        )
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    pub fn unit(&self) -> RateUnit {
        self.unit
    }

    /// CSV with a `rate_unit,rate,psnr` header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rate_unit,rate,psnr\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", self.unit.as_str(), p.rate, p.psnr);
        }
        s
    }
}

/// Least-squares polynomial coefficients (ascending powers) of degree
/// `min(3, n - 1)`.
pub fn polyfit(x: &[f64], y: &[f64]) -> Vec<f64> {
    let deg = (x.len() - 1).min(3);
    let a = DMatrix::from_fn(x.len(), deg + 1, |i, j| x[i].powi(j as i32));
    let b = DVector::from_column_slice(y);
    let svd = a.svd(true, true);
    let c = svd.solve(&b, 1e-12).expect("U and V were computed");
    c.iter().copied().collect()
}

fn poly_integral(c: &[f64], lo: f64, hi: f64) -> f64 {
    let prim = |x: f64| {
        c.iter()
            .enumerate()
            .map(|(k, ck)| ck * x.powi(k as i32 + 1) / (k as f64 + 1.0))
            .sum::<f64>()
    };
    prim(hi) - prim(lo)
}

fn avg_difference(ax: &[f64], ay: &[f64], tx: &[f64], ty: &[f64]) -> Result<f64, MetricsError> {
    let fold = |v: &[f64]| {
        v.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
    };
    let (alo, ahi) = fold(ax);
    let (tlo, thi) = fold(tx);
    let lo = alo.max(tlo);
    let hi = ahi.min(thi);
    if !(hi > lo) {
        return Err(MetricsError::NoOverlap);
    }
    let pa = polyfit(ax, ay);
    let pt = polyfit(tx, ty);
    Ok((poly_integral(&pt, lo, hi) - poly_integral(&pa, lo, hi)) / (hi - lo))
}

/// Average PSNR difference (test − anchor) in dB over the shared log-rate range.
pub fn bd_psnr(anchor: &RdCurve, test: &RdCurve) -> Result<f64, MetricsError> {
    let lr = |c: &RdCurve| c.points.iter().map(|p| p.rate.log10()).collect::<Vec<_>>();
    let ps = |c: &RdCurve| c.points.iter().map(|p| p.psnr).collect::<Vec<_>>();
    avg_difference(&lr(anchor), &ps(anchor), &lr(test), &ps(test))
}

/// Average rate change (percent) of `test` against `anchor` at equal PSNR.
pub fn bdbr(anchor: &RdCurve, test: &RdCurve) -> Result<f64, MetricsError> {
    let lr = |c: &RdCurve| c.points.iter().map(|p| p.rate.log10()).collect::<Vec<_>>();
    let ps = |c: &RdCurve| c.points.iter().map(|p| p.psnr).collect::<Vec<_>>();
    let avg = avg_difference(&ps(anchor), &lr(anchor), &ps(test), &lr(test))?;
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}
