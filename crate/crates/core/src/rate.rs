//! Entropy models and rate-distortion loss evaluators: simulated
//! quantization, Silverman/KDE-FFT PMFs, the discretized Gaussian residual
//! model and the layer-weighted keyframe and inter-frame losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::metrics::{d_ssim, l1, MetricsError};
use crate::render::Image;

pub const BANDWIDTH_FLOOR: f64 = 1e-3;
pub const STD_FLOOR: f64 = 1e-4;
pub const PROB_FLOOR: f64 = 1e-12;
const MIN_GRID: usize = 1024;
const MAX_GRID: usize = 1 << 23;

pub const DEFAULT_LAMBDA_SSIM: f64 = 0.2;
pub const DEFAULT_LAMBDA_RATE_KEY: f64 = 1e-7;
pub const DEFAULT_LAMBDA_RATE_INTER: f64 = 1e-4;
pub const DEFAULT_LAMBDA_REG: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RateError {
    #[error("quantization scale must be > 0, got {0}")]
    BadScale(f64),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("non-finite input")]
    NonFinite,
    #[error("degenerate KDE grid: {0} points")]
    DegenerateGrid(usize),
    #[error("expected {expected} levels, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("empty attribute {0:?}")]
    EmptyAttribute(AttributeTag),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttributeTag {
    Rotation,
    Scale,
    Sh,
    Opacity,
    DScale,
    DSh,
    DOpacity,
}

/// Real values already expressed in quantization-step units.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolSamples {
    pub values: Vec<f64>,
    pub tag: AttributeTag,
}

impl SymbolSamples {
    pub fn new(tag: AttributeTag, values: Vec<f64>) -> Self {
        Self { values, tag }
    }
}

/// Symbol for a real value: nearest integer, halves away from zero.
pub fn symbol_of(v: f64) -> i64 {
    v.round() as i64
}

/// Adds seeded i.i.d. noise from U(−1/(2q), 1/(2q)); each output stays
/// within `1/(2q)` of its input.
pub fn simulate_quantization(values: &[f64], q: f64, seed: u64) -> Result<Vec<f64>, RateError> {
    if !(q > 0.0) || !q.is_finite() {
        return Err(RateError::BadScale(q));
    }
    let b = 1.0 / (2.0 * q);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(values
        .iter()
        .map(|&v| {
            let u: f64 = rng.random_range(-b..=b);
            let mut out = v + u;
            while (out - v).abs() > b {
                out = if out > v { out.next_down() } else { out.next_up() };
            }
            out
        })
        .collect())
}

fn check_samples(v: &[f64]) -> Result<(), RateError> {
    if v.len() < 2 {
        return Err(RateError::TooFewSamples(v.len()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(RateError::NonFinite);
    }
    Ok(())
}

/// Quantile of sorted data with linear interpolation between order statistics.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

fn sample_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// `0.9 · min(σ̂, IQR/1.34) · n^(−1/5)`, floored at [`BANDWIDTH_FLOOR`].
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64, RateError> {
    check_samples(values)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = sample_std(values).min(iqr / 1.34);
    let h = 0.9 * spread * (values.len() as f64).powf(-0.2);
    Ok(if h.is_finite() { h.max(BANDWIDTH_FLOOR) } else { BANDWIDTH_FLOOR })
}

/// Probabilities over the integer symbols `support_min..=support_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct PmfTable {
    pub support_min: i64,
    pub support_max: i64,
    pub probs: Vec<f64>,
}

impl PmfTable {
    pub fn prob(&self, symbol: i64) -> f64 {
        if symbol < self.support_min || symbol > self.support_max {
            return 0.0;
        }
        self.probs[(symbol - self.support_min) as usize]
    }

    pub fn mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Mean code length in bits of the rounded values, with the probability floor.
    pub fn mean_code_length(&self, values: &[f64]) -> f64 {
        if values.is_empty() {
            return 0.0;
        }
        let total: f64 = values
            .iter()
            .map(|&v| -self.prob(symbol_of(v)).max(PROB_FLOOR).log2())
            .sum();
        total / values.len() as f64
    }
}

/// Piecewise-linear CDF over a uniform grid.
struct GridCdf {
    lo: f64,
    step: f64,
    cdf: Vec<f64>,
}

impl GridCdf {
    fn at(&self, x: f64) -> f64 {
        let pos = (x - self.lo) / self.step;
        if pos <= 0.0 {
            return 0.0;
        }
        let last = self.cdf.len() - 1;
        if pos >= last as f64 {
            return 1.0;
        }
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        self.cdf[i] + frac * (self.cdf[i + 1] - self.cdf[i])
    }
}

fn kde_grid(values: &[f64], h: f64) -> Result<GridCdf, RateError> {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let lo = min - 4.0 * h;
    let hi = max + 4.0 * h;
    let span = hi - lo;
    let want = (8.0 * span / h).ceil();
    if !want.is_finite() || want > MAX_GRID as f64 {
        return Err(RateError::DegenerateGrid(if want.is_finite() { want as usize } else { usize::MAX }));
    }
    let m = (want as usize).max(MIN_GRID).next_power_of_two();
    if m > MAX_GRID {
        return Err(RateError::DegenerateGrid(m));
    }
    let step = span / (m - 1) as f64;

    // Linear binning onto the grid.
    let mut hist = vec![0.0f64; m];
    for &v in values {
        let pos = ((v - lo) / step).clamp(0.0, (m - 1) as f64);
        let i = (pos.floor() as usize).min(m - 2);
        let frac = pos - i as f64;
        hist[i] += 1.0 - frac;
        hist[i + 1] += frac;
    }

    // Gaussian kernel sampled on the grid, truncated where it is negligible
    // at grid resolution, convolved by zero-padded FFT.
    let half = ((6.0 * h / step).ceil() as usize).min(m - 1);
    let size = (m + 2 * half + 1).next_power_of_two();
    let mut a: Vec<Complex<f64>> = hist.iter().map(|&x| Complex::new(x, 0.0)).collect();
    a.resize(size, Complex::new(0.0, 0.0));
    let mut k = vec![Complex::new(0.0, 0.0); size];
    for j in 0..=half {
        let x = j as f64 * step / h;
        let w = (-0.5 * x * x).exp();
        k[j] = Complex::new(w, 0.0);
        if j > 0 {
            k[size - j] = Complex::new(w, 0.0);
        }
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    fwd.process(&mut a);
    fwd.process(&mut k);
    for (x, y) in a.iter_mut().zip(&k) {
        *x *= *y;
    }
    inv.process(&mut a);
    let density: Vec<f64> = a[..m].iter().map(|c| c.re.max(0.0)).collect();

    // Trapezoid CDF, normalized to end at 1.
    let mut cdf = vec![0.0f64; m];
    for j in 1..m {
        cdf[j] = cdf[j - 1] + 0.5 * (density[j - 1] + density[j]) * step;
    }
    let total = cdf[m - 1];
    if !(total > 0.0) {
        return Err(RateError::DegenerateGrid(m));
    }
    for c in cdf.iter_mut() {
        *c /= total;
    }
    Ok(GridCdf { lo, step, cdf })
}

/// KDE-FFT probability table over `[round(min) − 1, round(max) + 1]`. The two
/// end symbols absorb the remaining tail mass, so the table sums to 1.
pub fn kde_pmf(values: &[f64]) -> Result<PmfTable, RateError> {
    let h = silverman_bandwidth(values)?;
    let grid = kde_grid(values, h)?;
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let smin = symbol_of(min) - 1;
    let smax = symbol_of(max) + 1;
    let probs = (smin..=smax)
        .map(|s| {
            let upper = if s == smax { 1.0 } else { grid.at(s as f64 + 0.5) };
            let lower = if s == smin { 0.0 } else { grid.at(s as f64 - 0.5) };
            (upper - lower).max(0.0)
        })
        .collect();
    Ok(PmfTable {
        support_min: smin,
        support_max: smax,
        probs,
    })
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `Φ((ŷ+½−m)/σ) − Φ((ŷ−½−m)/σ)` with `σ = max(std, 1e-4)`.
pub fn gaussian_pmf(mean: f64, std: f64, symbol: i64) -> Result<f64, RateError> {
    if !mean.is_finite() || !std.is_finite() {
        return Err(RateError::NonFinite);
    }
    let s = std.max(STD_FLOOR);
    let zl = (symbol as f64 - 0.5 - mean) / s;
    let zh = (symbol as f64 + 0.5 - mean) / s;
    // Difference taken on the side of the mean where Φ is small.
    let p = if zl > 0.0 {
        0.5 * (libm::erfc(zl / std::f64::consts::SQRT_2) - libm::erfc(zh / std::f64::consts::SQRT_2))
    } else {
        std_normal_cdf(zh) - std_normal_cdf(zl)
    };
    Ok(p.max(0.0))
}

/// Sample mean and population standard deviation.
pub fn fit_gaussian(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Bits of one symbol under the fitted Gaussian, with the probability floor.
pub fn gaussian_code_length(mean: f64, std: f64, symbol: i64) -> f64 {
    -gaussian_pmf(mean, std, symbol).unwrap_or(0.0).max(PROB_FLOOR).log2()
}

fn total_symbols(attrs: &[SymbolSamples]) -> Result<usize, RateError> {
    for a in attrs {
        if a.values.is_empty() {
            return Err(RateError::EmptyAttribute(a.tag));
        }
    }
    Ok(attrs.iter().map(|a| a.values.len()).sum())
}

/// Keyframe rate in bits per symbol: one KDE PMF per attribute, averaged over
/// every scalar symbol of every attribute.
pub fn rate_key(attrs: &[SymbolSamples]) -> Result<f64, RateError> {
    let n = total_symbols(attrs)?;
    let mut bits = 0.0;
    for a in attrs {
        let pmf = kde_pmf(&a.values)?;
        bits += pmf.mean_code_length(&a.values) * a.values.len() as f64;
    }
    Ok(if n == 0 { 0.0 } else { bits / n as f64 })
}

/// Inter-frame rate in bits per symbol under a per-attribute fitted Gaussian.
pub fn rate_inter(attrs: &[SymbolSamples]) -> Result<f64, RateError> {
    let n = total_symbols(attrs)?;
    let mut bits = 0.0;
    for a in attrs {
        if a.values.iter().any(|v| !v.is_finite()) {
            return Err(RateError::NonFinite);
        }
        let (m, s) = fit_gaussian(&a.values);
        bits += a
            .values
            .iter()
            .map(|&v| gaussian_code_length(m, s, symbol_of(v)))
            .sum::<f64>();
    }
    Ok(if n == 0 { 0.0 } else { bits / n as f64 })
}

/// L1 norm of every residual symbol.
pub fn reg_loss(attrs: &[SymbolSamples]) -> f64 {
    attrs.iter().flat_map(|a| a.values.iter()).map(|v| v.abs()).sum()
}

/// `(1 − λ)·L1 + λ·D-SSIM`.
pub fn color_loss(gt: &Image, pred: &Image, lambda_ssim: f64) -> Result<f64, RateError> {
    let l = l1(gt, pred)?;
    if lambda_ssim == 0.0 {
        return Ok(l);
    }
    Ok((1.0 - lambda_ssim) * l + lambda_ssim * d_ssim(gt, pred)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    pub lambda_rate_key: f64,
    pub lambda_rate_inter: f64,
    pub lambda_reg: f64,
    pub per_level: Vec<f64>,
}

/// `λ^l = 0.5 / l` for `l < L` and 1 for the top level.
pub fn level_weights(layers: usize) -> Vec<f64> {
    (1..=layers)
        .map(|l| if l == layers { 1.0 } else { 0.5 / l as f64 })
        .collect()
}

impl LossWeights {
    pub fn with_layers(layers: usize) -> Self {
        Self {
            lambda_ssim: DEFAULT_LAMBDA_SSIM,
            lambda_rate_key: DEFAULT_LAMBDA_RATE_KEY,
            lambda_rate_inter: DEFAULT_LAMBDA_RATE_INTER,
            lambda_reg: DEFAULT_LAMBDA_REG,
            per_level: level_weights(layers),
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::with_layers(crate::gaussian::DEFAULT_LAYERS)
    }
}

fn check_levels(got: usize, w: &LossWeights) -> Result<(), RateError> {
    if got != w.per_level.len() {
        return Err(RateError::LengthMismatch {
            expected: w.per_level.len(),
            got,
        });
    }
    Ok(())
}

/// `Σ_l λ^l · (color_l + λ_rate_key · rate_l)` over `(color, rate)` pairs.
pub fn keyframe_loss(per_level: &[(f64, f64)], w: &LossWeights) -> Result<f64, RateError> {
    check_levels(per_level.len(), w)?;
    Ok(per_level
        .iter()
        .zip(&w.per_level)
        .map(|(&(c, r), lw)| lw * (c + w.lambda_rate_key * r))
        .sum())
}

/// `Σ_l λ^l · (color_l + λ_rate_inter · rate_l + λ_reg · reg_l)`.
pub fn inter_loss(per_level: &[(f64, f64, f64)], w: &LossWeights) -> Result<f64, RateError> {
    check_levels(per_level.len(), w)?;
    Ok(per_level
        .iter()
        .zip(&w.per_level)
        .map(|(&(c, r, g), lw)| lw * (c + w.lambda_rate_inter * r + w.lambda_reg * g))
        .sum())
}
