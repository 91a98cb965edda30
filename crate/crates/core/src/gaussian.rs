//! Gaussian scene model, low-opacity pruning, the significance score and
//! significance-ordered layer partitioning.

use std::f64::consts::PI;

use thiserror::Error;

use crate::math::{quat_norm, sh_coeff_count, to_f64x4};

/// Default weight of the volume term in the significance score.
pub const DEFAULT_LAMBDA_PSI: f64 = 1e5;
/// Default number of significance layers.
pub const DEFAULT_LAYERS: usize = 6;
/// Default fraction of lowest-opacity Gaussians removed before layering.
pub const DEFAULT_PRUNE_FRACTION: f64 = 0.4;
/// Default spherical-harmonics degree.
pub const DEFAULT_SH_DEGREE: u8 = 1;

const ROTATION_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussianError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("empty set")]
    EmptySet,
    #[error("malformed layer fractions: {0}")]
    BadFractions(String),
    #[error("invalid prune fraction {0}")]
    BadPruneFraction(f64),
}

/// One splat primitive. Rotation is a unit quaternion in (w, x, y, z) order,
/// scales are linear principal-axis radii and `sh` stores SH coefficients as
/// `sh[3 * k + channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: [f32; 3],
    pub rotation: [f32; 4],
    pub scales: [f32; 3],
    pub opacity: f32,
    pub sh: Vec<f32>,
}

impl Gaussian {
    pub fn validate(&self, sh_degree: u8) -> Result<(), GaussianError> {
        let finite = self.position.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.scales.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.sh.iter().all(|v| v.is_finite());
        if !finite {
            return Err(GaussianError::InvalidInput("non-finite field".into()));
        }
        let norm = quat_norm(to_f64x4(self.rotation));
        if (norm - 1.0).abs() > ROTATION_NORM_TOLERANCE {
            return Err(GaussianError::InvalidInput(format!(
                "rotation norm {norm} is not 1"
            )));
        }
        if self.scales.iter().any(|&s| s <= 0.0) {
            return Err(GaussianError::InvalidInput("non-positive scale".into()));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(GaussianError::InvalidInput(format!(
                "opacity {} outside [0, 1]",
                self.opacity
            )));
        }
        let expected = sh_coeff_count(sh_degree);
        if self.sh.len() != expected {
            return Err(GaussianError::InvalidInput(format!(
                "sh length {} does not match degree {sh_degree} (expected {expected})",
                self.sh.len()
            )));
        }
        Ok(())
    }

    /// Ellipsoid volume `4/3 π a b c`.
    pub fn volume(&self) -> f64 {
        let [a, b, c] = self.scales.map(|s| s as f64);
        4.0 / 3.0 * PI * a * b * c
    }
}

/// Axis-aligned box; an empty set has `min > max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: [f32; 3],
    pub max: [f32; 3],
}

impl Aabb {
    pub const EMPTY: Aabb = Aabb {
        min: [f32::INFINITY; 3],
        max: [f32::NEG_INFINITY; 3],
    };

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a [f32; 3]>) -> Aabb {
        let mut b = Aabb::EMPTY;
        for p in points {
            for k in 0..3 {
                b.min[k] = b.min[k].min(p[k]);
                b.max[k] = b.max[k].max(p[k]);
            }
        }
        b
    }

    pub fn is_empty(&self) -> bool {
        (0..3).any(|k| self.min[k] > self.max[k])
    }

    pub fn contains(&self, p: &[f32; 3]) -> bool {
        (0..3).all(|k| self.min[k] <= p[k] && p[k] <= self.max[k])
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        let mut b = *self;
        for k in 0..3 {
            b.min[k] = b.min[k].min(other.min[k]);
            b.max[k] = b.max[k].max(other.max[k]);
        }
        b
    }

    /// Largest side length, 0 for empty boxes.
    pub fn extent(&self) -> f32 {
        if self.is_empty() {
            return 0.0;
        }
        (0..3)
            .map(|k| self.max[k] - self.min[k])
            .fold(0.0, f32::max)
    }
}

/// An ordered list of Gaussians sharing one SH degree.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    gaussians: Vec<Gaussian>,
    sh_degree: u8,
    bounds: Aabb,
}

impl GaussianSet {
    /// Builds a validated set. Empty sets are allowed here; encoding rejects them.
    pub fn new(gaussians: Vec<Gaussian>, sh_degree: u8) -> Result<Self, GaussianError> {
        if sh_degree > 3 {
            return Err(GaussianError::InvalidInput(format!(
                "sh degree {sh_degree} > 3"
            )));
        }
        for (i, g) in gaussians.iter().enumerate() {
            g.validate(sh_degree).map_err(|e| match e {
                GaussianError::InvalidInput(m) => {
                    GaussianError::InvalidInput(format!("gaussian {i}: {m}"))
                }
                other => other,
            })?;
        }
        Ok(Self::from_valid(gaussians, sh_degree))
    }

    /// Skips validation; callers guarantee the invariants (used on the hot
    /// decode path where values come from clamped, normalized arithmetic).
    pub(crate) fn from_valid(gaussians: Vec<Gaussian>, sh_degree: u8) -> Self {
        let bounds = Aabb::from_points(gaussians.iter().map(|g| &g.position));
        Self {
            gaussians,
            sh_degree,
            bounds,
        }
    }

    pub fn empty(sh_degree: u8) -> Self {
        Self::from_valid(Vec::new(), sh_degree)
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    pub fn into_gaussians(self) -> Vec<Gaussian> {
        self.gaussians
    }

    pub fn sh_degree(&self) -> u8 {
        self.sh_degree
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Subset in the order given by `indices`.
    pub fn select(&self, indices: &[usize]) -> GaussianSet {
        let gaussians = indices.iter().map(|&i| self.gaussians[i].clone()).collect();
        Self::from_valid(gaussians, self.sh_degree)
    }

    /// First `n` Gaussians.
    pub fn prefix(&self, n: usize) -> GaussianSet {
        Self::from_valid(self.gaussians[..n].to_vec(), self.sh_degree)
    }

    pub fn concat(sets: &[GaussianSet], sh_degree: u8) -> GaussianSet {
        let gaussians = sets.iter().flat_map(|s| s.gaussians.iter().cloned()).collect();
        Self::from_valid(gaussians, sh_degree)
    }
}

/// A keyframe split into significance-ordered layers; layer 0 is the base layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredFrame {
    layers: Vec<GaussianSet>,
    layer_fractions: Vec<f64>,
    lambda_psi: f64,
}

impl LayeredFrame {
    /// Assembles a frame from already-partitioned layers (e.g. decoded ones).
    /// `layer_fractions` describes the full partition and may be longer than
    /// `layers` when only a prefix of layers is present.
    pub fn from_layers(
        layers: Vec<GaussianSet>,
        layer_fractions: Vec<f64>,
        lambda_psi: f64,
    ) -> Result<Self, GaussianError> {
        if layers.is_empty() {
            return Err(GaussianError::InvalidInput("a frame needs at least one layer".into()));
        }
        let degree = layers[0].sh_degree();
        if layers.iter().any(|l| l.sh_degree() != degree) {
            return Err(GaussianError::InvalidInput("layers disagree on sh degree".into()));
        }
        Ok(Self {
            layers,
            layer_fractions,
            lambda_psi,
        })
    }

    pub fn layers(&self) -> &[GaussianSet] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_fractions(&self) -> &[f64] {
        &self.layer_fractions
    }

    pub fn lambda_psi(&self) -> f64 {
        self.lambda_psi
    }

    pub fn sh_degree(&self) -> u8 {
        self.layers[0].sh_degree()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(GaussianSet::len).collect()
    }

    /// Number of Gaussians in layers `1..=l`.
    pub fn prefix_len(&self, l: usize) -> usize {
        self.layers.iter().take(l).map(GaussianSet::len).sum()
    }

    /// Concatenation of layers `1..=l` in layer order.
    pub fn flatten(&self, l: usize) -> GaussianSet {
        GaussianSet::concat(&self.layers[..l.min(self.layers.len())], self.sh_degree())
    }
}

/// Significance score `opacity + lambda_psi * volume`.
pub fn significance(g: &Gaussian, lambda_psi: f64) -> Result<f64, GaussianError> {
    if !lambda_psi.is_finite() || lambda_psi < 0.0 {
        return Err(GaussianError::InvalidInput(format!(
            "lambda_psi {lambda_psi} must be finite and >= 0"
        )));
    }
    if !g.opacity.is_finite() || g.scales.iter().any(|s| !s.is_finite()) {
        return Err(GaussianError::InvalidInput("non-finite opacity or scale".into()));
    }
    Ok(g.opacity as f64 + lambda_psi * g.volume())
}

/// Equal layer fractions for `layers` layers.
pub fn equal_fractions(layers: usize) -> Vec<f64> {
    vec![1.0 / layers as f64; layers]
}

fn check_fractions(layers: usize, fractions: &[f64]) -> Result<(), GaussianError> {
    if layers == 0 {
        return Err(GaussianError::BadFractions("L must be >= 1".into()));
    }
    if fractions.len() != layers {
        return Err(GaussianError::BadFractions(format!(
            "{} fractions for {layers} layers",
            fractions.len()
        )));
    }
    if fractions.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
        return Err(GaussianError::BadFractions("every fraction must be > 0".into()));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(GaussianError::BadFractions(format!("fractions sum to {sum}")));
    }
    Ok(())
}

/// Layer cardinalities for `n` Gaussians: `round(f * n)` per layer, capped by
/// what is left, with the remainder going to the last layer.
pub fn layer_sizes(n: usize, fractions: &[f64]) -> Vec<usize> {
    let mut remaining = n;
    let mut sizes = Vec::with_capacity(fractions.len());
    for (i, f) in fractions.iter().enumerate() {
        if i + 1 == fractions.len() {
            sizes.push(remaining);
        } else {
            let want = (f * n as f64).round() as usize;
            let take = want.min(remaining);
            remaining -= take;
            sizes.push(take);
        }
    }
    sizes
}

/// Source indices sorted by descending significance (stable, so ties keep
/// ascending index order) and the per-layer sizes of the split.
pub fn layer_order(
    set: &GaussianSet,
    layers: usize,
    fractions: &[f64],
    lambda_psi: f64,
) -> Result<(Vec<usize>, Vec<usize>), GaussianError> {
    if set.is_empty() {
        return Err(GaussianError::EmptySet);
    }
    check_fractions(layers, fractions)?;
    let scores = set
        .gaussians()
        .iter()
        .map(|g| significance(g, lambda_psi))
        .collect::<Result<Vec<_>, _>>()?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok((order, layer_sizes(set.len(), fractions)))
}

/// Sorts by significance and splits into `layers` layers.
pub fn partition_layers(
    set: &GaussianSet,
    layers: usize,
    fractions: &[f64],
    lambda_psi: f64,
) -> Result<LayeredFrame, GaussianError> {
    let (order, sizes) = layer_order(set, layers, fractions, lambda_psi)?;
    let mut out = Vec::with_capacity(layers);
    let mut start = 0;
    for size in sizes {
        out.push(set.select(&order[start..start + size]));
        start += size;
    }
    LayeredFrame::from_layers(out, fractions.to_vec(), lambda_psi)
}

/// Indices (ascending) surviving removal of the `floor(fraction * n)`
/// lowest-opacity Gaussians. Among equal opacities the higher index goes first.
pub fn prune_indices(set: &GaussianSet, fraction: f64) -> Result<Vec<usize>, GaussianError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(GaussianError::BadPruneFraction(fraction));
    }
    let n = set.len();
    let remove = (fraction * n as f64).floor() as usize;
    let g = set.gaussians();
    let mut by_opacity: Vec<usize> = (0..n).collect();
    by_opacity.sort_by(|&a, &b| g[a].opacity.total_cmp(&g[b].opacity).then(b.cmp(&a)));
    let mut removed = vec![false; n];
    for &i in &by_opacity[..remove] {
        removed[i] = true;
    }
    Ok((0..n).filter(|&i| !removed[i]).collect())
}

pub fn prune_low_opacity(set: &GaussianSet, fraction: f64) -> Result<GaussianSet, GaussianError> {
    let keep = prune_indices(set, fraction)?;
    Ok(set.select(&keep))
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn gaussian(opacity: f32, scale: f32) -> Gaussian {
        Gaussian {
            position: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            scales: [scale; 3],
            opacity,
            sh: vec![0.0; 3],
        }
    }
}
