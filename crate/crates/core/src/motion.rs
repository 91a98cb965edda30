//! Per-frame rigid and residual deltas, frame reconstruction inside a group,
//! and motion-driven group boundary planning.

use thiserror::Error;

use crate::gaussian::{Gaussian, GaussianSet, LayeredFrame};
use crate::math::{
    quat_inverse, quat_mul, quat_normalize_f32, sh_coeff_count, to_f64x4, QUAT_IDENTITY,
};

/// Default boundary threshold on mean per-Gaussian translation.
pub const DEFAULT_TAU_MU: f64 = 0.0025;
/// Lower bound applied to scales after residual updates.
pub const SCALE_FLOOR: f32 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotionError {
    #[error("size mismatch: {what} has {got} entries, expected {expected}")]
    SizeMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("non-finite delta")]
    NonFinite,
    #[error("empty delta")]
    Empty,
    #[error("frame index {t} out of range 0..={max}")]
    OutOfRange { t: usize, max: usize },
    #[error("invalid threshold {0}")]
    BadThreshold(f64),
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<(), MotionError> {
    if got != expected {
        return Err(MotionError::SizeMismatch { what, got, expected });
    }
    Ok(())
}

/// Per-Gaussian translation and rotation update.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RigidDelta {
    pub translations: Vec<[f32; 3]>,
    pub rotations: Vec<[f32; 4]>,
}

impl RigidDelta {
    pub fn identity(n: usize) -> Self {
        Self {
            translations: vec![[0.0; 3]; n],
            rotations: vec![QUAT_IDENTITY; n],
        }
    }

    pub fn len(&self) -> usize {
        self.translations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.translations.is_empty()
    }

    pub fn prefix(&self, n: usize) -> Self {
        Self {
            translations: self.translations[..n].to_vec(),
            rotations: self.rotations[..n].to_vec(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            translations: indices.iter().map(|&i| self.translations[i]).collect(),
            rotations: indices.iter().map(|&i| self.rotations[i]).collect(),
        }
    }
}

/// Per-Gaussian additive updates of scales, opacity and SH.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResidualDelta {
    pub d_scales: Vec<[f32; 3]>,
    pub d_opacity: Vec<f32>,
    pub d_sh: Vec<Vec<f32>>,
}

impl ResidualDelta {
    pub fn zero(n: usize, sh_degree: u8) -> Self {
        Self {
            d_scales: vec![[0.0; 3]; n],
            d_opacity: vec![0.0; n],
            d_sh: vec![vec![0.0; sh_coeff_count(sh_degree)]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_opacity.is_empty()
    }

    pub fn prefix(&self, n: usize) -> Self {
        Self {
            d_scales: self.d_scales[..n].to_vec(),
            d_opacity: self.d_opacity[..n].to_vec(),
            d_sh: self.d_sh[..n].to_vec(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            d_scales: indices.iter().map(|&i| self.d_scales[i]).collect(),
            d_opacity: indices.iter().map(|&i| self.d_opacity[i]).collect(),
            d_sh: indices.iter().map(|&i| self.d_sh[i].clone()).collect(),
        }
    }
}

/// Deltas taking frame `frame_index - 1` to `frame_index`. Entries follow the
/// keyframe's layered order, so the first `n` entries belong to the first
/// layers holding `n` Gaussians.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameDelta {
    pub rigid: RigidDelta,
    pub residual: ResidualDelta,
    pub frame_index: usize,
}

impl FrameDelta {
    pub fn len(&self) -> usize {
        self.rigid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rigid.is_empty()
    }

    /// Restriction to the first `n` Gaussians (the deltas of the first layers).
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            rigid: self.rigid.prefix(n),
            residual: self.residual.prefix(n),
            frame_index: self.frame_index,
        }
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            rigid: self.rigid.select(indices),
            residual: self.residual.select(indices),
            frame_index: self.frame_index,
        }
    }
}

/// Keyframe indices of an adaptive grouping; always starts with 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPlan {
    pub boundaries: Vec<usize>,
    pub tau_mu: f64,
}

impl GroupPlan {
    /// `(start, frame_count)` for each group of a `total`-frame sequence.
    pub fn groups(&self, total: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.boundaries.len());
        for (i, &start) in self.boundaries.iter().enumerate() {
            let end = self.boundaries.get(i + 1).copied().unwrap_or(total);
            if start < total {
                out.push((start, end.min(total) - start));
            }
        }
        out
    }
}

pub fn apply_rigid(set: &GaussianSet, delta: &RigidDelta) -> Result<GaussianSet, MotionError> {
    check_len("translations", delta.translations.len(), set.len())?;
    check_len("rotations", delta.rotations.len(), set.len())?;
    let finite = delta.translations.iter().flatten().all(|v| v.is_finite())
        && delta.rotations.iter().flatten().all(|v| v.is_finite());
    if !finite {
        return Err(MotionError::NonFinite);
    }
    let gaussians = set
        .gaussians()
        .iter()
        .zip(delta.translations.iter().zip(&delta.rotations))
        .map(|(g, (dmu, drot))| {
            let mut g = g.clone();
            for k in 0..3 {
                g.position[k] = (g.position[k] as f64 + dmu[k] as f64) as f32;
            }
            if *drot != QUAT_IDENTITY {
                g.rotation = quat_normalize_f32(quat_mul(to_f64x4(*drot), to_f64x4(g.rotation)));
            }
            g
        })
        .collect();
    Ok(GaussianSet::from_valid(gaussians, set.sh_degree()))
}

pub fn apply_residual(set: &GaussianSet, delta: &ResidualDelta) -> Result<GaussianSet, MotionError> {
    let n = set.len();
    check_len("d_scales", delta.d_scales.len(), n)?;
    check_len("d_opacity", delta.d_opacity.len(), n)?;
    check_len("d_sh", delta.d_sh.len(), n)?;
    let n_sh = sh_coeff_count(set.sh_degree());
    for d in &delta.d_sh {
        check_len("d_sh coefficients", d.len(), n_sh)?;
    }
    let finite = delta.d_scales.iter().flatten().all(|v| v.is_finite())
        && delta.d_opacity.iter().all(|v| v.is_finite())
        && delta.d_sh.iter().flatten().all(|v| v.is_finite());
    if !finite {
        return Err(MotionError::NonFinite);
    }
    let gaussians = set
        .gaussians()
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let mut g: Gaussian = g.clone();
            for k in 0..3 {
                let s = (g.scales[k] as f64 + delta.d_scales[i][k] as f64) as f32;
                g.scales[k] = s.max(SCALE_FLOOR);
            }
            g.opacity = ((g.opacity as f64 + delta.d_opacity[i] as f64) as f32).clamp(0.0, 1.0);
            for (c, d) in g.sh.iter_mut().zip(&delta.d_sh[i]) {
                *c = (*c as f64 + *d as f64) as f32;
            }
            g
        })
        .collect();
    Ok(GaussianSet::from_valid(gaussians, set.sh_degree()))
}

/// Applies one frame's rigid then residual update.
pub fn apply_frame_delta(set: &GaussianSet, delta: &FrameDelta) -> Result<GaussianSet, MotionError> {
    apply_residual(&apply_rigid(set, &delta.rigid)?, &delta.residual)
}

/// Mean over Gaussians of the Euclidean norm of each translation.
pub fn mean_translation(delta: &RigidDelta) -> Result<f64, MotionError> {
    if delta.translations.is_empty() {
        return Err(MotionError::Empty);
    }
    let sum: f64 = delta
        .translations
        .iter()
        .map(|t| {
            let [x, y, z] = t.map(|v| v as f64);
            (x * x + y * y + z * z).sqrt()
        })
        .sum();
    Ok(sum / delta.translations.len() as f64)
}

/// Frame 0 always opens a group. `values[i]` is the mean translation of frame
/// `i + 1`; any frame whose value strictly exceeds `tau_mu` opens a new group
/// and is coded as that group's keyframe.
pub fn plan_groups(per_frame_mean_translation: &[f64], tau_mu: f64) -> Result<GroupPlan, MotionError> {
    if !(tau_mu > 0.0) || !tau_mu.is_finite() {
        return Err(MotionError::BadThreshold(tau_mu));
    }
    let mut boundaries = vec![0];
    for (i, &v) in per_frame_mean_translation.iter().enumerate() {
        if v > tau_mu {
            boundaries.push(i + 1);
        }
    }
    Ok(GroupPlan { boundaries, tau_mu })
}

/// Fixed-length grouping, used as a baseline against adaptive planning.
pub fn fixed_groups(total_frames: usize, group_len: usize) -> GroupPlan {
    let step = group_len.max(1);
    GroupPlan {
        boundaries: (0..total_frames.max(1)).step_by(step).collect(),
        tau_mu: f64::INFINITY,
    }
}

/// Rigid delta taking `prev` to `next` (same Gaussian order):
/// `Δμ = μ_next − μ_prev`, `ΔR = R_next · R_prev⁻¹`.
pub fn rigid_between(prev: &GaussianSet, next: &GaussianSet) -> Result<RigidDelta, MotionError> {
    check_len("next frame", next.len(), prev.len())?;
    let mut out = RigidDelta {
        translations: Vec::with_capacity(prev.len()),
        rotations: Vec::with_capacity(prev.len()),
    };
    for (a, b) in prev.gaussians().iter().zip(next.gaussians()) {
        out.translations.push([0, 1, 2].map(|k| (b.position[k] as f64 - a.position[k] as f64) as f32));
        let r = if a.rotation == b.rotation {
            QUAT_IDENTITY
        } else {
            let d = quat_mul(to_f64x4(b.rotation), quat_inverse(to_f64x4(a.rotation)));
            d.map(|v| v as f32)
        };
        out.rotations.push(r);
    }
    Ok(out)
}

pub fn residual_between(prev: &GaussianSet, next: &GaussianSet) -> Result<ResidualDelta, MotionError> {
    check_len("next frame", next.len(), prev.len())?;
    let mut out = ResidualDelta::default();
    for (a, b) in prev.gaussians().iter().zip(next.gaussians()) {
        out.d_scales.push([0, 1, 2].map(|k| (b.scales[k] as f64 - a.scales[k] as f64) as f32));
        out.d_opacity.push((b.opacity as f64 - a.opacity as f64) as f32);
        out.d_sh.push(
            a.sh.iter()
                .zip(&b.sh)
                .map(|(x, y)| (*y as f64 - *x as f64) as f32)
                .collect(),
        );
    }
    Ok(out)
}

/// Frame `t` of a group, restricted to the layers present in `keyframe`:
/// the flattened keyframe with `deltas[0..t]` folded in order. Deltas longer
/// than the layer prefix are truncated to it.
pub fn reconstruct_frame(
    keyframe: &LayeredFrame,
    deltas: &[FrameDelta],
    t: usize,
) -> Result<GaussianSet, MotionError> {
    reconstruct_frame_layers(keyframe, deltas, t, keyframe.num_layers())
}

/// As [`reconstruct_frame`], using only layers `1..=l`.
pub fn reconstruct_frame_layers(
    keyframe: &LayeredFrame,
    deltas: &[FrameDelta],
    t: usize,
    l: usize,
) -> Result<GaussianSet, MotionError> {
    if t > deltas.len() {
        return Err(MotionError::OutOfRange { t, max: deltas.len() });
    }
    let l = l.min(keyframe.num_layers());
    let n = keyframe.prefix_len(l);
    let mut set = keyframe.flatten(l);
    for delta in &deltas[..t] {
        if delta.len() < n {
            return Err(MotionError::SizeMismatch {
                what: "frame delta",
                got: delta.len(),
                expected: n,
            });
        }
        let d = if delta.len() == n { delta.clone() } else { delta.prefix(n) };
        set = apply_frame_delta(&set, &d)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{equal_fractions, partition_layers};
    use crate::math::quat_from_axis_angle;
    use proptest::prelude::*;

    fn set_of(n: usize) -> GaussianSet {
        let gs = (0..n)
            .map(|i| {
                let q = quat_from_axis_angle([1.0, 2.0, i as f64], 0.3 * i as f64);
                Gaussian {
                    position: [i as f32 * 0.1, -(i as f32), 0.5],
                    rotation: quat_normalize_f32(q),
                    scales: [0.02, 0.03, 0.04],
                    opacity: 0.1 * (i % 10) as f32,
                    sh: vec![0.1 * i as f32; 12],
                }
            })
            .collect();
        GaussianSet::new(gs, 1).unwrap()
    }

    #[test]
    fn identity_rigid_is_identity() {
        let s = set_of(5);
        assert_eq!(apply_rigid(&s, &RigidDelta::identity(5)).unwrap(), s);
    }

    #[test]
    fn translation_adds() {
        let s = GaussianSet::new(
            vec![Gaussian {
                position: [0.0; 3],
                rotation: QUAT_IDENTITY,
                scales: [0.1; 3],
                opacity: 0.5,
                sh: vec![0.0; 3],
            }],
            0,
        )
        .unwrap();
        let mut d = RigidDelta::identity(1);
        d.translations[0] = [1.0, 0.0, 0.0];
        assert_eq!(apply_rigid(&s, &d).unwrap().gaussians()[0].position, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn quarter_turn_about_z() {
        let s = GaussianSet::new(
            vec![Gaussian {
                position: [0.0; 3],
                rotation: QUAT_IDENTITY,
                scales: [0.1; 3],
                opacity: 0.5,
                sh: vec![0.0; 3],
            }],
            0,
        )
        .unwrap();
        let mut d = RigidDelta::identity(1);
        d.rotations[0] = quat_from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2).map(|v| v as f32);
        let r = apply_rigid(&s, &d).unwrap().gaussians()[0].rotation;
        let h = std::f32::consts::FRAC_1_SQRT_2;
        for (a, b) in r.iter().zip([h, 0.0, 0.0, h]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rigid_errors() {
        let s = set_of(3);
        assert!(matches!(apply_rigid(&s, &RigidDelta::identity(2)), Err(MotionError::SizeMismatch { .. })));
        let mut d = RigidDelta::identity(3);
        d.translations[1][2] = f32::NAN;
        assert_eq!(apply_rigid(&s, &d), Err(MotionError::NonFinite));
    }

    #[test]
    fn residual_rules() {
        let s = set_of(2);
        assert_eq!(apply_residual(&s, &ResidualDelta::zero(2, 1)).unwrap(), s);
        let base = GaussianSet::new(
            vec![Gaussian {
                position: [0.0; 3],
                rotation: QUAT_IDENTITY,
                scales: [0.02; 3],
                opacity: 0.8,
                sh: vec![0.0; 3],
            }],
            0,
        )
        .unwrap();
        let mut d = ResidualDelta::zero(1, 0);
        d.d_opacity[0] = 0.5;
        d.d_scales[0] = [0.01, 0.0, 0.0];
        let out = apply_residual(&base, &d).unwrap();
        let g = &out.gaussians()[0];
        assert_eq!(g.opacity, 1.0);
        assert!((g.scales[0] - 0.03).abs() < 1e-7);
        assert_eq!(&g.scales[1..], &[0.02, 0.02]);
        d.d_scales[0] = [-1.0, 0.0, 0.0];
        assert_eq!(apply_residual(&base, &d).unwrap().gaussians()[0].scales[0], SCALE_FLOOR);
        assert!(apply_residual(&base, &ResidualDelta::zero(1, 1)).is_err());
    }

    #[test]
    fn mean_translation_examples() {
        assert_eq!(mean_translation(&RigidDelta::identity(4)).unwrap(), 0.0);
        let d = RigidDelta {
            translations: vec![[0.003, 0.0, 0.0], [0.0, 0.001, 0.0]],
            rotations: vec![QUAT_IDENTITY; 2],
        };
        assert!((mean_translation(&d).unwrap() - 0.002).abs() < 1e-9);
        assert_eq!(mean_translation(&RigidDelta::default()), Err(MotionError::Empty));
    }

    #[test]
    fn plan_examples() {
        assert_eq!(plan_groups(&[0.0; 5], DEFAULT_TAU_MU).unwrap().boundaries, vec![0]);
        let plan = plan_groups(&[0.001, 0.003, 0.001], 0.0025).unwrap();
        assert_eq!(plan.boundaries, vec![0, 2]);
        assert_eq!(plan.groups(4), vec![(0, 2), (2, 2)]);
        // Equality is not a boundary.
        assert_eq!(plan_groups(&[0.0025], 0.0025).unwrap().boundaries, vec![0]);
        assert!(plan_groups(&[0.1], 0.0).is_err());
        assert_eq!(fixed_groups(7, 3).groups(7), vec![(0, 3), (3, 3), (6, 1)]);
    }

    #[test]
    fn reconstruct_examples() {
        let s = set_of(12);
        let kf = partition_layers(&s, 3, &equal_fractions(3), 1e5).unwrap();
        let flat = kf.flatten(3);
        assert_eq!(reconstruct_frame(&kf, &[], 0).unwrap(), flat);
        let zero = FrameDelta {
            rigid: RigidDelta::identity(12),
            residual: ResidualDelta::zero(12, 1),
            frame_index: 1,
        };
        assert_eq!(reconstruct_frame(&kf, &[zero.clone(), zero.clone()], 2).unwrap(), flat);
        let mut shift = zero.clone();
        shift.rigid.translations = vec![[1.0, 0.0, 0.0]; 12];
        let out = reconstruct_frame(&kf, &[shift.clone()], 1).unwrap();
        for (a, b) in out.gaussians().iter().zip(flat.gaussians()) {
            assert_eq!(a.position[0], (b.position[0] as f64 + 1.0) as f32);
            assert_eq!(a.position[1..], b.position[1..]);
        }
        assert!(matches!(reconstruct_frame(&kf, &[shift], 2), Err(MotionError::OutOfRange { .. })));
        // Layer-restricted reconstruction uses only the prefix of each delta.
        let partial = reconstruct_frame_layers(&kf, &[zero], 1, 1).unwrap();
        assert_eq!(partial, kf.flatten(1));
    }

    fn arb_rigid(n: usize) -> impl Strategy<Value = RigidDelta> {
        prop::collection::vec(
            (prop::array::uniform3(-0.1f32..0.1), prop::array::uniform3(-1.0f64..1.0), -3.0f64..3.0),
            n,
        )
        .prop_map(|v| RigidDelta {
            translations: v.iter().map(|x| x.0).collect(),
            rotations: v.iter().map(|x| quat_from_axis_angle(x.1, x.2).map(|c| c as f32)).collect(),
        })
    }

    proptest! {
        #[test]
        fn rigid_and_residual_touch_disjoint_fields(d in arb_rigid(6), ds in prop::collection::vec(-0.01f32..0.01, 6)) {
            let s = set_of(6);
            let r = apply_rigid(&s, &d).unwrap();
            for (a, b) in r.gaussians().iter().zip(s.gaussians()) {
                prop_assert_eq!(a.scales, b.scales);
                prop_assert_eq!(a.opacity, b.opacity);
                prop_assert_eq!(&a.sh, &b.sh);
            }
            let mut res = ResidualDelta::zero(6, 1);
            res.d_opacity = ds.clone();
            res.d_scales = ds.iter().map(|&v| [v; 3]).collect();
            let q = apply_residual(&s, &res).unwrap();
            for (a, b) in q.gaussians().iter().zip(s.gaussians()) {
                prop_assert_eq!(a.position, b.position);
                prop_assert_eq!(a.rotation, b.rotation);
            }
        }

        #[test]
        fn inverse_rigid_recovers(d in arb_rigid(6)) {
            let s = set_of(6);
            let fwd = apply_rigid(&s, &d).unwrap();
            let inv = RigidDelta {
                translations: d.translations.iter().map(|t| t.map(|v| -v)).collect(),
                rotations: d.rotations.iter()
                    .map(|r| quat_inverse(to_f64x4(*r)).map(|v| v as f32)).collect(),
            };
            let back = apply_rigid(&fwd, &inv).unwrap();
            for (a, b) in back.gaussians().iter().zip(s.gaussians()) {
                for k in 0..3 {
                    prop_assert!((a.position[k] - b.position[k]).abs() < 1e-5);
                }
                // q and -q are the same rotation.
                let sign = if a.rotation.iter().zip(&b.rotation).map(|(x, y)| x * y).sum::<f32>() < 0.0 { -1.0 } else { 1.0 };
                for k in 0..4 {
                    prop_assert!((sign * a.rotation[k] - b.rotation[k]).abs() < 1e-5);
                }
            }
        }

        #[test]
        fn plan_invariant_to_joint_rescale(v in prop::collection::vec(0.0f64..0.01, 0..30), tau in 0.0005f64..0.01, k in 0.1f64..100.0) {
            let a = plan_groups(&v, tau).unwrap().boundaries;
            let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
            let b = plan_groups(&scaled, tau * k).unwrap().boundaries;
            // Multiplication is monotone but can round at exact ties.
            let ties = v.iter().any(|x| ((x - tau) / tau).abs() < 1e-12);
            if !ties { prop_assert_eq!(a, b); }
        }

        #[test]
        fn fold_is_recursive(d1 in arb_rigid(6), d2 in arb_rigid(6)) {
            let kf = partition_layers(&set_of(6), 2, &[0.5, 0.5], 1e5).unwrap();
            let mk = |r: RigidDelta, i| FrameDelta { rigid: r, residual: ResidualDelta::zero(6, 1), frame_index: i };
            let deltas = vec![mk(d1, 1), mk(d2, 2)];
            let f1 = reconstruct_frame(&kf, &deltas, 1).unwrap();
            let f2 = reconstruct_frame(&kf, &deltas, 2).unwrap();
            prop_assert_eq!(f2, apply_residual(&apply_rigid(&f1, &deltas[1].rigid).unwrap(), &deltas[1].residual).unwrap());
        }
    }
}
