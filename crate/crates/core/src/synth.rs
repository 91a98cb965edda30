//! Deterministic synthetic scene sequences with known per-frame deltas.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{Gaussian, GaussianSet};
use crate::math::{quat_from_axis_angle, quat_normalize_f32, sh_coeff_count};
use crate::motion::{apply_frame_delta, FrameDelta, RigidDelta, ResidualDelta};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid scene spec: {0}")]
pub struct SynthError(pub String);

/// A frame whose motion departs from the calm baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Burst {
    pub frame: usize,
    /// Per-Gaussian translation norm on this frame.
    pub amplitude: f64,
    /// Appearance change magnitude on this frame.
    #[serde(default)]
    pub residual_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub count: usize,
    pub frames: usize,
    pub sh_degree: u8,
    /// Edge length of the cube (centered at the origin) holding frame-0 positions.
    pub extent: f64,
    pub scale_range: [f64; 2],
    pub opacity_range: [f64; 2],
    /// Per-Gaussian translation norm applied on every non-burst frame.
    pub motion_amplitude: f64,
    /// 1 moves every Gaussian along one shared direction per frame, 0 uses
    /// independent random directions.
    pub motion_coherence: f64,
    /// Rotation angle per frame in radians, about a per-Gaussian random axis.
    pub rotation_amplitude: f64,
    /// Per-frame magnitude of opacity, scale and SH perturbations.
    pub residual_amplitude: f64,
    pub bursts: Vec<Burst>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            count: 1000,
            frames: 10,
            sh_degree: 1,
            extent: 2.0,
            scale_range: [0.005, 0.03],
            opacity_range: [0.05, 1.0],
            motion_amplitude: 0.0,
            motion_coherence: 1.0,
            rotation_amplitude: 0.0,
            residual_amplitude: 0.0,
            bursts: Vec::new(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError(m.to_string()));
        if self.count == 0 {
            return bad("count must be >= 1");
        }
        if self.frames == 0 {
            return bad("frames must be >= 1");
        }
        if self.sh_degree > 3 {
            return bad("sh_degree must be <= 3");
        }
        if !(self.extent.is_finite() && self.extent > 0.0) {
            return bad("extent must be > 0");
        }
        let [s0, s1] = self.scale_range;
        if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            return bad("scale_range must satisfy 0 < lo <= hi");
        }
        let [o0, o1] = self.opacity_range;
        if !(0.0 <= o0 && o0 <= o1 && o1 <= 1.0) {
            return bad("opacity_range must satisfy 0 <= lo <= hi <= 1");
        }
        let amplitudes = [
            self.motion_amplitude,
            self.rotation_amplitude,
            self.residual_amplitude,
        ];
        if amplitudes.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return bad("amplitudes must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.motion_coherence) {
            return bad("motion_coherence must lie in [0, 1]");
        }
        for b in &self.bursts {
            if b.frame == 0 || b.frame >= self.frames {
                return bad("burst frames must lie in 1..frames");
            }
            if !(b.amplitude.is_finite() && b.amplitude >= 0.0)
                || !(b.residual_amplitude.is_finite() && b.residual_amplitude >= 0.0)
            {
                return bad("burst amplitudes must be finite and >= 0");
            }
        }
        Ok(())
    }
}

/// Generated frames and the ground-truth delta taking frame `t - 1` to `t`
/// (`deltas[t - 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub frames: Vec<GaussianSet>,
    pub deltas: Vec<FrameDelta>,
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    UnitSphere.sample(rng)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn initial_frame(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> GaussianSet {
    let half = spec.extent / 2.0;
    let n_sh = sh_coeff_count(spec.sh_degree);
    let gaussians = (0..spec.count)
        .map(|_| {
            let position = [0; 3].map(|_| rng.random_range(-half..half) as f32);
            let q = [0; 4].map(|_| normal(rng));
            let scales = [0; 3].map(|_| uniform(rng, spec.scale_range) as f32);
            let opacity = uniform(rng, spec.opacity_range) as f32;
            let sh = (0..n_sh)
                .map(|k| (normal(rng) * if k < 3 { 0.5 } else { 0.1 }) as f32)
                .collect();
            Gaussian {
                position,
                rotation: quat_normalize_f32(q),
                scales,
                opacity,
                sh,
            }
        })
        .collect();
    GaussianSet::new(gaussians, spec.sh_degree).expect("generator produces valid Gaussians")
}

fn frame_delta(
    spec: &SceneSpec,
    prev: &GaussianSet,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> FrameDelta {
    let n = prev.len();
    let burst = spec.bursts.iter().find(|b| b.frame == t);
    let (amplitude, coherence, residual) = match burst {
        Some(b) => (b.amplitude, 0.0, b.residual_amplitude),
        None => (spec.motion_amplitude, spec.motion_coherence, spec.residual_amplitude),
    };
    let shared = unit(rng);
    let mut rigid = RigidDelta::identity(n);
    if amplitude > 0.0 {
        for t in rigid.translations.iter_mut() {
            let own = if coherence < 1.0 { unit(rng) } else { shared };
            let d = [0, 1, 2].map(|k| coherence * shared[k] + (1.0 - coherence) * own[k]);
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let d = if norm > 1e-9 { d.map(|v| v / norm) } else { shared };
            *t = d.map(|v| (amplitude * v) as f32);
        }
    }
    if spec.rotation_amplitude > 0.0 {
        for r in rigid.rotations.iter_mut() {
            *r = quat_from_axis_angle(unit(rng), spec.rotation_amplitude).map(|v| v as f32);
        }
    }
    let mut res = ResidualDelta::zero(n, spec.sh_degree);
    if residual > 0.0 {
        for (i, g) in prev.gaussians().iter().enumerate() {
            res.d_opacity[i] = (residual * rng.random_range(-1.0..1.0)) as f32;
            res.d_scales[i] =
                [0, 1, 2].map(|k| (0.1 * residual * g.scales[k] as f64 * normal(rng)) as f32);
            for v in res.d_sh[i].iter_mut() {
                *v = (residual * normal(rng)) as f32;
            }
        }
    }
    FrameDelta {
        rigid,
        residual: res,
        frame_index: t,
    }
}

pub fn gen_synthetic_sequence(spec: &SceneSpec, seed: u64) -> Result<SyntheticSequence, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = vec![initial_frame(spec, &mut rng)];
    let mut deltas = Vec::with_capacity(spec.frames - 1);
    for t in 1..spec.frames {
        let prev = &frames[t - 1];
        let delta = frame_delta(spec, prev, t, &mut rng);
        let next = apply_frame_delta(prev, &delta).expect("delta sized for its frame");
        deltas.push(delta);
        frames.push(next);
    }
    Ok(SyntheticSequence { frames, deltas })
}

/// One Gaussian set per frame; frame `t` is frame `t - 1` moved by the
/// spec's rigid and residual perturbations.
pub fn gen_synthetic_scene(spec: &SceneSpec, seed: u64) -> Result<Vec<GaussianSet>, SynthError> {
    Ok(gen_synthetic_sequence(spec, seed)?.frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{mean_translation, rigid_between};

    fn spec(amplitude: f64) -> SceneSpec {
        SceneSpec {
            count: 100,
            frames: 5,
            motion_amplitude: amplitude,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn zero_amplitude_frames_identical() {
        let frames = gen_synthetic_scene(&spec(0.0), 3).unwrap();
        assert_eq!(frames.len(), 5);
        for f in &frames[1..] {
            assert_eq!(f, &frames[0]);
        }
    }

    #[test]
    fn deterministic() {
        let mut s = spec(0.01);
        s.rotation_amplitude = 0.05;
        s.residual_amplitude = 0.01;
        s.motion_coherence = 0.5;
        assert_eq!(gen_synthetic_sequence(&s, 9).unwrap(), gen_synthetic_sequence(&s, 9).unwrap());
        assert_ne!(gen_synthetic_scene(&s, 9).unwrap(), gen_synthetic_scene(&s, 10).unwrap());
    }

    #[test]
    fn mean_translation_matches_amplitude() {
        for coherence in [0.0, 0.5, 1.0] {
            let mut s = spec(0.003);
            s.motion_coherence = coherence;
            let seq = gen_synthetic_sequence(&s, 1).unwrap();
            for w in seq.frames.windows(2) {
                let m = mean_translation(&rigid_between(&w[0], &w[1]).unwrap()).unwrap();
                assert!((m - 0.003).abs() < 0.1 * 0.003, "{m}");
            }
        }
    }

    #[test]
    fn bursts_use_their_amplitude() {
        let mut s = spec(0.0005);
        s.frames = 6;
        s.bursts = vec![Burst { frame: 3, amplitude: 0.005, residual_amplitude: 0.0 }];
        let seq = gen_synthetic_sequence(&s, 2).unwrap();
        let m: Vec<f64> = seq.deltas.iter().map(|d| mean_translation(&d.rigid).unwrap()).collect();
        for (i, v) in m.iter().enumerate() {
            let want = if i + 1 == 3 { 0.005 } else { 0.0005 };
            assert!((v - want).abs() < 1e-6 * want.max(1.0));
        }
    }

    #[test]
    fn invalid_specs() {
        let cases = [
            SceneSpec { count: 0, ..SceneSpec::default() },
            SceneSpec { scale_range: [0.0, 0.1], ..SceneSpec::default() },
            SceneSpec { opacity_range: [0.5, 1.5], ..SceneSpec::default() },
            SceneSpec { motion_amplitude: -1.0, ..SceneSpec::default() },
            SceneSpec { sh_degree: 4, ..SceneSpec::default() },
            SceneSpec {
                bursts: vec![Burst { frame: 0, amplitude: 1.0, residual_amplitude: 0.0 }],
                ..SceneSpec::default()
            },
        ];
        for c in cases {
            assert!(gen_synthetic_scene(&c, 0).is_err());
        }
    }

    #[test]
    fn spec_parses_from_json() {
        let s: SceneSpec = serde_json::from_str(r#"{"count": 10, "bursts": [{"frame": 2, "amplitude": 0.1}]}"#).unwrap();
        assert_eq!(s.count, 10);
        assert_eq!(s.frames, SceneSpec::default().frames);
        assert_eq!(s.bursts[0].residual_amplitude, 0.0);
    }
}
