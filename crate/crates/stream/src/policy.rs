//! Throughput estimation and layer choice.

use gsv_core::container::Manifest;
use serde::Serialize;

use crate::StreamError;

pub const DEFAULT_ALPHA: f64 = 0.3;
pub const DEFAULT_SAFETY: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandwidthEstimate {
    pub ewma_bps: f64,
    pub alpha: f64,
    pub last_sample_bps: f64,
    pub samples: u64,
}

impl Default for BandwidthEstimate {
    fn default() -> Self {
        Self::new(DEFAULT_ALPHA)
    }
}

impl BandwidthEstimate {
    pub fn new(alpha: f64) -> Self {
        Self {
            ewma_bps: 0.0,
            alpha,
            last_sample_bps: 0.0,
            samples: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.samples == 0
    }
}

/// Folds in one transfer of `bytes` taking `seconds`. The first sample sets
/// the average outright.
pub fn update_bandwidth(est: &BandwidthEstimate, bytes: u64, seconds: f64) -> Result<BandwidthEstimate, StreamError> {
    if !(seconds > 0.0) {
        return Err(StreamError::BadDuration(seconds));
    }
    Ok(add_sample(est, 8.0 * bytes as f64 / seconds))
}

/// As [`update_bandwidth`] with a precomputed rate; an infinite rate is allowed.
pub fn add_sample(est: &BandwidthEstimate, sample_bps: f64) -> BandwidthEstimate {
    let ewma_bps = if est.samples == 0 || est.ewma_bps.is_infinite() || sample_bps.is_infinite() {
        sample_bps
    } else {
        est.alpha * sample_bps + (1.0 - est.alpha) * est.ewma_bps
    };
    BandwidthEstimate {
        ewma_bps,
        alpha: est.alpha,
        last_sample_bps: sample_bps,
        samples: est.samples + 1,
    }
}

/// Largest `l` with `cum_bytes_per_frame[l-1]·fps·8 ≤ safety·bps`, never below 1.
pub fn select_layer_for(cum_bytes_per_frame: &[f64], fps: f64, bps: f64, safety: f64) -> usize {
    let budget = safety * bps;
    let fits = cum_bytes_per_frame
        .iter()
        .take_while(|&&b| b * fps * 8.0 <= budget)
        .count();
    fits.max(1)
}

/// Layer count for `group` of `manifest` under the current estimate.
pub fn select_layer(manifest: &Manifest, group: usize, est: &BandwidthEstimate, safety: f64) -> usize {
    let g = &manifest.groups[group];
    select_layer_for(&g.cum_bytes_per_frame, manifest.fps, est.ewma_bps, safety).min(manifest.layers as usize)
}

/// How the client picks a layer count before each group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    Auto { safety: f64 },
    Fixed(usize),
}

impl Default for Policy {
    fn default() -> Self {
        Policy::Auto {
            safety: DEFAULT_SAFETY,
        }
    }
}

impl Policy {
    pub fn choose(&self, manifest: &Manifest, group: usize, est: &BandwidthEstimate) -> usize {
        match *self {
            Policy::Auto { safety } => select_layer(manifest, group, est, safety),
            Policy::Fixed(l) => l.clamp(1, manifest.layers as usize),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gsv_core::container::ManifestGroup;

    fn manifest(cum_per_frame: Vec<f64>) -> Manifest {
        Manifest {
            version: 1,
            layers: cum_per_frame.len() as u8,
            fps: 30.0,
            groups: vec![ManifestGroup {
                start: 0,
                frames: 1,
                layer_bytes: vec![],
                cum_bytes: vec![],
                cum_bytes_per_frame: cum_per_frame,
            }],
            url: String::new(),
        }
    }

    #[test]
    fn first_sample_initializes() {
        let e = update_bandwidth(&BandwidthEstimate::default(), 125_000, 1.0).unwrap();
        assert_eq!(e.ewma_bps, 1e6);
    }

    #[test]
    fn ewma_of_one_then_three_megabit() {
        let e = update_bandwidth(&BandwidthEstimate::default(), 125_000, 1.0).unwrap();
        let e = update_bandwidth(&e, 375_000, 1.0).unwrap();
        assert!((e.ewma_bps - (0.3 * 3e6 + 0.7 * 1e6)).abs() < 1e-6);
        assert_eq!(e.last_sample_bps, 3e6);
    }

    #[test]
    fn constant_samples_approach_monotonically() {
        let mut e = update_bandwidth(&BandwidthEstimate::default(), 1000, 1.0).unwrap();
        let mut prev = e.ewma_bps;
        for _ in 0..60 {
            e = update_bandwidth(&e, 50_000, 1.0).unwrap();
            assert!(e.ewma_bps >= prev && e.ewma_bps <= 400_000.0);
            prev = e.ewma_bps;
        }
        assert!((e.ewma_bps - 400_000.0).abs() < 1e-3);
    }

    #[test]
    fn non_positive_duration_is_rejected() {
        for s in [0.0, -1.0, f64::NAN] {
            assert!(update_bandwidth(&BandwidthEstimate::default(), 10, s).is_err());
        }
    }

    #[test]
    fn layer_choice_examples() {
        let mb = 1e6;
        let m = manifest(vec![0.33 * mb, 0.66 * mb, 1.31 * mb]);
        let est = |bps| add_sample(&BandwidthEstimate::default(), bps);
        assert_eq!(select_layer(&m, 0, &est(200e6), 0.8), 2);
        assert_eq!(select_layer(&m, 0, &est(f64::INFINITY), 0.8), 3);
        assert_eq!(select_layer(&m, 0, &est(0.0), 0.8), 1);
        assert_eq!(select_layer(&m, 0, &BandwidthEstimate::default(), 0.8), 1);
    }

    #[test]
    fn layer_choice_is_monotone_in_bandwidth() {
        let m = manifest(vec![100.0, 250.0, 400.0, 800.0, 1600.0, 3000.0]);
        let mut prev = 1;
        for k in 0..200 {
            let bps = 2000.0 * 1.05f64.powi(k);
            let l = select_layer(&m, 0, &add_sample(&BandwidthEstimate::default(), bps), 0.8);
            assert!(l >= prev);
            prev = l;
        }
        assert_eq!(prev, 6);
    }
}
