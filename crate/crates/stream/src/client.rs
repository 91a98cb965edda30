//! Streaming client: fetches the manifest, then per group picks a layer count
//! and fetches and decodes layers `1..=l`.

use std::time::{Duration, Instant};

use gsv_core::container::{ContainerIndex, LayerData, Manifest};
use gsv_core::pipeline::decode_layer_data;
use reqwest::Client;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::policy::{add_sample, BandwidthEstimate, Policy, DEFAULT_ALPHA};
use crate::StreamError;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    pub policy: Policy,
    /// Link capacity the estimator may credit; `None` is unlimited. Measured
    /// throughput above the cap is clamped to it.
    pub cap_bps: Option<f64>,
    pub alpha: f64,
    /// Attempts per request before giving up on it.
    pub max_attempts: u32,
    pub retry_delay: Duration,
    pub timeout: Duration,
    pub decode: bool,
    /// Minimum wall time per group, for paced playback.
    pub group_interval: Duration,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            policy: Policy::default(),
            cap_bps: None,
            alpha: DEFAULT_ALPHA,
            max_attempts: 3,
            retry_delay: Duration::from_millis(50),
            timeout: Duration::from_secs(10),
            decode: true,
            group_interval: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentLog {
    pub group: usize,
    pub layer: usize,
    pub bytes: u64,
    pub attempts: u32,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupLog {
    pub group: usize,
    pub start: u32,
    pub frames: u16,
    /// Layer count chosen before the group.
    pub chosen: usize,
    /// Layer count actually played (1 after a failed enhancement fetch).
    pub layers: usize,
    pub bytes: u64,
    pub fetch_ms: f64,
    pub decode_ms: f64,
    pub gaussians: usize,
    pub ewma_bps: f64,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct PlaybackLog {
    pub url: String,
    /// Bytes of `/manifest` and `/index`; not part of `total_bytes`.
    pub control_bytes: u64,
    pub groups: Vec<GroupLog>,
    pub segments: Vec<SegmentLog>,
    /// Segment bytes received.
    pub total_bytes: u64,
    pub completed: bool,
    pub error: Option<String>,
}

struct Fetched {
    body: Vec<u8>,
    seconds: f64,
    attempts: u32,
}

async fn fetch_once(client: &Client, url: &str) -> Result<Vec<u8>, StreamError> {
    let resp = client.get(url).send().await.map_err(|e| StreamError::Http(e.to_string()))?;
    let status = resp.status();
    let body = resp.bytes().await.map_err(|e| StreamError::Http(e.to_string()))?;
    if !status.is_success() {
        return Err(StreamError::Status {
            code: status.as_u16(),
            body: String::from_utf8_lossy(&body).trim().to_string(),
        });
    }
    Ok(body.to_vec())
}

async fn fetch(client: &Client, url: &str, cfg: &ClientConfig) -> Result<Fetched, StreamError> {
    let mut last = None;
    for attempt in 1..=cfg.max_attempts.max(1) {
        let t0 = Instant::now();
        match fetch_once(client, url).await {
            Ok(body) => {
                return Ok(Fetched {
                    body,
                    seconds: t0.elapsed().as_secs_f64(),
                    attempts: attempt,
                })
            }
            Err(e) => {
                last = Some(e);
                if attempt < cfg.max_attempts {
                    tokio::time::sleep(cfg.retry_delay).await;
                }
            }
        }
    }
    Err(StreamError::Retries {
        url: url.to_string(),
        attempts: cfg.max_attempts.max(1),
        last: Box::new(last.expect("at least one attempt")),
    })
}

fn sample_bps(bytes: u64, seconds: f64, cap: Option<f64>) -> f64 {
    let measured = if seconds > 0.0 {
        8.0 * bytes as f64 / seconds
    } else {
        f64::INFINITY
    };
    cap.map_or(measured, |c| measured.min(c))
}

/// Decodable data for one group from its first `segments.len()` layer segments.
pub fn group_layer_data(index: &ContainerIndex, group: usize, segments: &[Vec<u8>]) -> Result<LayerData, StreamError> {
    let entry = index
        .groups
        .get(group)
        .ok_or(gsv_core::container::ContainerError::GroupOutOfRange(group))?;
    let mut layers = Vec::with_capacity(segments.len());
    for (l, seg) in segments.iter().enumerate() {
        let (base, end) = entry.layer_range(l);
        if seg.len() as u64 != end - base {
            return Err(StreamError::Protocol(format!(
                "group {group} layer {}: {} bytes where the directory says {}",
                l + 1,
                seg.len(),
                end - base
            )));
        }
        layers.push(
            entry.payloads[l]
                .iter()
                .map(|p| {
                    let a = (p.offset - base) as usize;
                    seg[a..a + p.size as usize].to_vec()
                })
                .collect(),
        );
    }
    let mut sub = index.clone();
    sub.groups = vec![entry.clone()];
    sub.header.group_count = 1;
    Ok(LayerData {
        index: sub,
        layers_read: segments.len(),
        payloads: vec![layers],
    })
}

/// Plays the stream at `base_url` (e.g. `http://127.0.0.1:8080`). Failures end
/// the session early with `error` set; this never panics on network faults.
pub async fn client_play(base_url: &str, cfg: &ClientConfig) -> PlaybackLog {
    let mut log = PlaybackLog {
        url: base_url.to_string(),
        ..Default::default()
    };
    if let Err(e) = play(base_url, cfg, &mut log).await {
        log.error = Some(e.to_string());
    }
    log
}

async fn play(base_url: &str, cfg: &ClientConfig, log: &mut PlaybackLog) -> Result<(), StreamError> {
    let client = Client::builder()
        .timeout(cfg.timeout)
        .connect_timeout(cfg.timeout)
        .build()
        .map_err(|e| StreamError::Http(e.to_string()))?;
    let base = base_url.trim_end_matches('/');

    let m = fetch(&client, &format!("{base}/manifest"), cfg).await?;
    let manifest = Manifest::from_json(&String::from_utf8_lossy(&m.body))?;
    let ix = fetch(&client, &format!("{base}/index"), cfg).await?;
    let index = ContainerIndex::from_bytes(&ix.body)?;
    if index.groups.len() != manifest.groups.len() || index.layers() != manifest.layers as usize {
        return Err(StreamError::Protocol("manifest and index disagree".into()));
    }
    log.control_bytes = (m.body.len() + ix.body.len()) as u64;
    let mut est = add_sample(
        &BandwidthEstimate::new(cfg.alpha),
        sample_bps(log.control_bytes, m.seconds + ix.seconds, cfg.cap_bps),
    );

    for g in 0..manifest.groups.len() {
        let chosen = cfg.policy.choose(&manifest, g, &est);
        let t0 = Instant::now();
        let mut segments: Vec<Vec<u8>> = Vec::with_capacity(chosen);
        let mut fetch_seconds = 0.0;
        let mut degraded = false;
        for layer in 1..=chosen {
            match fetch(&client, &format!("{base}/segment?group={g}&layer={layer}"), cfg).await {
                Ok(f) => {
                    fetch_seconds += f.seconds;
                    log.segments.push(SegmentLog {
                        group: g,
                        layer,
                        bytes: f.body.len() as u64,
                        attempts: f.attempts,
                        sha256: format!("{:x}", Sha256::digest(&f.body)),
                    });
                    log.total_bytes += f.body.len() as u64;
                    segments.push(f.body);
                }
                Err(e) if layer == 1 => return Err(e),
                Err(_) => {
                    degraded = true;
                    break;
                }
            }
        }
        let fetch_ms = t0.elapsed().as_secs_f64() * 1e3;
        let bytes: u64 = segments.iter().map(|s| s.len() as u64).sum();
        if degraded {
            segments.truncate(1);
        }
        est = add_sample(&est, sample_bps(bytes, fetch_seconds, cfg.cap_bps));

        let t1 = Instant::now();
        let gaussians = if cfg.decode {
            let data = group_layer_data(&index, g, &segments)?;
            let seq = tokio::task::spawn_blocking(move || decode_layer_data(&data))
                .await
                .map_err(|e| StreamError::Protocol(e.to_string()))??;
            seq.groups[0].keyframe.prefix_len(segments.len())
        } else {
            0
        };
        let entry = &manifest.groups[g];
        log.groups.push(GroupLog {
            group: g,
            start: entry.start,
            frames: entry.frames,
            chosen,
            layers: segments.len(),
            bytes,
            fetch_ms,
            decode_ms: t1.elapsed().as_secs_f64() * 1e3,
            gaussians,
            ewma_bps: est.ewma_bps,
            degraded,
        });
        if let Some(rest) = cfg.group_interval.checked_sub(t0.elapsed()) {
            tokio::time::sleep(rest).await;
        }
    }
    log.completed = true;
    Ok(())
}

/// Runs [`client_play`] on a private runtime.
pub fn client_play_blocking(base_url: &str, cfg: &ClientConfig) -> Result<PlaybackLog, StreamError> {
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(StreamError::Io)?;
    Ok(rt.block_on(client_play(base_url, cfg)))
}
