//! Layer-selective HTTP delivery of `.gsv` containers.
//!
//! Endpoints: `GET /manifest` (manifest JSON), `GET /segment?group=G&layer=L`
//! (payloads of one group and layer, layer 1-based), `GET /index` (header and
//! group directory) and `GET /health`.

pub mod client;
pub mod policy;
pub mod server;

use std::net::SocketAddr;

use gsv_core::container::ContainerError;
use thiserror::Error;

pub use client::{client_play, client_play_blocking, ClientConfig, GroupLog, PlaybackLog, SegmentLog};
pub use policy::{select_layer, update_bandwidth, BandwidthEstimate, Policy};
pub use server::{resolve_port, SegmentServer, Served};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("cannot bind {0}: {1}")]
    Bind(SocketAddr, std::io::Error),
    #[error("i/o: {0}")]
    Io(std::io::Error),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Decode(#[from] gsv_core::Error),
    #[error("http: {0}")]
    Http(String),
    #[error("http status {code}: {body}")]
    Status { code: u16, body: String },
    #[error("{url}: gave up after {attempts} attempts: {last}")]
    Retries {
        url: String,
        attempts: u32,
        last: Box<StreamError>,
    },
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("transfer duration {0} s must be positive")]
    BadDuration(f64),
    #[error("config: {0}")]
    Config(String),
}
