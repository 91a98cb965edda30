//! Segment server: `/manifest`, `/segment?group=G&layer=L`, `/index`, `/health`.
//!
//! The container is held in memory and every segment is a verbatim slice of
//! it. The server runs on its own runtime so that [`SegmentServer::kill`]
//! drops every open connection at once.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use gsv_core::container::{ContainerError, ContainerIndex, Manifest};
use serde::Deserialize;
use tokio::runtime::Runtime;

use crate::StreamError;

pub const PORT_ENV: &str = "GSV_PORT";

/// `GSV_PORT` when set, else `flag`.
pub fn resolve_port(flag: u16) -> Result<u16, StreamError> {
    match std::env::var(PORT_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| StreamError::Config(format!("{PORT_ENV}={v:?} is not a port number"))),
        Err(_) => Ok(flag),
    }
}

pub struct Served {
    container: Bytes,
    index: ContainerIndex,
    index_bytes: Bytes,
    manifest_json: String,
    segment_bytes: AtomicU64,
    segments: AtomicU64,
}

impl Served {
    /// `url` is the manifest's container url; the file name when serving a file.
    pub fn new(container: Vec<u8>, url: &str) -> Result<Self, StreamError> {
        let index = ContainerIndex::from_bytes(&container)?;
        if index.file_len() != container.len() as u64 {
            return Err(ContainerError::Directory(format!(
                "directory describes {} bytes, file has {}",
                index.file_len(),
                container.len()
            ))
            .into());
        }
        let manifest_json = Manifest::from_index(&index, url).to_json();
        let index_bytes = Bytes::from(index.to_bytes());
        Ok(Self {
            container: Bytes::from(container),
            index,
            index_bytes,
            manifest_json,
            segment_bytes: AtomicU64::new(0),
            segments: AtomicU64::new(0),
        })
    }

    pub fn open(path: &Path) -> Result<Self, StreamError> {
        let bytes = std::fs::read(path).map_err(ContainerError::Io)?;
        let url = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Self::new(bytes, &url)
    }

    pub fn manifest_json(&self) -> &str {
        &self.manifest_json
    }

    pub fn index(&self) -> &ContainerIndex {
        &self.index
    }
}

#[derive(Debug, Deserialize)]
struct SegmentQuery {
    group: usize,
    layer: usize,
}

fn not_found(msg: String) -> Response {
    (StatusCode::NOT_FOUND, [(header::CONTENT_TYPE, "text/plain")], msg).into_response()
}

async fn manifest(State(s): State<Arc<Served>>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], s.manifest_json.clone()).into_response()
}

async fn index(State(s): State<Arc<Served>>) -> Response {
    ([(header::CONTENT_TYPE, "application/octet-stream")], s.index_bytes.clone()).into_response()
}

async fn health() -> &'static str {
    "ok"
}

async fn segment(State(s): State<Arc<Served>>, Query(q): Query<SegmentQuery>) -> Response {
    match s.index.segment_range(q.group, q.layer) {
        Ok((a, b)) => {
            let body = s.container.slice(a as usize..b as usize);
            s.segment_bytes.fetch_add(body.len() as u64, Ordering::Relaxed);
            s.segments.fetch_add(1, Ordering::Relaxed);
            ([(header::CONTENT_TYPE, "application/octet-stream")], body).into_response()
        }
        Err(e) => not_found(format!("error: {e}\n")),
    }
}

pub fn router(state: Arc<Served>) -> Router {
    Router::new()
        .route("/manifest", get(manifest))
        .route("/index", get(index))
        .route("/segment", get(segment))
        .route("/health", get(health))
        .with_state(state)
}

pub struct SegmentServer {
    addr: SocketAddr,
    state: Arc<Served>,
    runtime: Option<Runtime>,
}

impl SegmentServer {
    pub fn start(served: Served, addr: SocketAddr) -> Result<Self, StreamError> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .thread_name("gsv-serve")
            .enable_all()
            .build()
            .map_err(StreamError::Io)?;
        let listener = runtime
            .block_on(tokio::net::TcpListener::bind(addr))
            .map_err(|e| StreamError::Bind(addr, e))?;
        let addr = listener.local_addr().map_err(StreamError::Io)?;
        let state = Arc::new(served);
        let app = router(state.clone());
        runtime.spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        Ok(Self {
            addr,
            state,
            runtime: Some(runtime),
        })
    }

    pub fn open(path: &Path, addr: SocketAddr) -> Result<Self, StreamError> {
        Self::start(Served::open(path)?, addr)
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Segment payload bytes sent so far.
    pub fn segment_bytes_served(&self) -> u64 {
        self.state.segment_bytes.load(Ordering::Relaxed)
    }

    pub fn segments_served(&self) -> u64 {
        self.state.segments.load(Ordering::Relaxed)
    }

    pub fn served(&self) -> &Served {
        &self.state
    }

    /// Stops the server abruptly, dropping open connections.
    pub fn kill(mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }

    /// Blocks the calling thread for as long as the server runs.
    pub fn wait(mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.block_on(std::future::pending::<()>());
        }
    }
}

impl Drop for SegmentServer {
    fn drop(&mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}
