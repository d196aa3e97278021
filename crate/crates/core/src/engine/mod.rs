//! Container engine access.
//!
//! [`Engine`] is the raw per-request surface (inspect, pull, create, start,
//! wait, logs, remove, info). It has two implementations: [`DockerEngine`],
//! which speaks the engine's versioned HTTP API over a local socket or TCP,
//! and [`FakeEngine`], which simulates images and containers in-process.
//!
//! [`EngineClient`] wraps either one and owns the behaviour that must not
//! differ between them: pull coalescing and the ephemeral container
//! lifecycle, where every created container is force-removed.

mod docker;
mod endpoint;
mod fake;

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use futures::future::{BoxFuture, FutureExt, Shared};
use serde::{Deserialize, Serialize};

use crate::exchange::GUEST_DIR;
use crate::manifest::ImageRef;

pub use docker::{create_container_body, demux_logs, DockerEngine};
pub use endpoint::{EngineEndpoint, Transport, DEFAULT_API_VERSION, DEFAULT_SOCKET, DOCKER_HOST_ENV, REPRO_HOST_ENV};
pub use fake::{CreatedContainer, FakeEngine, FakeImage, RecordTransform};

/// Exit code reported for a run that hit its timeout.
pub const TIMEOUT_EXIT_CODE: i64 = -1;
pub const DEFAULT_TIMEOUT_S: u64 = 3600;
pub const DEFAULT_PULL_TIMEOUT: Duration = Duration::from_secs(1800);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EngineError {
    #[error("container engine unreachable at {endpoint}: {reason}")]
    Unreachable { endpoint: String, reason: String },
    #[error("invalid engine endpoint {0}")]
    InvalidEndpoint(String),
    #[error("engine returned HTTP {status} for {request}: {body}")]
    Api { request: String, status: u16, body: String },
    #[error("image {image} not found in its registry")]
    ImageNotFound { image: String },
    #[error("pull of {image} did not finish within {seconds}s")]
    PullTimeout { image: String, seconds: u64 },
    #[error("invalid image reference: {0}")]
    InvalidImage(String),
    #[error("invalid container spec: {0}")]
    InvalidSpec(String),
    #[error("no such container {0}")]
    NoSuchContainer(String),
    #[error("engine transport error: {0}")]
    Transport(String),
}

/// Host directory bound into the container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindMount {
    pub host: PathBuf,
    pub guest: String,
    pub read_write: bool,
}

impl BindMount {
    /// Read-write mount of `host` at the exchange guest directory.
    pub fn exchange(host: impl Into<PathBuf>) -> Self {
        Self {
            host: host.into(),
            guest: GUEST_DIR.to_string(),
            read_write: true,
        }
    }

    /// `host:guest:rw` as used in `HostConfig.Binds`.
    pub fn to_bind_string(&self) -> String {
        let mode = if self.read_write { "rw" } else { "ro" };
        format!("{}:{}:{}", self.host.display(), self.guest, mode)
    }
}

/// Everything needed to run one ephemeral container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerSpec {
    /// Canonical image string.
    pub image: String,
    pub argv: Vec<String>,
    pub bind: BindMount,
    pub memory_limit_bytes: u64,
    pub gpu: bool,
    pub timeout_s: u64,
}

impl ContainerSpec {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::InvalidSpec(m));
        if self.argv.is_empty() {
            return bad("argv is empty".into());
        }
        if self.bind.guest != GUEST_DIR {
            return bad(format!("guest path must be {GUEST_DIR}, got {}", self.bind.guest));
        }
        if !self.bind.host.is_absolute() {
            return bad(format!("host path {} is not absolute", self.bind.host.display()));
        }
        if !self.bind.host.is_dir() {
            return bad(format!("host path {} does not exist", self.bind.host.display()));
        }
        if self.memory_limit_bytes == 0 {
            return bad("memory limit must be positive".into());
        }
        if self.timeout_s == 0 {
            return bad("timeout must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunOutcome {
    pub exit_code: i64,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub duration_ms: u64,
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EngineInfo {
    pub engine_version: String,
    pub api_version: String,
    pub runtimes: BTreeSet<String>,
    pub reachable: bool,
}

impl EngineInfo {
    pub fn unreachable() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PullSummary {
    pub image: String,
    pub layers: usize,
    pub duration_ms: u64,
    /// False when the image turned up locally before the pull started.
    pub performed: bool,
}

/// Raw engine operations. Implementations do not retry, coalesce or clean up;
/// [`EngineClient`] layers that on top.
#[async_trait]
pub trait Engine: Send + Sync {
    /// Human-readable location, used in error messages.
    fn describe(&self) -> String;
    async fn ping(&self) -> Result<(), EngineError>;
    async fn info(&self) -> Result<EngineInfo, EngineError>;
    async fn inspect_image(&self, image: &str) -> Result<bool, EngineError>;
    /// Pulls the image and returns the number of layers transferred.
    async fn pull(&self, image: &ImageRef) -> Result<usize, EngineError>;
    async fn create_container(&self, spec: &ContainerSpec) -> Result<String, EngineError>;
    async fn start_container(&self, id: &str) -> Result<(), EngineError>;
    async fn wait_container(&self, id: &str) -> Result<i64, EngineError>;
    async fn container_logs(&self, id: &str) -> Result<(Vec<u8>, Vec<u8>), EngineError>;
    /// Force-removes the container; removing an unknown id is not an error.
    async fn remove_container(&self, id: &str) -> Result<(), EngineError>;
}

type PullFuture = Shared<BoxFuture<'static, Result<PullSummary, EngineError>>>;

/// Thread-safe engine handle shared by runs.
#[derive(Clone)]
pub struct EngineClient {
    engine: Arc<dyn Engine>,
    in_flight: Arc<Mutex<HashMap<String, PullFuture>>>,
    pull_timeout: Duration,
}

impl std::fmt::Debug for EngineClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EngineClient")
            .field("engine", &self.engine.describe())
            .finish()
    }
}

impl EngineClient {
    pub fn new(engine: Arc<dyn Engine>) -> Self {
        Self {
            engine,
            in_flight: Arc::default(),
            pull_timeout: DEFAULT_PULL_TIMEOUT,
        }
    }

    pub fn with_pull_timeout(mut self, timeout: Duration) -> Self {
        self.pull_timeout = timeout;
        self
    }

    /// Resolves the endpoint (see [`EngineEndpoint::resolve`]) and pings it.
    pub async fn connect(endpoint: Option<EngineEndpoint>) -> Result<Self, EngineError> {
        let endpoint = match endpoint {
            Some(e) => e,
            None => EngineEndpoint::resolve(None)?,
        };
        let engine = DockerEngine::new(endpoint);
        engine.ping().await?;
        Ok(Self::new(Arc::new(engine)))
    }

    pub fn engine(&self) -> &Arc<dyn Engine> {
        &self.engine
    }

    pub async fn image_present(&self, image: &str) -> Result<bool, EngineError> {
        self.engine.inspect_image(image).await
    }

    /// Pulls `image`. Concurrent pulls of the same canonical string share
    /// one underlying engine request.
    pub async fn pull_image(&self, image: &str) -> Result<PullSummary, EngineError> {
        self.coalesced_pull(image, false).await
    }

    /// Pulls `image` only if the engine does not have it. Returns `None` when
    /// it was already present at the first check.
    pub async fn ensure_image(&self, image: &str) -> Result<Option<PullSummary>, EngineError> {
        if self.image_present(image).await? {
            return Ok(None);
        }
        self.coalesced_pull(image, true).await.map(Some)
    }

    async fn coalesced_pull(&self, image: &str, skip_if_present: bool) -> Result<PullSummary, EngineError> {
        let reference: ImageRef = image
            .parse()
            .map_err(|e: crate::manifest::InvalidImageRef| EngineError::InvalidImage(e.to_string()))?;
        let key = reference.canonical();
        let fut = {
            let mut in_flight = self.in_flight.lock().expect("pull map poisoned");
            if let Some(existing) = in_flight.get(&key) {
                existing.clone()
            } else {
                let engine = Arc::clone(&self.engine);
                let map = Arc::clone(&self.in_flight);
                let timeout = self.pull_timeout;
                let key2 = key.clone();
                let fut = async move {
                    let started = Instant::now();
                    let result = async {
                        // A pull that finished between our presence check and
                        // this point has already done the work.
                        if skip_if_present && engine.inspect_image(&key2).await? {
                            return Ok((0, false));
                        }
                        match tokio::time::timeout(timeout, engine.pull(&reference)).await {
                            Ok(layers) => layers.map(|n| (n, true)),
                            Err(_) => Err(EngineError::PullTimeout {
                                image: key2.clone(),
                                seconds: timeout.as_secs(),
                            }),
                        }
                    }
                    .await;
                    map.lock().expect("pull map poisoned").remove(&key2);
                    result.map(|(layers, performed)| PullSummary {
                        image: key2,
                        layers,
                        duration_ms: started.elapsed().as_millis() as u64,
                        performed,
                    })
                }
                .boxed()
                .shared();
                in_flight.insert(key, fut.clone());
                fut
            }
        };
        fut.await
    }

    /// Runs one container to completion: create, start, wait (bounded by
    /// `spec.timeout_s`), collect logs, force-remove. Removal happens on every
    /// path, including timeouts, errors and cancellation of this future.
    pub async fn run_container(&self, spec: &ContainerSpec) -> Result<RunOutcome, EngineError> {
        spec.validate()?;
        let started = Instant::now();
        let id = self.engine.create_container(spec).await?;
        let mut guard = RemovalGuard {
            engine: Some(Arc::clone(&self.engine)),
            id: id.clone(),
        };
        let result = self.drive(&id, spec, started).await;
        guard.engine = None;
        let removed = self.engine.remove_container(&id).await;
        match (result, removed) {
            (Ok(outcome), Ok(())) => Ok(outcome),
            (Ok(_), Err(e)) => Err(e),
            (Err(e), removed) => {
                if let Err(r) = removed {
                    log::warn!("could not remove container {id}: {r}");
                }
                Err(e)
            }
        }
    }

    async fn drive(&self, id: &str, spec: &ContainerSpec, started: Instant) -> Result<RunOutcome, EngineError> {
        self.engine.start_container(id).await?;
        let limit = Duration::from_secs(spec.timeout_s);
        let (exit_code, timed_out) = match tokio::time::timeout(limit, self.engine.wait_container(id)).await {
            Ok(code) => (code?, false),
            Err(_) => (TIMEOUT_EXIT_CODE, true),
        };
        let (stdout, stderr) = match self.engine.container_logs(id).await {
            Ok(logs) => logs,
            Err(e) if timed_out => {
                log::warn!("could not collect logs of timed-out container {id}: {e}");
                Default::default()
            }
            Err(e) => return Err(e),
        };
        Ok(RunOutcome {
            exit_code,
            stdout,
            stderr,
            duration_ms: started.elapsed().as_millis() as u64,
            timed_out,
        })
    }

    /// Engine facts for the doctor. An unreachable engine yields
    /// `reachable == false` rather than an error.
    pub async fn engine_info(&self) -> EngineInfo {
        if let Err(e) = self.engine.ping().await {
            log::debug!("engine ping failed: {e}");
            return EngineInfo::unreachable();
        }
        match self.engine.info().await {
            Ok(info) => info,
            Err(e) => {
                log::debug!("engine info failed: {e}");
                EngineInfo::unreachable()
            }
        }
    }
}

/// Removes the container if the owning future is dropped before cleanup ran.
struct RemovalGuard {
    engine: Option<Arc<dyn Engine>>,
    id: String,
}

impl Drop for RemovalGuard {
    fn drop(&mut self) {
        let Some(engine) = self.engine.take() else { return };
        let id = std::mem::take(&mut self.id);
        match tokio::runtime::Handle::try_current() {
            Ok(handle) => {
                handle.spawn(async move {
                    if let Err(e) = engine.remove_container(&id).await {
                        log::warn!("could not remove abandoned container {id}: {e}");
                    }
                });
            }
            Err(_) => log::warn!("container {id} abandoned outside a runtime"),
        }
    }
}
