//! In-process stand-in for a container engine.
//!
//! Images are record transforms. A started container reads
//! `<bind host>/input.jsonl`, applies its image's transform to every record
//! and writes `<bind host>/output.jsonl`, then exits with the image's
//! configured exit code. The container's argv is recorded but not
//! interpreted: fake images behave like capsules that follow the exchange
//! file-name constants.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use async_trait::async_trait;
use serde_json::Value;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use super::{ContainerSpec, Engine, EngineError, EngineInfo, DEFAULT_API_VERSION};
use crate::exchange::{decode_jsonl, encode_jsonl, Record, INPUT_NAME, OUTPUT_NAME};
use crate::manifest::ImageRef;

/// Maps (zero-based line index, input record) to an output record.
pub type RecordTransform = Arc<dyn Fn(usize, &Record) -> Record + Send + Sync>;

#[derive(Clone)]
pub struct FakeImage {
    transform: RecordTransform,
    exit_code: i64,
    delay: Duration,
    stdout: Vec<u8>,
    stderr: Vec<u8>,
    write_output: bool,
    layers: usize,
}

impl std::fmt::Debug for FakeImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FakeImage")
            .field("exit_code", &self.exit_code)
            .field("delay", &self.delay)
            .field("write_output", &self.write_output)
            .finish_non_exhaustive()
    }
}

impl FakeImage {
    pub fn new(transform: impl Fn(usize, &Record) -> Record + Send + Sync + 'static) -> Self {
        Self {
            transform: Arc::new(transform),
            exit_code: 0,
            delay: Duration::ZERO,
            stdout: Vec::new(),
            stderr: Vec::new(),
            write_output: true,
            layers: 3,
        }
    }

    pub fn identity() -> Self {
        Self::new(|_, r| r.clone())
    }

    /// Upper-cases every string value, recursively. Keys are unchanged.
    pub fn uppercase() -> Self {
        Self::new(|_, r| map_strings(r, |s| s.to_uppercase()))
    }

    /// Adds `"line": <index>` to every record.
    pub fn line_number() -> Self {
        Self::new(|i, r| {
            let mut out = r.clone();
            out.insert("line", i);
            out
        })
    }

    pub fn with_exit_code(mut self, code: i64) -> Self {
        self.exit_code = code;
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn with_stdout(mut self, text: impl Into<Vec<u8>>) -> Self {
        self.stdout = text.into();
        self
    }

    pub fn with_stderr(mut self, text: impl Into<Vec<u8>>) -> Self {
        self.stderr = text.into();
        self
    }

    /// The container exits without writing `output.jsonl`.
    pub fn without_output(mut self) -> Self {
        self.write_output = false;
        self
    }

    pub fn with_layers(mut self, layers: usize) -> Self {
        self.layers = layers;
        self
    }
}

/// Applies `f` to every string value inside `record`.
pub fn map_strings(record: &Record, f: impl Fn(&str) -> String + Copy) -> Record {
    fn walk(v: &Value, f: impl Fn(&str) -> String + Copy) -> Value {
        match v {
            Value::String(s) => Value::String(f(s)),
            Value::Array(items) => Value::Array(items.iter().map(|i| walk(i, f)).collect()),
            Value::Object(map) => Value::Object(map.iter().map(|(k, v)| (k.clone(), walk(v, f))).collect()),
            other => other.clone(),
        }
    }
    Record::from_value(walk(&record.to_value(), f)).expect("object maps to object")
}

/// A create-container request as the fake saw it.
#[derive(Debug, Clone)]
pub struct CreatedContainer {
    pub id: String,
    pub spec: ContainerSpec,
}

struct Container {
    image: FakeImage,
    spec: ContainerSpec,
    exit: watch::Receiver<Option<i64>>,
    exit_tx: Option<watch::Sender<Option<i64>>>,
    task: Option<JoinHandle<()>>,
    logs: Arc<Mutex<(Vec<u8>, Vec<u8>)>>,
}

struct State {
    local: HashMap<String, FakeImage>,
    remote: HashMap<String, FakeImage>,
    containers: HashMap<String, Container>,
    created: Vec<CreatedContainer>,
    next_id: u64,
    reachable: bool,
    engine_version: String,
    api_version: String,
    runtimes: BTreeSet<String>,
    inspect_failure: Option<(u16, String)>,
    pull_delay: Duration,
}

/// In-process fake engine. Cheap to clone via `Arc`; all methods take `&self`.
pub struct FakeEngine {
    state: Mutex<State>,
    pulls: AtomicUsize,
    creates: AtomicUsize,
}

impl Default for FakeEngine {
    fn default() -> Self {
        Self::new()
    }
}

fn key(image: &str) -> String {
    image
        .parse::<ImageRef>()
        .map(|r| r.canonical())
        .unwrap_or_else(|_| image.to_string())
}

impl FakeEngine {
    pub fn new() -> Self {
        Self {
            state: Mutex::new(State {
                local: HashMap::new(),
                remote: HashMap::new(),
                containers: HashMap::new(),
                created: Vec::new(),
                next_id: 1,
                reachable: true,
                engine_version: "24.0".into(),
                api_version: DEFAULT_API_VERSION.trim_start_matches('v').into(),
                runtimes: ["runc".to_string()].into(),
                inspect_failure: None,
                pull_delay: Duration::ZERO,
            }),
            pulls: AtomicUsize::new(0),
            creates: AtomicUsize::new(0),
        }
    }

    fn state(&self) -> MutexGuard<'_, State> {
        self.state.lock().expect("fake engine state poisoned")
    }

    /// Makes `image` present locally.
    pub fn install(&self, image: &str, behaviour: FakeImage) {
        self.state().local.insert(key(image), behaviour);
    }

    /// Makes `image` available for pulling.
    pub fn publish(&self, image: &str, behaviour: FakeImage) {
        self.state().remote.insert(key(image), behaviour);
    }

    /// Drops a locally present image.
    pub fn evict(&self, image: &str) {
        self.state().local.remove(&key(image));
    }

    pub fn set_reachable(&self, reachable: bool) {
        self.state().reachable = reachable;
    }

    pub fn set_runtimes<I, S>(&self, runtimes: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.state().runtimes = runtimes.into_iter().map(Into::into).collect();
    }

    pub fn set_engine_version(&self, version: &str) {
        self.state().engine_version = version.into();
    }

    pub fn set_api_version(&self, version: &str) {
        self.state().api_version = version.into();
    }

    pub fn set_pull_delay(&self, delay: Duration) {
        self.state().pull_delay = delay;
    }

    /// Image inspection fails with this HTTP status from now on.
    pub fn fail_inspect(&self, status: u16, body: &str) {
        self.state().inspect_failure = Some((status, body.into()));
    }

    pub fn pull_count(&self) -> usize {
        self.pulls.load(Ordering::SeqCst)
    }

    pub fn create_count(&self) -> usize {
        self.creates.load(Ordering::SeqCst)
    }

    /// Containers created and not yet removed.
    pub fn live_containers(&self) -> usize {
        self.state().containers.len()
    }

    pub fn created(&self) -> Vec<CreatedContainer> {
        self.state().created.clone()
    }

    fn check_reachable(&self) -> Result<(), EngineError> {
        if self.state().reachable {
            Ok(())
        } else {
            Err(EngineError::Unreachable {
                endpoint: self.describe(),
                reason: "fake engine is down".into(),
            })
        }
    }
}

fn execute(image: &FakeImage, spec: &ContainerSpec) -> (i64, Vec<u8>, Vec<u8>) {
    let mut stdout = image.stdout.clone();
    let mut stderr = image.stderr.clone();
    let input = spec.bind.host.join(INPUT_NAME);
    let text = match fs::read_to_string(&input) {
        Ok(t) => t,
        Err(e) => {
            stderr.extend_from_slice(format!("cannot read {}: {e}\n", input.display()).as_bytes());
            return (1, stdout, stderr);
        }
    };
    let records = match decode_jsonl(&text) {
        Ok(r) => r,
        Err(e) => {
            stderr.extend_from_slice(format!("bad input: {e}\n").as_bytes());
            return (1, stdout, stderr);
        }
    };
    if image.write_output {
        let out: Vec<Record> = records
            .iter()
            .enumerate()
            .map(|(i, r)| (image.transform)(i, r))
            .collect();
        if let Err(e) = fs::write(spec.bind.host.join(OUTPUT_NAME), encode_jsonl(&out)) {
            stderr.extend_from_slice(format!("cannot write output: {e}\n").as_bytes());
            return (1, stdout, stderr);
        }
    }
    stdout.extend_from_slice(format!("processed {} records\n", records.len()).as_bytes());
    (image.exit_code, stdout, stderr)
}

#[async_trait]
impl Engine for FakeEngine {
    fn describe(&self) -> String {
        "fake://in-process".into()
    }

    async fn ping(&self) -> Result<(), EngineError> {
        self.check_reachable()
    }

    async fn info(&self) -> Result<EngineInfo, EngineError> {
        self.check_reachable()?;
        let s = self.state();
        Ok(EngineInfo {
            engine_version: s.engine_version.clone(),
            api_version: s.api_version.clone(),
            runtimes: s.runtimes.clone(),
            reachable: true,
        })
    }

    async fn inspect_image(&self, image: &str) -> Result<bool, EngineError> {
        self.check_reachable()?;
        let s = self.state();
        if let Some((status, body)) = &s.inspect_failure {
            return Err(EngineError::Api {
                request: format!("GET /images/{image}/json"),
                status: *status,
                body: body.clone(),
            });
        }
        Ok(s.local.contains_key(&key(image)))
    }

    async fn pull(&self, image: &ImageRef) -> Result<usize, EngineError> {
        self.check_reachable()?;
        self.pulls.fetch_add(1, Ordering::SeqCst);
        let delay = self.state().pull_delay;
        if !delay.is_zero() {
            tokio::time::sleep(delay).await;
        }
        let canonical = image.canonical();
        let mut s = self.state();
        let found = s.remote.get(&canonical).cloned();
        match found {
            Some(behaviour) => {
                let layers = behaviour.layers;
                s.local.insert(canonical, behaviour);
                Ok(layers)
            }
            None => Err(EngineError::ImageNotFound { image: canonical }),
        }
    }

    async fn create_container(&self, spec: &ContainerSpec) -> Result<String, EngineError> {
        self.check_reachable()?;
        let mut s = self.state();
        let image = s
            .local
            .get(&key(&spec.image))
            .cloned()
            .ok_or_else(|| EngineError::Api {
                request: "POST /containers/create".into(),
                status: 404,
                body: format!("No such image: {}", spec.image),
            })?;
        let id = format!("fake{:012x}", s.next_id);
        s.next_id += 1;
        let (tx, rx) = watch::channel(None);
        s.containers.insert(
            id.clone(),
            Container {
                image,
                spec: spec.clone(),
                exit: rx,
                exit_tx: Some(tx),
                task: None,
                logs: Arc::default(),
            },
        );
        s.created.push(CreatedContainer {
            id: id.clone(),
            spec: spec.clone(),
        });
        self.creates.fetch_add(1, Ordering::SeqCst);
        Ok(id)
    }

    async fn start_container(&self, id: &str) -> Result<(), EngineError> {
        self.check_reachable()?;
        let mut s = self.state();
        let c = s
            .containers
            .get_mut(id)
            .ok_or_else(|| EngineError::NoSuchContainer(id.into()))?;
        let tx = c.exit_tx.take().ok_or_else(|| EngineError::Api {
            request: format!("POST /containers/{id}/start"),
            status: 304,
            body: "container already started".into(),
        })?;
        let image = c.image.clone();
        let spec = c.spec.clone();
        let logs = Arc::clone(&c.logs);
        c.task = Some(tokio::spawn(async move {
            if !image.delay.is_zero() {
                tokio::time::sleep(image.delay).await;
            }
            let (code, stdout, stderr) = execute(&image, &spec);
            *logs.lock().expect("logs poisoned") = (stdout, stderr);
            let _ = tx.send(Some(code));
        }));
        Ok(())
    }

    async fn wait_container(&self, id: &str) -> Result<i64, EngineError> {
        self.check_reachable()?;
        let mut rx = {
            let s = self.state();
            s.containers
                .get(id)
                .ok_or_else(|| EngineError::NoSuchContainer(id.into()))?
                .exit
                .clone()
        };
        let code = rx
            .wait_for(Option::is_some)
            .await
            .map_err(|_| EngineError::NoSuchContainer(id.into()))?;
        Ok(code.expect("wait_for guarantees Some"))
    }

    async fn container_logs(&self, id: &str) -> Result<(Vec<u8>, Vec<u8>), EngineError> {
        self.check_reachable()?;
        let s = self.state();
        let c = s
            .containers
            .get(id)
            .ok_or_else(|| EngineError::NoSuchContainer(id.into()))?;
        let logs = c.logs.lock().expect("logs poisoned").clone();
        Ok(logs)
    }

    async fn remove_container(&self, id: &str) -> Result<(), EngineError> {
        // Removal is allowed while "down" so cleanup paths stay testable.
        if let Some(c) = self.state().containers.remove(id) {
            if let Some(task) = c.task {
                task.abort();
            }
        }
        Ok(())
    }
}
