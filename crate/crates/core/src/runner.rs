//! End-to-end capsule runs: resolve, ensure image, write inputs, execute one
//! container for the whole batch, read and validate outputs, clean up.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::engine::{BindMount, ContainerSpec, EngineClient, EngineError, DEFAULT_TIMEOUT_S};
use crate::exchange::{self, ExchangeError, ExchangeSession, Record};
use crate::manifest::{render_command, CapsuleManifest};
use crate::registry::{resolve, CapsuleId, Registry, RegistryError};
use crate::tasks::{validate_input, validate_output, Violation};

/// Bytes of stderr kept in reports and errors.
pub const STDERR_TAIL_BYTES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PullPolicy {
    #[default]
    IfMissing,
    Always,
    Never,
}

impl FromStr for PullPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "if-missing" => Ok(PullPolicy::IfMissing),
            "always" => Ok(PullPolicy::Always),
            "never" => Ok(PullPolicy::Never),
            other => Err(format!(
                "unknown pull policy `{other}` (expected if-missing, always or never)"
            )),
        }
    }
}

impl fmt::Display for PullPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PullPolicy::IfMissing => "if-missing",
            PullPolicy::Always => "always",
            PullPolicy::Never => "never",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub timeout_s: u64,
    pub keep_scratch: bool,
    pub pull_policy: PullPolicy,
    pub validate_io: bool,
    /// Parent of the `runs/` scratch directories.
    pub workspace: PathBuf,
}

impl RunOptions {
    pub fn new(workspace: impl Into<PathBuf>) -> Self {
        Self {
            timeout_s: DEFAULT_TIMEOUT_S,
            keep_scratch: false,
            pull_policy: PullPolicy::IfMissing,
            validate_io: true,
            workspace: workspace.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Resolve,
    ValidateInput,
    Pull,
    ExchangeWrite,
    Container,
    ExchangeRead,
    ValidateOutput,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Resolve => "resolve",
            Phase::ValidateInput => "validate-input",
            Phase::Pull => "pull",
            Phase::ExchangeWrite => "exchange-write",
            Phase::Container => "container",
            Phase::ExchangeRead => "exchange-read",
            Phase::ValidateOutput => "validate-output",
        })
    }
}

/// Schema violations of one record in a batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordViolations {
    pub index: usize,
    pub violations: Vec<Violation>,
}

fn describe_violations(failures: &[RecordViolations]) -> String {
    failures
        .iter()
        .map(|f| {
            let v: Vec<String> = f.violations.iter().map(ToString::to_string).collect();
            format!("record {}: {}", f.index, v.join("; "))
        })
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("[resolve] {0}")]
    Resolve(#[from] RegistryError),
    #[error("[validate-input] empty batch: at least one record is required")]
    EmptyBatch,
    #[error(
        "[validate-input] input does not match the {task} schema: {}",
        describe_violations(failures)
    )]
    InputValidationFailed {
        task: String,
        failures: Vec<RecordViolations>,
    },
    #[error("[pull] image {image} is not present and the pull policy is `never`")]
    ImageUnavailable { image: String },
    #[error("[pull] {0}")]
    Pull(EngineError),
    #[error("[{phase}] {source}")]
    Exchange { phase: Phase, source: ExchangeError },
    #[error("[container] {0}")]
    Engine(EngineError),
    #[error("[container] capsule exited with code {exit_code}{}", tail_suffix(stderr_tail))]
    NonZeroExit { exit_code: i64, stderr_tail: String },
    #[error("[container] capsule did not finish within {timeout_s}s{}", tail_suffix(stderr_tail))]
    Timeout { timeout_s: u64, stderr_tail: String },
    #[error(
        "[validate-output] output does not match the {task} schema: {}",
        describe_violations(failures)
    )]
    OutputValidationFailed {
        task: String,
        failures: Vec<RecordViolations>,
    },
}

fn tail_suffix(tail: &str) -> String {
    if tail.trim().is_empty() {
        String::new()
    } else {
        format!("; stderr:\n{}", tail.trim_end())
    }
}

impl RunError {
    pub fn phase(&self) -> Phase {
        match self {
            RunError::Resolve(_) => Phase::Resolve,
            RunError::EmptyBatch | RunError::InputValidationFailed { .. } => Phase::ValidateInput,
            RunError::ImageUnavailable { .. } | RunError::Pull(_) => Phase::Pull,
            RunError::Exchange { phase, .. } => *phase,
            RunError::Engine(_) | RunError::NonZeroExit { .. } | RunError::Timeout { .. } => Phase::Container,
            RunError::OutputValidationFailed { .. } => Phase::ValidateOutput,
        }
    }

    /// Errors caused by the caller's request rather than the environment or
    /// the capsule.
    pub fn is_usage_error(&self) -> bool {
        matches!(
            self,
            RunError::Resolve(_) | RunError::EmptyBatch | RunError::InputValidationFailed { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhaseDurations {
    pub pull_ms: u64,
    pub exchange_write_ms: u64,
    pub container_ms: u64,
    pub exchange_read_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    /// `name@version` of the resolved capsule.
    pub capsule: String,
    pub image: String,
    pub exit_code: i64,
    pub pulled: bool,
    pub durations: PhaseDurations,
    pub records_in: usize,
    pub records_out: usize,
    pub scratch_path: Option<PathBuf>,
    pub stderr_tail: String,
}

fn tail(bytes: &[u8]) -> String {
    let start = bytes.len().saturating_sub(STDERR_TAIL_BYTES);
    String::from_utf8_lossy(&bytes[start..]).into_owned()
}

fn ms_since(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

fn check_all(records: &[Record], check: impl Fn(&Record) -> Vec<Violation>) -> Vec<RecordViolations> {
    records
        .iter()
        .enumerate()
        .filter_map(|(index, r)| {
            let violations = check(r);
            (!violations.is_empty()).then_some(RecordViolations { index, violations })
        })
        .collect()
}

/// Runs a batch through a capsule resolved from `registry`.
pub async fn run_capsule(
    client: &EngineClient,
    registry: &Registry,
    id: &CapsuleId,
    records: &[Record],
    options: &RunOptions,
) -> Result<(Vec<Record>, RunReport), RunError> {
    let manifest = resolve(registry, id)?;
    run_manifest(client, manifest, records, options).await
}

/// Single-record convenience over [`run_capsule`].
pub async fn run_single(
    client: &EngineClient,
    registry: &Registry,
    id: &CapsuleId,
    record: Record,
    options: &RunOptions,
) -> Result<(Record, RunReport), RunError> {
    let (mut outputs, report) = run_capsule(client, registry, id, &[record], options).await?;
    let output = outputs.pop().expect("one output per input");
    Ok((output, report))
}

/// Runs a batch through an already-resolved manifest.
pub async fn run_manifest(
    client: &EngineClient,
    manifest: &CapsuleManifest,
    records: &[Record],
    options: &RunOptions,
) -> Result<(Vec<Record>, RunReport), RunError> {
    if records.is_empty() {
        return Err(RunError::EmptyBatch);
    }
    if options.validate_io {
        let failures = check_all(records, |r| validate_input(manifest.task, r));
        if !failures.is_empty() {
            return Err(RunError::InputValidationFailed {
                task: manifest.task.to_string(),
                failures,
            });
        }
    }

    let image = manifest.image.canonical();
    let mut durations = PhaseDurations::default();

    let t = Instant::now();
    let pulled = ensure_image(client, &image, options.pull_policy).await?;
    durations.pull_ms = ms_since(t);

    let session = exchange::open_session(&options.workspace).map_err(|source| RunError::Exchange {
        phase: Phase::ExchangeWrite,
        source,
    })?;
    let result = execute(client, manifest, &session, records, options, &mut durations).await;
    exchange::close_session(&session, options.keep_scratch);

    let (outputs, outcome_exit, stderr_tail) = result?;
    let report = RunReport {
        capsule: manifest.id(),
        image,
        exit_code: outcome_exit,
        pulled,
        durations,
        records_in: records.len(),
        records_out: outputs.len(),
        scratch_path: options.keep_scratch.then(|| session.host_dir().to_path_buf()),
        stderr_tail,
    };
    Ok((outputs, report))
}

async fn ensure_image(client: &EngineClient, image: &str, policy: PullPolicy) -> Result<bool, RunError> {
    match policy {
        PullPolicy::IfMissing => client
            .ensure_image(image)
            .await
            .map(|s| s.is_some_and(|s| s.performed))
            .map_err(RunError::Pull),
        PullPolicy::Always => client.pull_image(image).await.map(|_| true).map_err(RunError::Pull),
        PullPolicy::Never => match client.image_present(image).await {
            Ok(true) => Ok(false),
            Ok(false) => Err(RunError::ImageUnavailable { image: image.into() }),
            Err(e) => Err(RunError::Pull(e)),
        },
    }
}

async fn execute(
    client: &EngineClient,
    manifest: &CapsuleManifest,
    session: &ExchangeSession,
    records: &[Record],
    options: &RunOptions,
    durations: &mut PhaseDurations,
) -> Result<(Vec<Record>, i64, String), RunError> {
    let t = Instant::now();
    exchange::write_inputs(session, records).map_err(|source| RunError::Exchange {
        phase: Phase::ExchangeWrite,
        source,
    })?;
    durations.exchange_write_ms = ms_since(t);

    let argv = render_command(
        &manifest.command,
        &session.guest_input(),
        &session.guest_output(),
        session.guest_dir(),
    );
    let spec = ContainerSpec {
        image: manifest.image.canonical(),
        argv,
        bind: BindMount::exchange(session.host_dir()),
        memory_limit_bytes: manifest.resources.memory_mb * 1024 * 1024,
        gpu: manifest.resources.gpu,
        timeout_s: options.timeout_s,
    };
    let t = Instant::now();
    let outcome = client.run_container(&spec).await.map_err(RunError::Engine)?;
    durations.container_ms = ms_since(t);
    let stderr_tail = tail(&outcome.stderr);
    if outcome.timed_out {
        return Err(RunError::Timeout {
            timeout_s: options.timeout_s,
            stderr_tail,
        });
    }
    if outcome.exit_code != 0 {
        return Err(RunError::NonZeroExit {
            exit_code: outcome.exit_code,
            stderr_tail,
        });
    }

    let t = Instant::now();
    let outputs = exchange::read_outputs(session, records.len()).map_err(|source| RunError::Exchange {
        phase: Phase::ExchangeRead,
        source,
    })?;
    durations.exchange_read_ms = ms_since(t);

    if options.validate_io {
        let failures = check_all(&outputs, |r| validate_output(manifest.task, r));
        if !failures.is_empty() {
            return Err(RunError::OutputValidationFailed {
                task: manifest.task.to_string(),
                failures,
            });
        }
    }
    Ok((outputs, outcome.exit_code, stderr_tail))
}

/// Scratch directories currently present under `workspace/runs`.
pub fn scratch_dirs(workspace: &Path) -> Vec<PathBuf> {
    std::fs::read_dir(workspace.join("runs"))
        .map(|entries| entries.filter_map(|e| e.ok().map(|e| e.path())).collect())
        .unwrap_or_default()
}
