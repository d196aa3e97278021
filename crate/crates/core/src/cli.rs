//! The `repro` command line.
//!
//! Exit codes are a stable contract:
//!
//! | code | meaning                                         |
//! |------|-------------------------------------------------|
//! | 0    | success                                         |
//! | 1    | runtime failure (engine, container, exchange)   |
//! | 2    | usage or validation error                       |
//! | 3    | verification failed                             |
//! | 4    | environment incompatible                        |

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use crate::engine::{DockerEngine, Engine, EngineClient, EngineEndpoint, EngineError};
use crate::exchange::{self, default_workspace, to_canonical_json, to_canonical_string, Record};
use crate::manifest::CapsuleManifest;
use crate::registry::{self, default_registry_root, list_capsules, load_registry, CapsuleId, Registry, RegistryError};
use crate::runner::{run_manifest, PullPolicy, RunError, RunOptions, RunReport};
use crate::tasks::TaskKind;
use crate::verify::{check_environment, verify_capsule, DoctorReport, VerificationReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(i32)]
pub enum ExitCode {
    Success = 0,
    Runtime = 1,
    Usage = 2,
    VerificationFailed = 3,
    Incompatible = 4,
}

impl ExitCode {
    pub fn code(self) -> i32 {
        self as i32
    }
}

/// Builds an engine for an optional `--engine` value. The binary uses
/// [`docker_engine_factory`]; tests plug in a fake.
pub type EngineFactory = Arc<dyn Fn(Option<&str>) -> Result<Arc<dyn Engine>, EngineError> + Send + Sync>;

pub fn docker_engine_factory() -> EngineFactory {
    Arc::new(|explicit| {
        let endpoint = EngineEndpoint::resolve(explicit)?;
        Ok(Arc::new(DockerEngine::new(endpoint)) as Arc<dyn Engine>)
    })
}

#[derive(Debug, Parser)]
#[command(
    name = "repro",
    version,
    about = "Run containerized research code through capsule manifests"
)]
struct Cli {
    /// Capsule registry directory (default: $REPRO_REGISTRY, then ./capsules)
    #[arg(long, global = true, value_name = "DIR")]
    registry: Option<PathBuf>,
    /// Scratch workspace (default: $REPRO_WORKSPACE, then ~/.repro)
    #[arg(long, global = true, value_name = "DIR")]
    workspace: Option<PathBuf>,
    /// Engine endpoint, e.g. unix:///var/run/docker.sock or tcp://host:2375
    #[arg(long, global = true, value_name = "ENDPOINT")]
    engine: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// List the latest version of every capsule
    List {
        #[arg(long, value_parser = parse_task)]
        task: Option<TaskKind>,
        #[arg(long)]
        json: bool,
    },
    /// Run a capsule on a JSONL input file and write JSONL output
    Run {
        capsule: CapsuleId,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Seconds before the container is killed
        #[arg(long, default_value_t = crate::engine::DEFAULT_TIMEOUT_S, value_parser = clap::value_parser!(u64).range(1..))]
        timeout: u64,
        #[arg(long)]
        keep_scratch: bool,
        #[arg(long, default_value = "if-missing", value_parser = parse_pull_policy)]
        pull: PullPolicy,
    },
    /// Pull a capsule's image
    Pull { capsule: CapsuleId },
    /// Replay a capsule's bundled examples and compare outputs
    Verify {
        capsule: CapsuleId,
        /// Override every example's numeric tolerance
        #[arg(long, value_parser = parse_tolerance)]
        tolerance: Option<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Check the engine, optionally against a capsule's requirements
    Doctor {
        capsule: Option<CapsuleId>,
        #[arg(long)]
        json: bool,
    },
    /// Show a capsule's manifest
    Info {
        capsule: CapsuleId,
        #[arg(long)]
        json: bool,
    },
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse::<TaskKind>().map_err(|e| e.to_string())
}

fn parse_pull_policy(s: &str) -> Result<PullPolicy, String> {
    s.parse()
}

fn parse_tolerance(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(t) if t.is_finite() && t >= 0.0 => Ok(t),
        _ => Err(format!("`{s}` is not a non-negative number")),
    }
}

/// What a command needs besides its arguments.
pub struct CliContext {
    pub engine_factory: EngineFactory,
}

impl CliContext {
    pub fn new(engine_factory: EngineFactory) -> Self {
        Self { engine_factory }
    }
}

/// Outcome of a command: exit code, with a message for stderr when failing.
struct Failure {
    code: ExitCode,
    message: String,
}

impl Failure {
    fn new(code: ExitCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

type CmdResult = Result<ExitCode, Failure>;

fn registry_failure(e: RegistryError) -> Failure {
    let code = match e {
        RegistryError::UnknownCapsule { .. } | RegistryError::UnknownVersion { .. } => ExitCode::Usage,
        _ => ExitCode::Runtime,
    };
    Failure::new(code, e.to_string())
}

fn run_error_failure(e: RunError) -> Failure {
    let code = if e.is_usage_error() {
        ExitCode::Usage
    } else {
        ExitCode::Runtime
    };
    Failure::new(code, e.to_string())
}

struct Session<'a> {
    cli: &'a Cli,
    ctx: &'a CliContext,
    runtime: tokio::runtime::Runtime,
}

impl Session<'_> {
    fn registry(&self) -> Result<Registry, Failure> {
        let root = default_registry_root(self.cli.registry.as_deref());
        load_registry(&root).map_err(|e| Failure::new(ExitCode::Runtime, e.to_string()))
    }

    fn workspace(&self) -> PathBuf {
        default_workspace(self.cli.workspace.as_deref())
    }

    fn client(&self) -> Result<EngineClient, Failure> {
        let engine = (self.ctx.engine_factory)(self.cli.engine.as_deref()).map_err(|e| {
            let code = match e {
                EngineError::InvalidEndpoint(_) => ExitCode::Usage,
                _ => ExitCode::Runtime,
            };
            Failure::new(code, e.to_string())
        })?;
        Ok(EngineClient::new(engine))
    }

    /// A client whose engine answered a ping.
    fn connected_client(&self) -> Result<EngineClient, Failure> {
        let client = self.client()?;
        self.runtime
            .block_on(client.engine().ping())
            .map_err(|e| Failure::new(ExitCode::Runtime, e.to_string()))?;
        Ok(client)
    }
}

/// Runs one `repro` invocation and returns its exit code.
pub fn run_cli<I, T>(args: I, ctx: &CliContext, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(stderr, "{rendered}");
                ExitCode::Usage.code()
            } else {
                let _ = write!(stdout, "{rendered}");
                ExitCode::Success.code()
            };
        }
    };
    let runtime = match tokio::runtime::Builder::new_current_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            let _ = writeln!(stderr, "error: could not start async runtime: {e}");
            return ExitCode::Runtime.code();
        }
    };
    let session = Session {
        cli: &cli,
        ctx,
        runtime,
    };
    let result = match &cli.command {
        Command::List { task, json } => cmd_list(&session, *task, *json, stdout),
        Command::Run {
            capsule,
            input,
            output,
            timeout,
            keep_scratch,
            pull,
        } => {
            let mut options = RunOptions::new(session.workspace());
            options.timeout_s = *timeout;
            options.keep_scratch = *keep_scratch;
            options.pull_policy = *pull;
            cmd_run(&session, capsule, input, output, &options, stderr)
        }
        Command::Pull { capsule } => cmd_pull(&session, capsule, stdout),
        Command::Verify {
            capsule,
            tolerance,
            json,
        } => cmd_verify(&session, capsule, *tolerance, *json, stdout),
        Command::Doctor { capsule, json } => cmd_doctor(&session, capsule.as_ref(), *json, stdout),
        Command::Info { capsule, json } => cmd_info(&session, capsule, *json, stdout),
    };
    match result {
        Ok(code) => code.code(),
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code.code()
        }
    }
}

fn io_failure(e: std::io::Error) -> Failure {
    Failure::new(ExitCode::Runtime, format!("write failed: {e}"))
}

fn json_failure(e: serde_json::Error) -> Failure {
    Failure::new(ExitCode::Runtime, format!("could not encode JSON: {e}"))
}

fn cmd_list(s: &Session<'_>, task: Option<TaskKind>, json: bool, out: &mut dyn Write) -> CmdResult {
    let registry = s.registry()?;
    let capsules = list_capsules(&registry, task);
    if json {
        let docs: Vec<_> = capsules.iter().map(|m| m.to_json_value()).collect();
        writeln!(out, "{}", to_canonical_string(&serde_json::Value::Array(docs))).map_err(io_failure)?;
        return Ok(ExitCode::Success);
    }
    let rows: Vec<[String; 4]> = capsules
        .iter()
        .map(|m| {
            [
                m.name.clone(),
                m.version.to_string(),
                m.task.to_string(),
                m.image.canonical(),
            ]
        })
        .collect();
    let header = ["NAME", "VERSION", "TASK", "IMAGE"].map(String::from);
    let widths: Vec<usize> = (0..4)
        .map(|i| {
            rows.iter()
                .chain(std::iter::once(&header))
                .map(|r| r[i].len())
                .max()
                .unwrap_or(0)
        })
        .collect();
    for row in std::iter::once(&header).chain(&rows) {
        let line = format!(
            "{:w0$}  {:w1$}  {:w2$}  {}",
            row[0],
            row[1],
            row[2],
            row[3],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2]
        );
        writeln!(out, "{}", line.trim_end()).map_err(io_failure)?;
    }
    Ok(ExitCode::Success)
}

fn read_input_file(path: &Path) -> Result<Vec<Record>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Failure::new(
            ExitCode::Usage,
            format!("cannot read input file {}: {e}", path.display()),
        )
    })?;
    let records = exchange::decode_jsonl(&text)
        .map_err(|e| Failure::new(ExitCode::Usage, format!("input file {}: {e}", path.display())))?;
    if records.is_empty() {
        return Err(Failure::new(
            ExitCode::Usage,
            format!("input file {} contains no records", path.display()),
        ));
    }
    Ok(records)
}

fn summarize_report(r: &RunReport) -> String {
    let d = &r.durations;
    let mut s = format!(
        "ran {} ({}) exit {}: {} records in, {} out; pull {}ms{}, write {}ms, container {}ms, read {}ms",
        r.capsule,
        r.image,
        r.exit_code,
        r.records_in,
        r.records_out,
        d.pull_ms,
        if r.pulled { " (pulled)" } else { "" },
        d.exchange_write_ms,
        d.container_ms,
        d.exchange_read_ms
    );
    if let Some(p) = &r.scratch_path {
        s.push_str(&format!("\nscratch kept at {}", p.display()));
    }
    s
}

fn cmd_run(
    s: &Session<'_>,
    id: &CapsuleId,
    input: &Path,
    output: &Path,
    options: &RunOptions,
    err: &mut dyn Write,
) -> CmdResult {
    let records = read_input_file(input)?;
    let registry = s.registry()?;
    let manifest = registry::resolve(&registry, id).map_err(registry_failure)?;
    let client = s.connected_client()?;
    let (outputs, report) = s
        .runtime
        .block_on(run_manifest(&client, manifest, &records, options))
        .map_err(run_error_failure)?;
    std::fs::write(output, exchange::encode_jsonl(&outputs)).map_err(|e| {
        Failure::new(
            ExitCode::Runtime,
            format!("cannot write output file {}: {e}", output.display()),
        )
    })?;
    writeln!(err, "{}", summarize_report(&report)).map_err(io_failure)?;
    Ok(ExitCode::Success)
}

fn cmd_pull(s: &Session<'_>, id: &CapsuleId, out: &mut dyn Write) -> CmdResult {
    let registry = s.registry()?;
    let manifest = registry::resolve(&registry, id).map_err(registry_failure)?;
    let image = manifest.image.canonical();
    let client = s.connected_client()?;
    let runtime_failure = |e: EngineError| Failure::new(ExitCode::Runtime, e.to_string());
    if s.runtime
        .block_on(client.image_present(&image))
        .map_err(runtime_failure)?
    {
        writeln!(out, "{image}: up to date").map_err(io_failure)?;
        return Ok(ExitCode::Success);
    }
    let summary = s.runtime.block_on(client.pull_image(&image)).map_err(runtime_failure)?;
    writeln!(
        out,
        "{image}: pulled {} layers in {}ms",
        summary.layers, summary.duration_ms
    )
    .map_err(io_failure)?;
    Ok(ExitCode::Success)
}

fn render_value(v: &Option<serde_json::Value>) -> String {
    match v {
        Some(v) => to_canonical_string(v),
        None => "<absent>".into(),
    }
}

fn cmd_verify(s: &Session<'_>, id: &CapsuleId, tolerance: Option<f64>, json: bool, out: &mut dyn Write) -> CmdResult {
    let registry = s.registry()?;
    let manifest = registry::resolve(&registry, id).map_err(registry_failure)?;
    let client = if manifest.examples.is_empty() {
        s.client()?
    } else {
        s.connected_client()?
    };
    let options = RunOptions::new(s.workspace());
    let report = s
        .runtime
        .block_on(verify_capsule(&client, &registry, id, tolerance, &options))
        .map_err(registry_failure)?;
    if json {
        writeln!(out, "{}", to_canonical_json(&report).map_err(json_failure)?).map_err(io_failure)?;
    } else {
        render_verification(&report, out).map_err(io_failure)?;
    }
    Ok(if report.run_error.is_some() {
        ExitCode::Runtime
    } else if report.passed {
        ExitCode::Success
    } else {
        ExitCode::VerificationFailed
    })
}

fn render_verification(report: &VerificationReport, out: &mut dyn Write) -> std::io::Result<()> {
    if report.skipped {
        return writeln!(out, "{}: skipped (no examples)", report.capsule);
    }
    writeln!(
        out,
        "{}: {}",
        report.capsule,
        if report.passed { "passed" } else { "FAILED" }
    )?;
    for case in &report.cases {
        writeln!(out, "  {} example {}", if case.passed { "✓" } else { "✗" }, case.index)?;
        for m in &case.mismatches {
            writeln!(
                out,
                "      at {}: expected {}, got {}",
                m.path,
                render_value(&m.expected),
                render_value(&m.actual)
            )?;
        }
    }
    if let Some(e) = &report.run_error {
        writeln!(out, "  run failed: {e}")?;
    }
    Ok(())
}

fn cmd_doctor(s: &Session<'_>, id: Option<&CapsuleId>, json: bool, out: &mut dyn Write) -> CmdResult {
    let registry = match id {
        Some(_) => s.registry()?,
        None => Registry::from_manifests(PathBuf::new(), Vec::new()).expect("empty registry"),
    };
    let client = s.client()?;
    let report = s
        .runtime
        .block_on(check_environment(&client, id, &registry))
        .map_err(registry_failure)?;
    if json {
        writeln!(out, "{}", to_canonical_json(&report).map_err(json_failure)?).map_err(io_failure)?;
    } else {
        render_doctor(&report, out).map_err(io_failure)?;
    }
    Ok(if !report.engine.reachable {
        ExitCode::Runtime
    } else if report.all_passed() {
        ExitCode::Success
    } else {
        ExitCode::Incompatible
    })
}

fn render_doctor(report: &DoctorReport, out: &mut dyn Write) -> std::io::Result<()> {
    let e = &report.engine;
    writeln!(out, "reachable: {}", e.reachable)?;
    if e.reachable {
        writeln!(out, "engine version: {}", e.engine_version)?;
        writeln!(out, "api version: {}", e.api_version)?;
        let runtimes: Vec<&str> = e.runtimes.iter().map(String::as_str).collect();
        writeln!(out, "runtimes: {}", runtimes.join(", "))?;
    }
    for c in &report.checks {
        writeln!(
            out,
            "[{}] {}: {}",
            if c.passed { "ok" } else { "FAIL" },
            c.name,
            c.detail
        )?;
    }
    if let (Some(name), Some(c)) = (&report.capsule, &report.capsule_compat) {
        writeln!(
            out,
            "[{}] {name}: gpu required={}, gpu available={}",
            if c.compatible { "ok" } else { "FAIL" },
            c.gpu_required,
            c.gpu_available
        )?;
    }
    Ok(())
}

fn cmd_info(s: &Session<'_>, id: &CapsuleId, json: bool, out: &mut dyn Write) -> CmdResult {
    let registry = s.registry()?;
    let manifest = registry::resolve(&registry, id).map_err(registry_failure)?;
    if json {
        writeln!(out, "{}", manifest.to_canonical_json()).map_err(io_failure)?;
    } else {
        render_info(manifest, &registry, out).map_err(io_failure)?;
    }
    Ok(ExitCode::Success)
}

fn render_info(m: &CapsuleManifest, registry: &Registry, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "name:      {}", m.name)?;
    writeln!(out, "version:   {}", m.version)?;
    if let Some(versions) = registry.versions(&m.name) {
        let all: Vec<String> = versions.iter().map(|v| v.version.to_string()).collect();
        writeln!(out, "versions:  {}", all.join(", "))?;
    }
    writeln!(out, "paper:     {} ({})", m.paper.title, m.paper.year)?;
    if let Some(url) = &m.paper.url {
        writeln!(out, "url:       {url}")?;
    }
    writeln!(out, "image:     {}", m.image.canonical())?;
    writeln!(out, "task:      {}", m.task)?;
    writeln!(
        out,
        "command:   {}",
        to_canonical_string(&serde_json::json!(m.command.tokens()))
    )?;
    writeln!(
        out,
        "resources: gpu={}, memory={} MB",
        m.resources.gpu, m.resources.memory_mb
    )?;
    writeln!(out, "examples:  {}", m.examples.len())
}
