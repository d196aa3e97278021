//! Host/container data exchange through a bind-mounted scratch directory.
//!
//! Each run gets a session directory `<workspace>/runs/<run_id>/`. The host
//! writes `input.jsonl` there, the directory is mounted at `/repro` inside the
//! container, and the capsule writes `output.jsonl` next to it, one output
//! line per input line, in input order.

mod record;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

pub(crate) use record::json_type_name;
pub use record::{to_canonical_json, to_canonical_string, NotAnObject, Record, RecordParseError};

pub const INPUT_NAME: &str = "input.jsonl";
pub const OUTPUT_NAME: &str = "output.jsonl";
pub const GUEST_DIR: &str = "/repro";

/// Environment variable naming the workspace directory.
pub const WORKSPACE_ENV: &str = "REPRO_WORKSPACE";

#[derive(Debug, thiserror::Error)]
pub enum ExchangeError {
    #[error("workspace {path} is not writable: {source}")]
    WorkspaceUnwritable { path: PathBuf, source: io::Error },
    #[error("refusing to write an empty batch")]
    EmptyBatch,
    #[error("could not write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(
        "capsule wrote no output file (expected {GUEST_DIR}/{OUTPUT_NAME} inside the container, {path} on the host)"
    )]
    OutputMissing { path: PathBuf },
    #[error("output has {actual} records but {expected} were expected")]
    CountMismatch { actual: usize, expected: usize },
    #[error("malformed output line {line}: {reason} (near `{snippet}`)")]
    MalformedOutputLine {
        line: usize,
        snippet: String,
        reason: String,
    },
}

/// One run's scratch directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExchangeSession {
    host_dir: PathBuf,
    run_id: String,
}

impl ExchangeSession {
    pub fn host_dir(&self) -> &Path {
        &self.host_dir
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn input_path(&self) -> PathBuf {
        self.host_dir.join(INPUT_NAME)
    }

    pub fn output_path(&self) -> PathBuf {
        self.host_dir.join(OUTPUT_NAME)
    }

    pub fn guest_input(&self) -> String {
        format!("{GUEST_DIR}/{INPUT_NAME}")
    }

    pub fn guest_output(&self) -> String {
        format!("{GUEST_DIR}/{OUTPUT_NAME}")
    }

    pub fn guest_dir(&self) -> &'static str {
        GUEST_DIR
    }
}

/// Resolves the workspace: explicit value, then `REPRO_WORKSPACE`, then `~/.repro`.
pub fn default_workspace(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(WORKSPACE_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    let home = std::env::var_os("HOME")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    home.join(".repro")
}

fn new_run_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

pub fn open_session(workspace: &Path) -> Result<ExchangeSession, ExchangeError> {
    let unwritable = |source| ExchangeError::WorkspaceUnwritable {
        path: workspace.to_path_buf(),
        source,
    };
    let workspace = if workspace.is_absolute() {
        workspace.to_path_buf()
    } else {
        std::env::current_dir().map_err(unwritable)?.join(workspace)
    };
    let runs = workspace.join("runs");
    fs::create_dir_all(&runs).map_err(unwritable)?;
    loop {
        let run_id = new_run_id();
        let host_dir = runs.join(&run_id);
        // create_dir fails on an existing directory, so a collision retries
        match fs::create_dir(&host_dir) {
            Ok(()) => return Ok(ExchangeSession { host_dir, run_id }),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(unwritable(e)),
        }
    }
}

/// Encodes records as canonical JSONL: one record per line, every line LF-terminated.
pub fn encode_jsonl(records: &[Record]) -> Vec<u8> {
    let mut buf = Vec::new();
    for record in records {
        buf.extend_from_slice(record.to_canonical_string().as_bytes());
        buf.push(b'\n');
    }
    buf
}

/// Parses JSONL text into records. Blank lines are not allowed except for
/// a single trailing newline at the end of the text.
pub fn decode_jsonl(text: &str) -> Result<Vec<Record>, ExchangeError> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Ok(Vec::new());
    }
    body.split('\n')
        .enumerate()
        .map(|(i, line)| {
            let line = line.strip_suffix('\r').unwrap_or(line);
            Record::parse(line).map_err(|e| ExchangeError::MalformedOutputLine {
                line: i + 1,
                snippet: snippet(line),
                reason: e.to_string(),
            })
        })
        .collect()
}

fn snippet(line: &str) -> String {
    const MAX: usize = 60;
    if line.chars().count() <= MAX {
        line.to_string()
    } else {
        let mut s: String = line.chars().take(MAX).collect();
        s.push_str("...");
        s
    }
}

pub fn write_inputs(session: &ExchangeSession, records: &[Record]) -> Result<PathBuf, ExchangeError> {
    if records.is_empty() {
        return Err(ExchangeError::EmptyBatch);
    }
    let path = session.input_path();
    let io_err = |source| ExchangeError::Io {
        path: path.clone(),
        source,
    };
    let mut file = fs::File::create(&path).map_err(io_err)?;
    file.write_all(&encode_jsonl(records)).map_err(io_err)?;
    file.sync_all().map_err(io_err)?;
    Ok(path)
}

pub fn read_outputs(session: &ExchangeSession, expected_count: usize) -> Result<Vec<Record>, ExchangeError> {
    let path = session.output_path();
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(ExchangeError::OutputMissing { path });
        }
        Err(source) => return Err(ExchangeError::Io { path, source }),
    };
    let text = String::from_utf8(bytes).map_err(|e| {
        let valid = e.utf8_error().valid_up_to();
        let line = e.as_bytes()[..valid].iter().filter(|b| **b == b'\n').count() + 1;
        ExchangeError::MalformedOutputLine {
            line,
            snippet: String::new(),
            reason: "invalid UTF-8".into(),
        }
    })?;
    let records = decode_jsonl(&text)?;
    if records.len() != expected_count {
        return Err(ExchangeError::CountMismatch {
            actual: records.len(),
            expected: expected_count,
        });
    }
    Ok(records)
}

/// Removes the session directory unless `keep` is set. Failures are logged.
pub fn close_session(session: &ExchangeSession, keep: bool) {
    if keep {
        log::info!("keeping scratch directory {}", session.host_dir.display());
        return;
    }
    match fs::remove_dir_all(&session.host_dir) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => log::warn!("could not remove {}: {e}", session.host_dir.display()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn rec(v: serde_json::Value) -> Record {
        Record::from_value(v).unwrap()
    }

    #[test]
    fn session_layout() {
        let ws = tempfile::tempdir().unwrap();
        let s = open_session(ws.path()).unwrap();
        assert_eq!(s.run_id().len(), 32);
        assert!(s
            .run_id()
            .chars()
            .all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
        assert_eq!(s.host_dir(), ws.path().join("runs").join(s.run_id()));
        assert!(s.host_dir().ends_with(s.run_id()));
        assert_eq!(fs::read_dir(s.host_dir()).unwrap().count(), 0);
        let t = open_session(ws.path()).unwrap();
        assert_ne!(s.run_id(), t.run_id());
    }

    #[test]
    fn unwritable_workspace() {
        let ws = tempfile::tempdir().unwrap();
        let blocker = ws.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let err = open_session(&blocker).unwrap_err();
        assert!(matches!(err, ExchangeError::WorkspaceUnwritable { .. }));
        assert!(err.to_string().contains(&blocker.display().to_string()));
    }

    #[test]
    fn golden_input_bytes() {
        let ws = tempfile::tempdir().unwrap();
        let s = open_session(ws.path()).unwrap();
        let path = write_inputs(&s, &[rec(json!({"b":1,"a":2}))]).unwrap();
        assert_eq!(fs::read(path).unwrap(), b"{\"a\":2,\"b\":1}\n");
        write_inputs(&s, &[rec(json!({"x":"é"}))]).unwrap();
        assert_eq!(fs::read(s.input_path()).unwrap(), "{\"x\":\"é\"}\n".as_bytes());
        assert!(matches!(write_inputs(&s, &[]), Err(ExchangeError::EmptyBatch)));
    }

    #[test]
    fn read_back() {
        let ws = tempfile::tempdir().unwrap();
        let s = open_session(ws.path()).unwrap();
        let err = read_outputs(&s, 1).unwrap_err();
        assert!(matches!(err, ExchangeError::OutputMissing { .. }));
        assert!(err.to_string().contains("/repro/output.jsonl"));

        fs::write(s.output_path(), "{\"text\":\"HELLO\"}\n").unwrap();
        assert_eq!(read_outputs(&s, 1).unwrap(), vec![rec(json!({"text":"HELLO"}))]);

        fs::write(s.output_path(), "{}\n{}\n").unwrap();
        match read_outputs(&s, 3).unwrap_err() {
            ExchangeError::CountMismatch { actual, expected } => assert_eq!((actual, expected), (2, 3)),
            e => panic!("{e}"),
        }

        fs::write(s.output_path(), "{}\n[1,2]\n").unwrap();
        match read_outputs(&s, 2).unwrap_err() {
            ExchangeError::MalformedOutputLine { line, snippet, .. } => {
                assert_eq!(line, 2);
                assert_eq!(snippet, "[1,2]");
            }
            e => panic!("{e}"),
        }

        fs::write(s.output_path(), "{}\n\n{}\n").unwrap();
        assert!(matches!(
            read_outputs(&s, 2),
            Err(ExchangeError::MalformedOutputLine { line: 2, .. })
        ));
    }

    #[test]
    fn close_semantics() {
        let ws = tempfile::tempdir().unwrap();
        let s = open_session(ws.path()).unwrap();
        write_inputs(&s, &[Record::new()]).unwrap();
        fs::write(s.output_path(), "{}\n").unwrap();
        close_session(&s, true);
        assert!(s.input_path().exists() && s.output_path().exists());
        close_session(&s, false);
        assert!(!s.host_dir().exists());
        close_session(&s, false);
    }

    #[test]
    fn workspace_precedence() {
        assert_eq!(default_workspace(Some(Path::new("/x"))), PathBuf::from("/x"));
    }
}
