//! Shared fixtures: the bundled capsule registry and fake images that behave
//! like the capsules it describes.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use repro::cli::{run_cli, CliContext};
use repro::engine::{Engine, EngineClient};
use repro::engine::{FakeEngine, FakeImage};
use repro::exchange::Record;
use repro::registry::{load_registry, CapsuleId, Registry};
use repro::tasks::TaskKind;
use serde_json::{json, Value};

pub fn fixture_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../capsules")
}

pub fn fixture_registry() -> Registry {
    load_registry(&fixture_root()).expect("fixture registry loads")
}

pub fn rec(v: Value) -> Record {
    Record::from_value(v).expect("object")
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        current.push(c);
        if matches!(c, '.' | '?' | '!') {
            out.push(current.trim().to_string());
            current.clear();
        }
    }
    if !current.trim().is_empty() {
        out.push(current.trim().to_string());
    }
    out
}

/// Clipped unigram overlap: (precision, recall, f1).
pub fn unigram_overlap(candidate: &str, reference: &str) -> (f64, f64, f64) {
    let cand = tokens(candidate);
    let refs = tokens(reference);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &refs {
        *counts.entry(w).or_default() += 1;
    }
    let mut overlap = 0usize;
    for w in &cand {
        if let Some(n) = counts.get_mut(w.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    let p = if cand.is_empty() {
        0.0
    } else {
        overlap as f64 / cand.len() as f64
    };
    let r = if refs.is_empty() {
        0.0
    } else {
        overlap as f64 / refs.len() as f64
    };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

fn lead_summary(r: &Record) -> Record {
    let doc = r.get("document").and_then(Value::as_str).unwrap_or("");
    let summary = sentences(doc).into_iter().next().unwrap_or_default();
    rec(json!({ "summary": summary }))
}

fn overlap_scores(r: &Record) -> Record {
    let cand = r.get("candidate").and_then(Value::as_str).unwrap_or("");
    let refs: Vec<&str> = r
        .get("references")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(Value::as_str).collect())
        .unwrap_or_default();
    let best = refs
        .iter()
        .map(|reference| unigram_overlap(cand, reference))
        .fold((0.0, 0.0, 0.0), |best, s| if s.2 > best.2 { s } else { best });
    rec(json!({"scores": {"unigram-p": best.0, "unigram-r": best.1, "unigram-f1": best.2}}))
}

fn sentence_answer(r: &Record) -> Record {
    let context = r.get("context").and_then(Value::as_str).unwrap_or("");
    let question = tokens(r.get("question").and_then(Value::as_str).unwrap_or(""));
    let mut best = (0usize, String::new());
    for s in sentences(context) {
        let score = tokens(&s).iter().filter(|t| question.contains(t)).count();
        if score > best.0 {
            best = (score, s);
        }
    }
    rec(json!({ "answer": best.1 }))
}

/// The fake image standing in for a fixture capsule.
pub fn fixture_image(name: &str) -> FakeImage {
    match name {
        "upper" => FakeImage::uppercase(),
        "echo" => FakeImage::identity(),
        "lineno" => FakeImage::line_number(),
        "lead-summary" => FakeImage::new(|_, r| lead_summary(r)),
        "unigram-overlap" => FakeImage::new(|_, r| overlap_scores(r)),
        "sentence-qa" => FakeImage::new(|_, r| sentence_answer(r)),
        "gpu-tagger" => FakeImage::new(|_, r| {
            let mut out = r.clone();
            out.insert("device", "gpu");
            out
        }),
        other => panic!("no fake image for fixture {other}"),
    }
}

/// A fake engine where every fixture image is available remotely and, when
/// `installed` is set, already present locally.
pub fn fixture_engine(installed: bool) -> Arc<FakeEngine> {
    let engine = Arc::new(FakeEngine::new());
    let registry = fixture_registry();
    for name in registry.names() {
        for m in registry.versions(name).unwrap() {
            let image = m.image.canonical();
            engine.publish(&image, fixture_image(name));
            if installed {
                engine.install(&image, fixture_image(name));
            }
        }
    }
    engine
}

pub fn client(engine: &Arc<FakeEngine>) -> EngineClient {
    EngineClient::new(engine.clone() as Arc<dyn Engine>)
}

pub fn cli_context(engine: &Arc<FakeEngine>) -> CliContext {
    let engine = engine.clone();
    CliContext::new(Arc::new(move |_| Ok(engine.clone() as Arc<dyn Engine>)))
}

pub struct CliOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn run_cli_with(ctx: &CliContext, args: &[&str]) -> CliOutput {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["repro"];
    argv.extend_from_slice(args);
    let code = run_cli(argv, ctx, &mut out, &mut err);
    CliOutput {
        code,
        stdout: String::from_utf8(out).expect("utf-8 stdout"),
        stderr: String::from_utf8(err).expect("utf-8 stderr"),
    }
}

pub mod contract;
pub mod daemon;

/// Contract subject backed by fake images. The copy image is only
/// available remotely, so the suite exercises a real pull.
pub fn fake_contract_subject(engine: Arc<FakeEngine>) -> contract::Subject {
    use std::time::Duration;
    engine.publish("contract/copy:1", FakeImage::identity());
    engine.install(
        "contract/fail:1",
        FakeImage::identity().with_exit_code(3).with_stderr("boom\n"),
    );
    engine.install(
        "contract/sleep:1",
        FakeImage::identity().with_delay(Duration::from_secs(30)),
    );
    let argv = vec!["/bin/capsule".to_string()];
    contract::Subject {
        engine,
        copy: ("docker.io/contract/copy:1".into(), argv.clone()),
        fail: ("docker.io/contract/fail:1".into(), argv.clone()),
        sleep: ("docker.io/contract/sleep:1".into(), argv),
        absent: "docker.io/contract/absent:0".into(),
    }
}

/// Contract subject for a real engine, using a small image with a shell.
pub fn real_contract_subject() -> contract::Subject {
    use repro::engine::{DockerEngine, EngineEndpoint};
    let image = std::env::var("REPRO_TEST_IMAGE").unwrap_or_else(|_| "docker.io/library/busybox:latest".into());
    let endpoint = EngineEndpoint::resolve(None).expect("engine endpoint");
    let sh = |script: &str| vec!["sh".to_string(), "-c".to_string(), script.to_string()];
    contract::Subject {
        engine: Arc::new(DockerEngine::new(endpoint)),
        copy: (image.clone(), sh("cat /repro/input.jsonl > /repro/output.jsonl")),
        fail: (image.clone(), sh("echo boom >&2; exit 3")),
        sleep: (image, vec!["sleep".into(), "60".into()]),
        absent: "docker.io/repro-contract/definitely-absent-image:0.0.0".into(),
    }
}

/// Opt-in switch for tests that need a real container engine.
pub const REAL_ENGINE_FLAG: &str = "REPRO_TEST_REAL_ENGINE";

pub fn real_engine_enabled() -> bool {
    std::env::var(REAL_ENGINE_FLAG).is_ok_and(|v| v == "1")
}

/// A minimal valid manifest for `name@1.0` running `image`.
pub fn manifest(name: &str, image: &str, task: &str) -> repro::manifest::CapsuleManifest {
    let doc = json!({
        "schema_version": 1,
        "name": name,
        "version": "1.0",
        "paper": {"title": "Test Capsule", "year": 2024},
        "image": image,
        "task": task,
        "command": ["run", "{input}", "{output}"],
    });
    repro::manifest::parse_manifest(doc.to_string().as_bytes()).expect("valid test manifest")
}

pub fn registry_of(manifests: Vec<repro::manifest::CapsuleManifest>) -> Registry {
    Registry::from_manifests("/nonexistent", manifests).expect("distinct test manifests")
}

/// A content marker unique to one capsule version, used to detect
/// cross-session contamination.
pub fn marker_of(id: &CapsuleId) -> String {
    let version = id.version.clone().unwrap_or_default().replace('.', "");
    format!("mk{}x{version}", id.name.replace('-', ""))
}

/// One marked input batch per fixture capsule, shaped for its task kind.
pub fn marked_batches() -> Vec<(CapsuleId, Vec<Record>)> {
    let registry = fixture_registry();
    let mut out = Vec::new();
    for name in registry.names() {
        for m in registry.versions(name).unwrap() {
            let id = CapsuleId::new(&m.name, Some(&m.version.to_string()));
            let marker = marker_of(&id);
            let records = (0..5)
                .map(|j| match m.task {
                    TaskKind::Summarization => rec(json!({"document": format!("{marker} item {j}. Second sentence.")})),
                    TaskKind::GenerationMetric => {
                        rec(json!({"candidate": format!("{marker} a b {j}"), "references": [format!("{marker} a")]}))
                    }
                    TaskKind::QuestionAnswering => rec(json!({
                        "context": format!("{marker} is here {j}. Other text."),
                        "question": format!("where is {marker}")
                    })),
                    TaskKind::Raw => rec(json!({"text": format!("{marker} item {j}")})),
                })
                .collect();
            out.push((id, records));
        }
    }
    out
}

/// Arbitrary JSON values, nested up to a few levels, including non-ASCII and
/// control characters in strings and keys.
pub fn arb_json() -> impl proptest::strategy::Strategy<Value = Value> {
    use proptest::prelude::*;
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::Bool),
        any::<i64>().prop_map(Value::from),
        any::<u64>().prop_map(Value::from),
        any::<f64>()
            .prop_filter("finite", |f| f.is_finite())
            .prop_map(Value::from),
        "\\PC{0,12}".prop_map(Value::String),
        "[\\x00-\\x1f\"\\\\é☃𝄞]{0,6}".prop_map(Value::String),
    ];
    leaf.prop_recursive(4, 48, 6, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..6).prop_map(Value::Array),
            prop::collection::btree_map("\\PC{0,6}", inner, 0..6).prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

pub fn arb_record() -> impl proptest::strategy::Strategy<Value = Record> {
    use proptest::prelude::*;
    prop::collection::btree_map("\\PC{0,8}", arb_json(), 0..6)
        .prop_map(|m| Record::from(m.into_iter().collect::<serde_json::Map<_, _>>()))
}

/// The raw JSON document of a bundled fixture manifest.
pub fn fixture_doc(name: &str, version: &str) -> Value {
    let path = fixture_root().join(name).join(version).join("capsule.json");
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

/// Writes manifest documents into `root` using the registry layout.
pub fn write_registry(root: &std::path::Path, docs: &[Value]) {
    for doc in docs {
        let dir = root
            .join(doc["name"].as_str().unwrap())
            .join(doc["version"].as_str().unwrap());
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("capsule.json"), serde_json::to_vec_pretty(doc).unwrap()).unwrap();
    }
}

const FUZZ_VOCAB: &[&str] = &[
    "list",
    "run",
    "pull",
    "verify",
    "doctor",
    "info",
    "help",
    "--json",
    "--task",
    "summarization",
    "raw",
    "flying",
    "--input",
    "--output",
    "--timeout",
    "0",
    "1",
    "-3",
    "abc",
    "--keep-scratch",
    "--pull",
    "never",
    "always",
    "if-missing",
    "sometimes",
    "--tolerance",
    "0.5",
    "nan",
    "-1",
    "1e308",
    "upper",
    "upper@1.0",
    "upper@9.9",
    "UPPER",
    "echo",
    "gpu-tagger",
    "unigram-overlap",
    "lead-summary",
    "sentence-qa",
    "nosuch",
    "a@",
    "@1",
    "--registry",
    "--workspace",
    "--engine",
    "tcp://",
    "unix://",
    "--help",
    "-h",
    "--version",
    "-V",
    "",
    " ",
    "--",
    "-",
    "é",
    "\u{0}",
    "in.jsonl",
    "out.jsonl",
    "missing.jsonl",
    "bad.jsonl",
];

/// Runs `cases` random argument vectors through the CLI against a fake
/// engine and returns how often each exit code occurred. Fails on a panic or
/// an exit code outside 0..=4.
pub fn fuzz_cli(cases: u32) -> Result<[usize; 5], String> {
    use proptest::prelude::*;
    use proptest::test_runner::{Config, TestRunner};
    use std::sync::atomic::{AtomicUsize, Ordering};

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("in.jsonl"), "{\"text\":\"hi\"}\n").unwrap();
    std::fs::write(dir.path().join("bad.jsonl"), "nope\n").unwrap();
    let engine = fixture_engine(false);
    engine.set_runtimes(["runc"]);
    let ctx = cli_context(&engine);
    let registry = fixture_root().display().to_string();
    let ws = dir.path().join("ws").display().to_string();
    let in_dir = |t: &str| match t {
        "in.jsonl" | "out.jsonl" | "missing.jsonl" | "bad.jsonl" => dir.path().join(t).display().to_string(),
        other => other.to_string(),
    };

    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (
        prop::collection::vec(prop::sample::select(FUZZ_VOCAB), 0..9),
        any::<bool>(),
        prop::option::of("\\PC{0,6}"),
    );
    let seen: [AtomicUsize; 5] = Default::default();
    runner
        .run(&strategy, |(tokens, pin_dirs, junk)| {
            let mut argv: Vec<String> = tokens.iter().map(|t| in_dir(t)).collect();
            if let Some(j) = junk {
                argv.push(j);
            }
            if pin_dirs {
                argv.extend(["--registry".into(), registry.clone(), "--workspace".into(), ws.clone()]);
            }
            let refs: Vec<&str> = argv.iter().map(String::as_str).collect();
            let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run_cli_with(&ctx, &refs)))
                .map_err(|_| TestCaseError::fail(format!("panic on {argv:?}")))?;
            prop_assert!((0..=4).contains(&out.code), "exit {} for {:?}", out.code, argv);
            seen[out.code as usize].fetch_add(1, Ordering::Relaxed);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    if engine.live_containers() != 0 {
        return Err(format!("{} containers left behind", engine.live_containers()));
    }
    Ok(seen.map(|c| c.into_inner()))
}
