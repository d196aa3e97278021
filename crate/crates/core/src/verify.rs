//! Faithfulness verification against bundled examples, and the environment
//! doctor.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::{EngineClient, EngineInfo, DEFAULT_API_VERSION};
use crate::exchange::Record;
use crate::registry::{resolve, CapsuleId, Registry, RegistryError};
use crate::runner::{run_manifest, RunOptions};

/// Runtime name whose presence is taken to mean GPUs can be passed through.
pub const GPU_RUNTIME: &str = "nvidia";

/// Leaf comparison rule: numbers within an absolute tolerance, everything
/// else exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonPolicy {
    pub numeric_tolerance: f64,
}

impl ComparisonPolicy {
    pub fn exact() -> Self {
        Self { numeric_tolerance: 0.0 }
    }

    pub fn with_tolerance(numeric_tolerance: f64) -> Self {
        Self { numeric_tolerance }
    }
}

/// A differing leaf. `None` means the key or index is absent on that side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub path: String,
    pub expected: Option<Value>,
    pub actual: Option<Value>,
}

pub fn compare_records(expected: &Record, actual: &Record, policy: &ComparisonPolicy) -> Vec<Mismatch> {
    let mut out = Vec::new();
    compare_values("", &expected.to_value(), &actual.to_value(), policy, &mut out);
    out
}

fn child(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn numbers_match(a: &serde_json::Number, b: &serde_json::Number, tolerance: f64) -> bool {
    if let (Some(x), Some(y)) = (a.as_i64(), b.as_i64()) {
        return x == y || (x.abs_diff(y) as f64) <= tolerance;
    }
    if let (Some(x), Some(y)) = (a.as_u64(), b.as_u64()) {
        return x == y || (x.abs_diff(y) as f64) <= tolerance;
    }
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) => (x - y).abs() <= tolerance,
        _ => false,
    }
}

fn compare_values(path: &str, expected: &Value, actual: &Value, policy: &ComparisonPolicy, out: &mut Vec<Mismatch>) {
    let leaf = |out: &mut Vec<Mismatch>| {
        out.push(Mismatch {
            path: path.to_string(),
            expected: Some(expected.clone()),
            actual: Some(actual.clone()),
        })
    };
    match (expected, actual) {
        (Value::Object(e), Value::Object(a)) => {
            let mut keys: Vec<&String> = e.keys().chain(a.keys()).collect();
            keys.sort();
            keys.dedup();
            for key in keys {
                let p = child(path, key);
                match (e.get(key), a.get(key)) {
                    (Some(ev), Some(av)) => compare_values(&p, ev, av, policy, out),
                    (ev, av) => out.push(Mismatch {
                        path: p,
                        expected: ev.cloned(),
                        actual: av.cloned(),
                    }),
                }
            }
        }
        (Value::Array(e), Value::Array(a)) => {
            for i in 0..e.len().max(a.len()) {
                let p = format!("{path}[{i}]");
                match (e.get(i), a.get(i)) {
                    (Some(ev), Some(av)) => compare_values(&p, ev, av, policy, out),
                    (ev, av) => out.push(Mismatch {
                        path: p,
                        expected: ev.cloned(),
                        actual: av.cloned(),
                    }),
                }
            }
        }
        (Value::Number(e), Value::Number(a)) => {
            if !numbers_match(e, a, policy.numeric_tolerance) {
                leaf(out);
            }
        }
        (e, a) => {
            if e != a {
                leaf(out);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub index: usize,
    pub passed: bool,
    pub mismatches: Vec<Mismatch>,
    /// Set when the batch run failed and no output exists for this case.
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    /// `name@version` of the resolved capsule.
    pub capsule: String,
    pub cases: Vec<CaseResult>,
    pub passed: bool,
    pub skipped: bool,
    /// The runner error, when the example batch could not be run.
    pub run_error: Option<String>,
}

/// Replays the capsule's bundled examples as one batch and compares each
/// output with its expected record.
pub async fn verify_capsule(
    client: &EngineClient,
    registry: &Registry,
    id: &CapsuleId,
    override_tolerance: Option<f64>,
    options: &RunOptions,
) -> Result<VerificationReport, RegistryError> {
    let manifest = resolve(registry, id)?;
    let capsule = manifest.id();
    if manifest.examples.is_empty() {
        return Ok(VerificationReport {
            capsule,
            cases: Vec::new(),
            passed: true,
            skipped: true,
            run_error: None,
        });
    }
    let inputs: Vec<Record> = manifest.examples.iter().map(|e| e.input.clone()).collect();
    let cases: Vec<CaseResult>;
    let mut run_error = None;
    match run_manifest(client, manifest, &inputs, options).await {
        Ok((outputs, _report)) => {
            cases = manifest
                .examples
                .iter()
                .zip(&outputs)
                .enumerate()
                .map(|(index, (case, actual))| {
                    let policy = ComparisonPolicy::with_tolerance(override_tolerance.unwrap_or(case.tolerance));
                    let mismatches = compare_records(&case.expected, actual, &policy);
                    CaseResult {
                        index,
                        passed: mismatches.is_empty(),
                        mismatches,
                        detail: None,
                    }
                })
                .collect();
        }
        Err(e) => {
            let message = e.to_string();
            cases = (0..manifest.examples.len())
                .map(|index| CaseResult {
                    index,
                    passed: false,
                    mismatches: Vec::new(),
                    detail: Some(message.clone()),
                })
                .collect();
            run_error = Some(message);
        }
    }
    Ok(VerificationReport {
        capsule,
        passed: cases.iter().all(|c| c.passed),
        cases,
        skipped: false,
        run_error,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapsuleCompat {
    pub gpu_required: bool,
    pub gpu_available: bool,
    pub compatible: bool,
}

impl CapsuleCompat {
    pub fn new(gpu_required: bool, gpu_available: bool) -> Self {
        Self {
            gpu_required,
            gpu_available,
            compatible: !gpu_required || gpu_available,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoctorReport {
    pub engine: EngineInfo,
    pub checks: Vec<Check>,
    pub capsule: Option<String>,
    pub capsule_compat: Option<CapsuleCompat>,
}

impl DoctorReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed) && self.capsule_compat.is_none_or(|c| c.compatible)
    }
}

/// Parses `1.41` or `v1.41` into (major, minor).
fn api_version_tuple(v: &str) -> Option<(u64, u64)> {
    let (major, minor) = v.trim_start_matches('v').split_once('.')?;
    Some((major.parse().ok()?, minor.parse().ok()?))
}

/// Gathers engine facts and, when a capsule is given, checks its GPU
/// requirement against the engine's runtimes.
pub async fn check_environment(
    client: &EngineClient,
    id: Option<&CapsuleId>,
    registry: &Registry,
) -> Result<DoctorReport, RegistryError> {
    let manifest = id.map(|id| resolve(registry, id)).transpose()?;
    let engine = client.engine_info().await;
    let gpu_required = manifest.is_some_and(|m| m.resources.gpu);
    let gpu_available = engine.runtimes.contains(GPU_RUNTIME);

    let mut checks = vec![Check {
        name: "engine-reachable".into(),
        passed: engine.reachable,
        detail: if engine.reachable {
            format!("engine {} reachable", engine.engine_version)
        } else {
            format!("no engine answered at {}", client.engine().describe())
        },
    }];
    let minimum = api_version_tuple(DEFAULT_API_VERSION).expect("constant parses");
    let api_ok = engine.reachable && api_version_tuple(&engine.api_version).is_some_and(|v| v >= minimum);
    checks.push(Check {
        name: "api-version".into(),
        passed: api_ok,
        detail: if engine.reachable {
            format!(
                "engine API {} (need >= {})",
                engine.api_version,
                DEFAULT_API_VERSION.trim_start_matches('v')
            )
        } else {
            "unknown".into()
        },
    });
    checks.push(Check {
        name: "gpu-runtime".into(),
        passed: engine.reachable && (gpu_available || !gpu_required),
        detail: match (engine.reachable, gpu_available, gpu_required) {
            (false, _, _) => "unknown".into(),
            (true, true, _) => format!("`{GPU_RUNTIME}` runtime available"),
            (true, false, true) => format!("`{GPU_RUNTIME}` runtime missing and the capsule requires a GPU"),
            (true, false, false) => format!("`{GPU_RUNTIME}` runtime missing (not required)"),
        },
    });

    Ok(DoctorReport {
        checks,
        capsule: manifest.map(|m| m.id()),
        capsule_compat: manifest.map(|_| CapsuleCompat::new(gpu_required, gpu_available)),
        engine,
    })
}
