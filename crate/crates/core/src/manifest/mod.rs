//! Capsule manifests (`capsule.json`).
//!
//! A manifest binds one version of a paper's released code to a container
//! image, a task kind, a command template, resource needs and bundled
//! example cases. Parsing is strict: unknown keys at any level are errors and
//! every default is filled in, so the rest of the crate never sees an
//! absent field.

mod image;
mod version;

use std::fmt;

use serde::{Serialize, Serializer};
use serde_json::{json, Map, Value};

use crate::exchange::{json_type_name, to_canonical_string, Record};
use crate::tasks::TaskKind;

pub use image::{canonical_image_ref, ImageRef, InvalidImageRef, DEFAULT_REGISTRY, DEFAULT_TAG};
pub use version::{InvalidVersion, Version};

pub const MANIFEST_FILE: &str = "capsule.json";
pub const SCHEMA_VERSION: i64 = 1;
pub const DEFAULT_MEMORY_MB: u64 = 2048;
pub const MIN_MEMORY_MB: u64 = 64;

pub const INPUT_PLACEHOLDER: &str = "{input}";
pub const OUTPUT_PLACEHOLDER: &str = "{output}";
pub const DIR_PLACEHOLDER: &str = "{dir}";
const PLACEHOLDERS: [&str; 3] = [INPUT_PLACEHOLDER, OUTPUT_PLACEHOLDER, DIR_PLACEHOLDER];

const TOP_LEVEL_KEYS: [&str; 9] = [
    "schema_version",
    "name",
    "version",
    "paper",
    "image",
    "task",
    "command",
    "resources",
    "examples",
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ManifestError {
    #[error("malformed manifest: {0}")]
    MalformedSyntax(String),
    #[error("schema violation at `{field}`: {reason}")]
    SchemaViolation { field: String, reason: String },
    #[error("unsupported schema_version {0} (this build reads version {SCHEMA_VERSION})")]
    UnsupportedSchemaVersion(i64),
}

impl ManifestError {
    /// The offending field for schema violations.
    pub fn field(&self) -> Option<&str> {
        match self {
            ManifestError::SchemaViolation { field, .. } => Some(field),
            ManifestError::UnsupportedSchemaVersion(_) => Some("schema_version"),
            ManifestError::MalformedSyntax(_) => None,
        }
    }
}

fn violation(field: impl Into<String>, reason: impl Into<String>) -> ManifestError {
    ManifestError::SchemaViolation {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleManifest {
    pub schema_version: i64,
    pub name: String,
    pub version: Version,
    pub paper: PaperMeta,
    pub image: ImageRef,
    pub task: TaskKind,
    pub command: CommandTemplate,
    pub resources: ResourceSpec,
    pub examples: Vec<ExampleCase>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaperMeta {
    pub title: String,
    pub year: i64,
    pub url: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResourceSpec {
    pub gpu: bool,
    pub memory_mb: u64,
}

impl Default for ResourceSpec {
    fn default() -> Self {
        Self {
            gpu: false,
            memory_mb: DEFAULT_MEMORY_MB,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleCase {
    pub input: Record,
    pub expected: Record,
    pub tolerance: f64,
}

/// Command argv with whole-token placeholders `{input}`, `{output}`, `{dir}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandTemplate {
    tokens: Vec<String>,
}

impl CommandTemplate {
    pub fn new(tokens: Vec<String>) -> Result<Self, ManifestError> {
        if tokens.is_empty() {
            return Err(violation("command", "must be a non-empty list of strings"));
        }
        for (i, token) in tokens.iter().enumerate() {
            if PLACEHOLDERS.contains(&token.as_str()) {
                continue;
            }
            if let Some(p) = PLACEHOLDERS.iter().find(|p| token.contains(*p)) {
                return Err(violation(
                    "command",
                    format!("token {i} `{token}` embeds {p}; placeholders must be whole tokens"),
                ));
            }
        }
        for required in [INPUT_PLACEHOLDER, OUTPUT_PLACEHOLDER] {
            if !tokens.iter().any(|t| t == required) {
                return Err(violation("command", format!("must contain a {required} token")));
            }
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Substitutes guest paths for whole-token placeholders. Every other token
/// is copied unchanged; the result is an argv array, never a shell string.
pub fn render_command(template: &CommandTemplate, input_path: &str, output_path: &str, dir_path: &str) -> Vec<String> {
    template
        .tokens
        .iter()
        .map(|token| match token.as_str() {
            INPUT_PLACEHOLDER => input_path.to_string(),
            OUTPUT_PLACEHOLDER => output_path.to_string(),
            DIR_PLACEHOLDER => dir_path.to_string(),
            _ => token.clone(),
        })
        .collect()
}

/// Checks the capsule-name rule `[a-z0-9][a-z0-9-]{0,63}`.
pub fn is_valid_name(name: &str) -> bool {
    let bytes = name.as_bytes();
    let allowed = |b: &u8| b.is_ascii_lowercase() || b.is_ascii_digit();
    (1..=64).contains(&bytes.len()) && allowed(&bytes[0]) && bytes[1..].iter().all(|b| allowed(b) || *b == b'-')
}

pub fn parse_manifest(bytes: &[u8]) -> Result<CapsuleManifest, ManifestError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ManifestError::MalformedSyntax(format!("not UTF-8: {e}")))?;
    if text.starts_with('\u{feff}') {
        return Err(ManifestError::MalformedSyntax("byte order mark not allowed".into()));
    }
    let value: Value = serde_json::from_str(text).map_err(|e| ManifestError::MalformedSyntax(e.to_string()))?;
    from_value(&value)
}

pub fn from_value(value: &Value) -> Result<CapsuleManifest, ManifestError> {
    let root = Obj::new("", value)?;
    root.deny_unknown(&TOP_LEVEL_KEYS)?;

    let schema_version = root.required("schema_version")?;
    let schema_version = schema_version
        .as_i64()
        .ok_or_else(|| violation("schema_version", "must be an integer"))?;
    if schema_version != SCHEMA_VERSION {
        return Err(ManifestError::UnsupportedSchemaVersion(schema_version));
    }

    let name = root.string("name")?;
    if !is_valid_name(&name) {
        return Err(violation(
            "name",
            format!("`{name}` must match [a-z0-9][a-z0-9-]{{0,63}}"),
        ));
    }
    let version = root
        .string("version")?
        .parse::<Version>()
        .map_err(|e| violation("version", e.to_string()))?;

    let paper = parse_paper(&Obj::new("paper", root.required("paper")?)?)?;

    let image = root
        .string("image")?
        .parse::<ImageRef>()
        .map_err(|e| violation("image", e.to_string()))?;

    let task = root
        .string("task")?
        .parse::<TaskKind>()
        .map_err(|e| violation("task", e.to_string()))?;

    let command = match root.required("command")? {
        Value::Array(items) => items
            .iter()
            .enumerate()
            .map(|(i, t)| {
                t.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| violation(format!("command[{i}]"), "must be a string"))
            })
            .collect::<Result<Vec<_>, _>>()?,
        other => {
            return Err(violation(
                "command",
                format!("must be a list, found {}", json_type_name(other)),
            ))
        }
    };
    let command = CommandTemplate::new(command)?;

    let resources = match root.optional("resources") {
        None => ResourceSpec::default(),
        Some(v) => parse_resources(&Obj::new("resources", v)?)?,
    };

    let examples = match root.optional("examples") {
        None => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, item)| parse_example(&Obj::new(&format!("examples[{i}]"), item)?))
            .collect::<Result<Vec<_>, _>>()?,
        Some(other) => {
            return Err(violation(
                "examples",
                format!("must be a list, found {}", json_type_name(other)),
            ));
        }
    };

    Ok(CapsuleManifest {
        schema_version,
        name,
        version,
        paper,
        image,
        task,
        command,
        resources,
        examples,
    })
}

fn parse_paper(obj: &Obj<'_>) -> Result<PaperMeta, ManifestError> {
    obj.deny_unknown(&["title", "year", "url"])?;
    let title = obj.string("title")?;
    if title.trim().is_empty() {
        return Err(violation(obj.path("title"), "must be non-empty"));
    }
    let year = obj
        .required("year")?
        .as_i64()
        .filter(|y| (1950..=2100).contains(y))
        .ok_or_else(|| violation(obj.path("year"), "must be an integer in [1950, 2100]"))?;
    let url = match obj.optional("url") {
        None => None,
        Some(Value::String(u)) if u.starts_with("http") => Some(u.clone()),
        Some(_) => return Err(violation(obj.path("url"), "must be a string beginning with http")),
    };
    Ok(PaperMeta { title, year, url })
}

fn parse_resources(obj: &Obj<'_>) -> Result<ResourceSpec, ManifestError> {
    obj.deny_unknown(&["gpu", "memory_mb"])?;
    let gpu = match obj.optional("gpu") {
        None => false,
        Some(v) => v
            .as_bool()
            .ok_or_else(|| violation(obj.path("gpu"), "must be a boolean"))?,
    };
    let memory_mb = match obj.optional("memory_mb") {
        None => DEFAULT_MEMORY_MB,
        Some(v) => v
            .as_u64()
            .filter(|m| *m >= MIN_MEMORY_MB)
            .ok_or_else(|| violation(obj.path("memory_mb"), format!("must be an integer >= {MIN_MEMORY_MB}")))?,
    };
    Ok(ResourceSpec { gpu, memory_mb })
}

fn parse_example(obj: &Obj<'_>) -> Result<ExampleCase, ManifestError> {
    obj.deny_unknown(&["input", "expected", "tolerance"])?;
    let record =
        |key: &str| Record::from_value(obj.required(key)?.clone()).map_err(|e| violation(obj.path(key), e.to_string()));
    let input = record("input")?;
    let expected = record("expected")?;
    let tolerance = match obj.optional("tolerance") {
        None => 0.0,
        Some(v) => v
            .as_f64()
            .filter(|t| t.is_finite() && *t >= 0.0)
            .ok_or_else(|| violation(obj.path("tolerance"), "must be a non-negative number"))?,
    };
    Ok(ExampleCase {
        input,
        expected,
        tolerance,
    })
}

/// A JSON object being read, with its path for error messages.
struct Obj<'a> {
    prefix: String,
    map: &'a Map<String, Value>,
}

impl<'a> Obj<'a> {
    fn new(prefix: &str, value: &'a Value) -> Result<Self, ManifestError> {
        match value {
            Value::Object(map) => Ok(Self {
                prefix: prefix.to_string(),
                map,
            }),
            other => Err(violation(
                if prefix.is_empty() { "<root>" } else { prefix },
                format!("must be an object, found {}", json_type_name(other)),
            )),
        }
    }

    fn path(&self, key: &str) -> String {
        if self.prefix.is_empty() {
            key.to_string()
        } else {
            format!("{}.{}", self.prefix, key)
        }
    }

    fn deny_unknown(&self, allowed: &[&str]) -> Result<(), ManifestError> {
        let mut unknown: Vec<&String> = self.map.keys().filter(|k| !allowed.contains(&k.as_str())).collect();
        unknown.sort();
        match unknown.first() {
            Some(k) => Err(violation(self.path(k), "unknown key")),
            None => Ok(()),
        }
    }

    fn optional(&self, key: &str) -> Option<&'a Value> {
        self.map.get(key)
    }

    fn required(&self, key: &str) -> Result<&'a Value, ManifestError> {
        self.map
            .get(key)
            .ok_or_else(|| violation(self.path(key), "missing required field"))
    }

    fn string(&self, key: &str) -> Result<String, ManifestError> {
        match self.required(key)? {
            Value::String(s) => Ok(s.clone()),
            other => Err(violation(
                self.path(key),
                format!("must be a string, found {}", json_type_name(other)),
            )),
        }
    }
}

impl CapsuleManifest {
    /// `name@version`.
    pub fn id(&self) -> String {
        format!("{}@{}", self.name, self.version)
    }

    /// Manifest document with every default written out.
    pub fn to_json_value(&self) -> Value {
        let mut paper = json!({"title": self.paper.title, "year": self.paper.year});
        if let Some(url) = &self.paper.url {
            paper["url"] = json!(url);
        }
        let examples: Vec<Value> = self
            .examples
            .iter()
            .map(|e| json!({"input": e.input, "expected": e.expected, "tolerance": e.tolerance}))
            .collect();
        json!({
            "schema_version": self.schema_version,
            "name": self.name,
            "version": self.version.as_str(),
            "paper": paper,
            "image": self.image.canonical(),
            "task": self.task.as_str(),
            "command": self.command.tokens,
            "resources": {"gpu": self.resources.gpu, "memory_mb": self.resources.memory_mb},
            "examples": examples,
        })
    }

    pub fn to_canonical_json(&self) -> String {
        to_canonical_string(&self.to_json_value())
    }
}

impl Serialize for CapsuleManifest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json_value().serialize(serializer)
    }
}

impl fmt::Display for CapsuleManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}
