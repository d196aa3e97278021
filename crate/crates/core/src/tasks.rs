//! Standard input/output schemas per task kind.
//!
//! | kind                 | input                                   | output                  |
//! |----------------------|-----------------------------------------|-------------------------|
//! | `summarization`      | `document`: non-empty string            | `summary`: string       |
//! | `generation-metric`  | `candidate`: string, `references`: non-empty list of strings | `scores`: object of finite numbers |
//! | `question-answering` | `context`: string, `question`: non-empty string | `answer`: string |
//! | `raw`                | any object                              | any object              |
//!
//! Every schema except `raw` is closed: keys not listed are violations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::exchange::{json_type_name, Record};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Summarization,
    GenerationMetric,
    QuestionAnswering,
    Raw,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Summarization,
        TaskKind::GenerationMetric,
        TaskKind::QuestionAnswering,
        TaskKind::Raw,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Summarization => "summarization",
            TaskKind::GenerationMetric => "generation-metric",
            TaskKind::QuestionAnswering => "question-answering",
            TaskKind::Raw => "raw",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown task kind `{0}` (expected one of: summarization, generation-metric, question-answering, raw)")]
pub struct UnknownTaskKind(pub String);

impl FromStr for TaskKind {
    type Err = UnknownTaskKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| UnknownTaskKind(s.to_string()))
    }
}

/// One schema violation: the offending key path and the rule it broke.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub rule: String,
}

impl Violation {
    fn new(path: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.rule)
    }
}

#[derive(Clone, Copy)]
enum Field {
    String,
    NonEmptyString,
    NonEmptyStringList,
    ScoreMap,
}

fn input_schema(kind: TaskKind) -> Option<&'static [(&'static str, Field)]> {
    match kind {
        TaskKind::Summarization => Some(&[("document", Field::NonEmptyString)]),
        TaskKind::GenerationMetric => Some(&[("candidate", Field::String), ("references", Field::NonEmptyStringList)]),
        TaskKind::QuestionAnswering => Some(&[("context", Field::String), ("question", Field::NonEmptyString)]),
        TaskKind::Raw => None,
    }
}

fn output_schema(kind: TaskKind) -> Option<&'static [(&'static str, Field)]> {
    match kind {
        TaskKind::Summarization => Some(&[("summary", Field::String)]),
        TaskKind::GenerationMetric => Some(&[("scores", Field::ScoreMap)]),
        TaskKind::QuestionAnswering => Some(&[("answer", Field::String)]),
        TaskKind::Raw => None,
    }
}

pub fn validate_input(kind: TaskKind, record: &Record) -> Vec<Violation> {
    input_schema(kind).map_or_else(Vec::new, |schema| check(schema, record))
}

pub fn validate_output(kind: TaskKind, record: &Record) -> Vec<Violation> {
    output_schema(kind).map_or_else(Vec::new, |schema| check(schema, record))
}

fn check(schema: &[(&str, Field)], record: &Record) -> Vec<Violation> {
    let mut out = Vec::new();
    for (key, field) in schema {
        match record.get(key) {
            None => out.push(Violation::new(*key, "is required")),
            Some(value) => check_field(key, *field, value, &mut out),
        }
    }
    let mut extra: Vec<&String> = record
        .as_map()
        .keys()
        .filter(|k| !schema.iter().any(|(name, _)| name == k))
        .collect();
    extra.sort();
    out.extend(extra.into_iter().map(|k| Violation::new(k.as_str(), "unexpected key")));
    out
}

fn check_field(key: &str, field: Field, value: &Value, out: &mut Vec<Violation>) {
    match field {
        Field::String | Field::NonEmptyString => match value.as_str() {
            None => out.push(Violation::new(key, "must be a string")),
            Some("") if matches!(field, Field::NonEmptyString) => out.push(Violation::new(key, "must be non-empty")),
            Some(_) => {}
        },
        Field::NonEmptyStringList => match value.as_array() {
            None => out.push(Violation::new(key, "must be a list of strings")),
            Some(items) if items.is_empty() => out.push(Violation::new(key, "must be non-empty")),
            Some(items) => {
                for (i, item) in items.iter().enumerate() {
                    if !item.is_string() {
                        out.push(Violation::new(format!("{key}[{i}]"), "must be a string"));
                    }
                }
            }
        },
        Field::ScoreMap => match value.as_object() {
            None => out.push(Violation::new(
                key,
                format!("must be an object, found {}", json_type_name(value)),
            )),
            Some(scores) => {
                let mut names: Vec<&String> = scores.keys().collect();
                names.sort();
                for name in names {
                    let finite = scores[name].as_f64().is_some_and(f64::is_finite);
                    if !finite {
                        out.push(Violation::new(format!("{key}.{name}"), "must be a finite number"));
                    }
                }
            }
        },
    }
}
