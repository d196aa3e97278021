//! On-disk capsule registry laid out as `<root>/<name>/<version>/capsule.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::manifest::{is_valid_name, parse_manifest, CapsuleManifest, ManifestError, Version, MANIFEST_FILE};
use crate::tasks::TaskKind;

/// Environment variable naming the registry root.
pub const REGISTRY_ENV: &str = "REPRO_REGISTRY";
pub const DEFAULT_REGISTRY_DIR: &str = "capsules";

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("registry root {0} does not exist or is not a directory")]
    RegistryRootMissing(PathBuf),
    #[error("could not read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    ManifestError { path: PathBuf, source: ManifestError },
    #[error("{path}: directory name `{directory}` does not match manifest name `{manifest}`")]
    NameMismatch {
        path: PathBuf,
        directory: String,
        manifest: String,
    },
    #[error("{path}: directory version `{directory}` does not match manifest version `{manifest}`")]
    VersionMismatch {
        path: PathBuf,
        directory: String,
        manifest: String,
    },
    #[error("capsule `{name}` has two directories for the same version: {first} and {second}")]
    DuplicateVersion {
        name: String,
        first: String,
        second: String,
    },
    #[error("unknown capsule `{name}`{}", suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
    UnknownCapsule { name: String, suggestion: Option<String> },
    #[error("capsule `{name}` has no version {version} (available: {})", available.join(", "))]
    UnknownVersion {
        name: String,
        version: String,
        available: Vec<String>,
    },
}

/// `name` or `name@version`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapsuleId {
    pub name: String,
    pub version: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid capsule id `{0}`: expected <name> or <name>@<version>")]
pub struct InvalidCapsuleId(pub String);

impl CapsuleId {
    pub fn new(name: impl Into<String>, version: Option<&str>) -> Self {
        Self {
            name: name.into(),
            version: version.map(str::to_string),
        }
    }
}

impl FromStr for CapsuleId {
    type Err = InvalidCapsuleId;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || InvalidCapsuleId(s.to_string());
        let (name, version) = match s.split_once('@') {
            Some((n, v)) => {
                v.parse::<Version>().map_err(|_| bad())?;
                (n, Some(v.to_string()))
            }
            None => (s, None),
        };
        if !is_valid_name(name) {
            return Err(bad());
        }
        Ok(CapsuleId {
            name: name.to_string(),
            version,
        })
    }
}

impl fmt::Display for CapsuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.version {
            Some(v) => write!(f, "{}@{}", self.name, v),
            None => f.write_str(&self.name),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    root: PathBuf,
    /// Versions per name, greatest first.
    entries: BTreeMap<String, Vec<CapsuleManifest>>,
}

/// Registry root: explicit value, then `REPRO_REGISTRY`, then `./capsules`.
pub fn default_registry_root(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(REGISTRY_ENV).filter(|v| !v.is_empty()) {
        Some(p) => PathBuf::from(p),
        None => PathBuf::from(DEFAULT_REGISTRY_DIR),
    }
}

fn sorted_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>, RegistryError> {
    let io = |source| RegistryError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let entry = entry.map_err(io)?;
        if !entry.file_type().map_err(io)?.is_dir() {
            continue;
        }
        if let Some(name) = entry.file_name().to_str() {
            out.push((name.to_string(), entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_registry(root: &Path) -> Result<Registry, RegistryError> {
    if !root.is_dir() {
        return Err(RegistryError::RegistryRootMissing(root.to_path_buf()));
    }
    let mut entries = BTreeMap::new();
    for (dir_name, name_dir) in sorted_dirs(root)? {
        let mut versions: Vec<CapsuleManifest> = Vec::new();
        for (dir_version, version_dir) in sorted_dirs(&name_dir)? {
            let path = version_dir.join(MANIFEST_FILE);
            if !path.is_file() {
                continue;
            }
            let bytes = fs::read(&path).map_err(|source| RegistryError::Io {
                path: path.clone(),
                source,
            })?;
            let manifest = parse_manifest(&bytes).map_err(|source| RegistryError::ManifestError {
                path: path.clone(),
                source,
            })?;
            if manifest.name != dir_name {
                return Err(RegistryError::NameMismatch {
                    path,
                    directory: dir_name,
                    manifest: manifest.name,
                });
            }
            if manifest.version.as_str() != dir_version {
                return Err(RegistryError::VersionMismatch {
                    path,
                    directory: dir_version,
                    manifest: manifest.version.to_string(),
                });
            }
            if let Some(dup) = versions.iter().find(|m| m.version == manifest.version) {
                return Err(RegistryError::DuplicateVersion {
                    name: dir_name,
                    first: dup.version.to_string(),
                    second: manifest.version.to_string(),
                });
            }
            versions.push(manifest);
        }
        if !versions.is_empty() {
            versions.sort_by(|a, b| b.version.cmp(&a.version));
            entries.insert(dir_name, versions);
        }
    }
    Ok(Registry {
        root: root.to_path_buf(),
        entries,
    })
}

impl Registry {
    /// Builds a registry from in-memory manifests, applying the same
    /// ordering and duplicate rules as [`load_registry`].
    pub fn from_manifests(root: impl Into<PathBuf>, manifests: Vec<CapsuleManifest>) -> Result<Self, RegistryError> {
        let mut entries: BTreeMap<String, Vec<CapsuleManifest>> = BTreeMap::new();
        for m in manifests {
            let versions = entries.entry(m.name.clone()).or_default();
            if let Some(dup) = versions.iter().find(|v| v.version == m.version) {
                return Err(RegistryError::DuplicateVersion {
                    name: m.name.clone(),
                    first: dup.version.to_string(),
                    second: m.version.to_string(),
                });
            }
            versions.push(m);
        }
        for versions in entries.values_mut() {
            versions.sort_by(|a, b| b.version.cmp(&a.version));
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// All versions of `name`, greatest first.
    pub fn versions(&self, name: &str) -> Option<&[CapsuleManifest]> {
        self.entries.get(name).map(Vec::as_slice)
    }

    /// Registered name with the smallest edit distance to `name`; ties go to
    /// the alphabetically first.
    pub fn nearest_name(&self, name: &str) -> Option<&str> {
        self.names()
            .min_by_key(|candidate| strsim::levenshtein(name, candidate))
    }
}

/// Latest version of every capsule, sorted by name, optionally filtered by task.
pub fn list_capsules(registry: &Registry, task_filter: Option<TaskKind>) -> Vec<&CapsuleManifest> {
    registry
        .entries
        .values()
        .filter_map(|versions| versions.first())
        .filter(|m| task_filter.is_none_or(|t| m.task == t))
        .collect()
}

pub fn resolve<'r>(registry: &'r Registry, id: &CapsuleId) -> Result<&'r CapsuleManifest, RegistryError> {
    let versions = registry
        .entries
        .get(&id.name)
        .ok_or_else(|| RegistryError::UnknownCapsule {
            name: id.name.clone(),
            suggestion: registry.nearest_name(&id.name).map(str::to_string),
        })?;
    let Some(wanted) = &id.version else {
        return Ok(&versions[0]);
    };
    let unknown = || RegistryError::UnknownVersion {
        name: id.name.clone(),
        version: wanted.clone(),
        available: versions.iter().map(|m| m.version.to_string()).collect(),
    };
    let wanted: Version = wanted.parse().map_err(|_| unknown())?;
    versions.iter().find(|m| m.version == wanted).ok_or_else(unknown)
}
